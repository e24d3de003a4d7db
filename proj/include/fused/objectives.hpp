/*
 * Copyright 2026 FUSED Toolkit Contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "fused/branch.hpp"
#include "fused/common.hpp"

namespace fused {

struct LossWeights {
    double lambda_kd = 1.0;
    double lambda_div = 1.0;
};

// Joint class-prediction distribution between the two branches' linear views.
struct JointDistribution {
    Mat P;  // K x K, P[j][k] = mean_i p_fm[i][j] * p_sm[i][k]
    std::vector<double> marginal_fm;
    std::vector<double> marginal_sm;
    int num_classes() const { return P.rows; }
};

inline JointDistribution joint_distribution(const ProbBatch& p_fm, const ProbBatch& p_sm) {
    const int N = p_fm.values.rows;
    const int K = p_fm.values.cols;
    if (N == 0) throw std::invalid_argument("joint_distribution: empty batch");
    if (p_sm.values.rows != N || p_sm.values.cols != K)
        throw std::invalid_argument("joint_distribution: shape mismatch between branches");
    if (p_fm.view != View::Linear || p_sm.view != View::Linear)
        throw std::invalid_argument("joint_distribution: expects linear-view batches");
    JointDistribution J;
    J.P = matmul_tA(p_fm.values, p_sm.values);
    for (auto& x : J.P.v) x /= N;
    J.marginal_fm.assign(K, 0.0);
    J.marginal_sm.assign(K, 0.0);
    for (int j = 0; j < K; ++j)
        for (int k = 0; k < K; ++k) {
            J.marginal_fm[j] += J.P(j, k);
            J.marginal_sm[k] += J.P(j, k);
        }
    return J;
}

// Negative mutual information of the joint; in [-log K, 0] up to floor effects.
inline double mi_loss(const JointDistribution& J) {
    const int K = J.num_classes();
    double loss = 0.0;
    for (int j = 0; j < K; ++j)
        for (int k = 0; k < K; ++k) {
            const double p = J.P(j, k);
            loss -= p * (log_floored(p) - log_floored(J.marginal_fm[j]) - log_floored(J.marginal_sm[k]));
        }
    return loss;
}

// dL/dP for mi_loss, including the floor's ratio terms so finite differences
// agree to machine-level accuracy.
inline Mat mi_loss_grad_joint(const JointDistribution& J) {
    const int K = J.num_classes();
    Mat G(K, K);
    for (int j = 0; j < K; ++j)
        for (int k = 0; k < K; ++k) {
            const double p = J.P(j, k);
            const double mj = J.marginal_fm[j];
            const double mk = J.marginal_sm[k];
            G(j, k) = -(log_floored(p) - log_floored(mj) - log_floored(mk)) - p / (p + kLogEps) +
                      mj / (mj + kLogEps) + mk / (mk + kLogEps);
        }
    return G;
}

// dL/dp_fm with the SM side held constant: p_sm * G^T / N.
inline Mat mi_loss_grad_fm_probs(const JointDistribution& J, const Mat& p_sm_values) {
    Mat G = mi_loss_grad_joint(J);
    Mat d = matmul_tB(p_sm_values, G);
    for (auto& x : d.v) x /= p_sm_values.rows;
    return d;
}

// Consensus-masked cross-entropy on refined pseudo-labels. An all-zero mask
// yields exactly 0; *flagged_empty reports that case to the caller.
inline double masked_ce(const ProbBatch& p_sm, const std::vector<int>& labels,
                        const std::vector<uint8_t>& mask, bool* flagged_empty = nullptr) {
    const int N = p_sm.values.rows;
    if (labels.size() != static_cast<size_t>(N) || mask.size() != static_cast<size_t>(N))
        throw std::invalid_argument("masked_ce: length mismatch");
    double msum = 0.0, loss = 0.0;
    for (int i = 0; i < N; ++i) {
        if (!mask[i]) continue;
        const int y = labels[i];
        if (y < 0 || y >= p_sm.values.cols) throw std::invalid_argument("masked_ce: label out of range");
        loss -= log_floored(p_sm.values(i, y));
        msum += 1.0;
    }
    if (flagged_empty) *flagged_empty = (msum == 0.0);
    if (msum == 0.0) return 0.0;
    return loss / msum;
}

inline Mat masked_ce_grad(const ProbBatch& p_sm, const std::vector<int>& labels,
                          const std::vector<uint8_t>& mask) {
    const int N = p_sm.values.rows;
    Mat d(N, p_sm.values.cols);
    double msum = 0.0;
    for (int i = 0; i < N; ++i) msum += mask[i] ? 1.0 : 0.0;
    if (msum == 0.0) return d;
    for (int i = 0; i < N; ++i) {
        if (!mask[i]) continue;
        const int y = labels[i];
        d(i, y) = -1.0 / ((p_sm.values(i, y) + kLogEps) * msum);
    }
    return d;
}

// Mean KL(p_fm || p_sm) over all samples; the teacher side is a constant.
inline double kd_loss(const ProbBatch& p_fm, const ProbBatch& p_sm) {
    const int N = p_fm.values.rows;
    const int K = p_fm.values.cols;
    if (p_sm.values.rows != N || p_sm.values.cols != K)
        throw std::invalid_argument("kd_loss: shape mismatch");
    double loss = 0.0;
    for (int i = 0; i < N; ++i) {
        const double* f = p_fm.values.row(i);
        const double* s = p_sm.values.row(i);
        for (int k = 0; k < K; ++k) loss += f[k] * (log_floored(f[k]) - log_floored(s[k]));
    }
    return loss / N;
}

inline Mat kd_grad_student(const ProbBatch& p_fm, const ProbBatch& p_sm) {
    const int N = p_fm.values.rows;
    const int K = p_fm.values.cols;
    Mat d(N, K);
    for (int i = 0; i < N; ++i) {
        const double* f = p_fm.values.row(i);
        const double* s = p_sm.values.row(i);
        double* dr = d.row(i);
        for (int k = 0; k < K; ++k) dr[k] = -f[k] / ((s[k] + kLogEps) * N);
    }
    return d;
}

// Teacher-side gradient, only used when distillation is not detached.
inline Mat kd_grad_teacher(const ProbBatch& p_fm, const ProbBatch& p_sm) {
    const int N = p_fm.values.rows;
    const int K = p_fm.values.cols;
    Mat d(N, K);
    for (int i = 0; i < N; ++i) {
        const double* f = p_fm.values.row(i);
        const double* s = p_sm.values.row(i);
        double* dr = d.row(i);
        for (int k = 0; k < K; ++k)
            dr[k] = (log_floored(f[k]) - log_floored(s[k]) + f[k] / (f[k] + kLogEps)) / N;
    }
    return d;
}

// Negative entropy of the mean prediction; minimized at -log K.
inline double div_loss(const ProbBatch& p_sm) {
    const int N = p_sm.values.rows;
    const int K = p_sm.values.cols;
    if (N < 1) throw std::invalid_argument("div_loss: empty batch");
    double loss = 0.0;
    for (int k = 0; k < K; ++k) {
        double mean = 0.0;
        for (int i = 0; i < N; ++i) mean += p_sm.values(i, k);
        mean /= N;
        loss += mean * log_floored(mean);
    }
    return loss;
}

inline Mat div_grad(const ProbBatch& p_sm) {
    const int N = p_sm.values.rows;
    const int K = p_sm.values.cols;
    Mat d(N, K);
    for (int k = 0; k < K; ++k) {
        double mean = 0.0;
        for (int i = 0; i < N; ++i) mean += p_sm.values(i, k);
        mean /= N;
        const double g = (log_floored(mean) + mean / (mean + kLogEps)) / N;
        for (int i = 0; i < N; ++i) d(i, k) = g;
    }
    return d;
}

// Plain labeled cross-entropy for source pretraining.
inline double source_ce(const ProbBatch& p, const std::vector<int>& labels) {
    const int N = p.values.rows;
    if (labels.size() != static_cast<size_t>(N)) throw std::invalid_argument("source_ce: length mismatch");
    double loss = 0.0;
    for (int i = 0; i < N; ++i) {
        const int y = labels[i];
        if (y < 0 || y >= p.values.cols)
            throw std::invalid_argument("source_ce: label " + std::to_string(y) + " out of range at row " +
                                        std::to_string(i));
        loss -= log_floored(p.values(i, y));
    }
    return loss / N;
}

inline Mat source_ce_grad(const ProbBatch& p, const std::vector<int>& labels) {
    const int N = p.values.rows;
    Mat d(N, p.values.cols);
    for (int i = 0; i < N; ++i) {
        const int y = labels[i];
        d(i, y) = -1.0 / ((p.values(i, y) + kLogEps) * N);
    }
    return d;
}

inline double total_fm_loss(const JointDistribution& J) { return mi_loss(J); }

inline double total_sm_loss(double ce, double kd, double div, const LossWeights& w) {
    return ce + w.lambda_kd * kd + w.lambda_div * div;
}

// Entropy of the mean prediction of a batch; collapse diagnostic.
inline double mean_prediction_entropy(const ProbBatch& p) {
    const int N = p.values.rows;
    const int K = p.values.cols;
    double h = 0.0;
    for (int k = 0; k < K; ++k) {
        double mean = 0.0;
        for (int i = 0; i < N; ++i) mean += p.values(i, k);
        mean /= N;
        h -= mean * log_floored(mean);
    }
    return h;
}

}  // namespace fused
