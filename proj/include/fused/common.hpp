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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace fused {

// Floor applied inside every log in the losses.
inline constexpr double kLogEps = 1e-8;

inline double log_floored(double x) { return std::log(x + kLogEps); }

// Dense row-major matrix of doubles. Small and unfancy on purpose: every
// shape in this toolkit is tiny by deep-learning standards.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}
    Mat(int r, int c, std::vector<double> data) : rows(r), cols(c), v(std::move(data)) {
        if (v.size() != static_cast<size_t>(r) * c)
            throw std::invalid_argument("Mat: data size does not match shape");
    }

    double& operator()(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    double* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }
    size_t size() const { return v.size(); }
    void fill(double x) { std::fill(v.begin(), v.end(), x); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// C = A * B
inline Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dims disagree");
    Mat c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* cr = c.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const double aik = ar[k];
            if (aik == 0.0) continue;
            const double* br = b.row(k);
            for (int j = 0; j < b.cols; ++j) cr[j] += aik * br[j];
        }
    }
    return c;
}

// C = A^T * B
inline Mat matmul_tA(const Mat& a, const Mat& b) {
    if (a.rows != b.rows) throw std::invalid_argument("matmul_tA: row counts disagree");
    Mat c(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k) {
        const double* ar = a.row(k);
        const double* br = b.row(k);
        for (int i = 0; i < a.cols; ++i) {
            const double aki = ar[i];
            if (aki == 0.0) continue;
            double* cr = c.row(i);
            for (int j = 0; j < b.cols; ++j) cr[j] += aki * br[j];
        }
    }
    return c;
}

// C = A * B^T
inline Mat matmul_tB(const Mat& a, const Mat& b) {
    if (a.cols != b.cols) throw std::invalid_argument("matmul_tB: col counts disagree");
    Mat c(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* cr = c.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const double* br = b.row(j);
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += ar[k] * br[k];
            cr[j] = s;
        }
    }
    return c;
}

// Numerically stable row-wise softmax.
inline Mat softmax_rows(const Mat& logits) {
    Mat p(logits.rows, logits.cols);
    for (int i = 0; i < logits.rows; ++i) {
        const double* lr = logits.row(i);
        double* pr = p.row(i);
        double m = lr[0];
        for (int j = 1; j < logits.cols; ++j) m = std::max(m, lr[j]);
        double s = 0.0;
        for (int j = 0; j < logits.cols; ++j) {
            pr[j] = std::exp(lr[j] - m);
            s += pr[j];
        }
        for (int j = 0; j < logits.cols; ++j) pr[j] /= s;
    }
    return p;
}

// dL/dlogits given probs = softmax(logits) and dL/dprobs.
inline Mat softmax_backward(const Mat& probs, const Mat& dprobs) {
    if (!probs.same_shape(dprobs)) throw std::invalid_argument("softmax_backward: shape mismatch");
    Mat dl(probs.rows, probs.cols);
    for (int i = 0; i < probs.rows; ++i) {
        const double* p = probs.row(i);
        const double* g = dprobs.row(i);
        double dot = 0.0;
        for (int j = 0; j < probs.cols; ++j) dot += p[j] * g[j];
        double* d = dl.row(i);
        for (int j = 0; j < probs.cols; ++j) d[j] = p[j] * (g[j] - dot);
    }
    return dl;
}

// Argmax with ties broken by lowest index.
inline int argmax_row(const double* p, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j)
        if (p[j] > p[best]) best = j;
    return best;
}

inline double l2_norm(const double* p, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += p[i] * p[i];
    return std::sqrt(s);
}

// Canonical float formatting used by every serialized artifact so that
// identical doubles always produce identical bytes.
inline std::string fmt_double(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

inline std::string fmt_double_short(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", x);
    return buf;
}

}  // namespace fused
