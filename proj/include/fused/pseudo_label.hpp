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

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "fused/branch.hpp"
#include "fused/common.hpp"
#include "fused/prototypes.hpp"

namespace fused {

enum class RefineStage : uint8_t { Agreement = 0, Arbitration = 1 };

// Everything the adaptation step needs to know about one batch's labels.
struct RefinementBundle {
    std::vector<int> labels_fm_linear, labels_fm_proto, labels_sm_linear, labels_sm_proto;
    Mat sims_fm, sims_sm;  // N x K cosine similarities
    std::vector<uint8_t> mask;
    std::vector<int> refined;
    std::vector<RefineStage> stage_used;

    double mask_rate() const {
        if (mask.empty()) return 0.0;
        double s = 0.0;
        for (auto m : mask) s += m;
        return s / mask.size();
    }
    double agreement_rate() const {
        if (stage_used.empty()) return 0.0;
        double s = 0.0;
        for (auto st : stage_used) s += (st == RefineStage::Agreement) ? 1.0 : 0.0;
        return s / stage_used.size();
    }
};

// 1 where the FM's linear and prototype views predict the same class.
inline std::vector<uint8_t> consensus_mask(const std::vector<int>& fm_linear_labels,
                                           const std::vector<int>& fm_proto_labels) {
    if (fm_linear_labels.size() != fm_proto_labels.size())
        throw std::invalid_argument("consensus_mask: length mismatch");
    std::vector<uint8_t> out(fm_linear_labels.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = fm_linear_labels[i] == fm_proto_labels[i] ? 1 : 0;
    return out;
}

// Stage 1 adopts cross-branch linear agreement; stage 2 arbitrates by the
// highest prototype similarity across both branches, ties to the lowest class.
inline std::pair<std::vector<int>, std::vector<RefineStage>> refine_labels(
    const std::vector<int>& fm_linear, const std::vector<int>& sm_linear, const Mat& sims_fm,
    const Mat& sims_sm) {
    const size_t N = fm_linear.size();
    if (sm_linear.size() != N || sims_fm.rows != static_cast<int>(N) || sims_sm.rows != static_cast<int>(N))
        throw std::invalid_argument("refine_labels: length mismatch");
    if (sims_fm.cols != sims_sm.cols) throw std::invalid_argument("refine_labels: class count mismatch");
    const int K = sims_fm.cols;
    std::vector<int> refined(N);
    std::vector<RefineStage> stage(N);
    for (size_t i = 0; i < N; ++i) {
        if (fm_linear[i] == sm_linear[i]) {
            refined[i] = fm_linear[i];
            stage[i] = RefineStage::Agreement;
            continue;
        }
        const double* sf = sims_fm.row(static_cast<int>(i));
        const double* ss = sims_sm.row(static_cast<int>(i));
        int best = 0;
        double best_sim = sf[0] > ss[0] ? sf[0] : ss[0];
        for (int k = 1; k < K; ++k) {
            const double s = sf[k] > ss[k] ? sf[k] : ss[k];
            if (s > best_sim) {
                best_sim = s;
                best = k;
            }
        }
        refined[i] = best;
        stage[i] = RefineStage::Arbitration;
    }
    return {std::move(refined), std::move(stage)};
}

// Assembles the bundle from precomputed per-branch features and linear views.
inline RefinementBundle build_bundle_from_views(const Mat& fm_features, const ProbBatch& p_fm_linear,
                                                const Mat& sm_features, const ProbBatch& p_sm_linear,
                                                const PrototypeBank& bank_fm,
                                                const PrototypeBank& bank_sm) {
    RefinementBundle b;
    b.labels_fm_linear = predicted_label(p_fm_linear);
    b.labels_sm_linear = predicted_label(p_sm_linear);
    b.sims_fm = cosine_similarities(bank_fm, fm_features);
    b.sims_sm = cosine_similarities(bank_sm, sm_features);

    ProbBatch p_fm_proto = prototype_view(bank_fm, fm_features);
    ProbBatch p_sm_proto = prototype_view(bank_sm, sm_features);
    b.labels_fm_proto = predicted_label(p_fm_proto);
    b.labels_sm_proto = predicted_label(p_sm_proto);

    b.mask = consensus_mask(b.labels_fm_linear, b.labels_fm_proto);
    auto refined = refine_labels(b.labels_fm_linear, b.labels_sm_linear, b.sims_fm, b.sims_sm);
    b.refined = std::move(refined.first);
    b.stage_used = std::move(refined.second);
    return b;
}

// Runs both encoders and both views, then fills the bundle.
inline RefinementBundle build_bundle(Branch& fm, Branch& sm, const PrototypeBank& bank_fm,
                                     const PrototypeBank& bank_sm, const Mat& batch) {
    Mat fm_features = fm.encode(batch);
    Mat sm_features = sm.encode(batch);
    ProbBatch p_fm = fm.linear_view(fm_features);
    ProbBatch p_sm = sm.linear_view(sm_features);
    return build_bundle_from_views(fm_features, p_fm, sm_features, p_sm, bank_fm, bank_sm);
}

}  // namespace fused
