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

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "fused/branch.hpp"
#include "fused/config.hpp"
#include "fused/dataset.hpp"
#include "fused/objectives.hpp"
#include "fused/optimizer.hpp"
#include "fused/prototypes.hpp"
#include "fused/pseudo_label.hpp"

namespace fused {

// Iteration stages in their fixed order. The hook exists so tests can verify
// the order is never shuffled.
enum class Stage { Forward, EmaUpdate, Refine, FmStep, SmStep };
using StageHook = std::function<void(Stage, int epoch, int batch)>;

struct EpochStats {
    double l_mi = 0.0, l_ce = 0.0, l_kd = 0.0, l_div = 0.0;
    double mask_rate = 0.0, agreement_rate = 0.0, pseudo_acc = 0.0;
    int empty_ce_batches = 0;
    double wall_ms = 0.0;  // sidecar only; never part of the canonical report
};

struct RunReport {
    std::string config_hash;
    uint64_t seed = 0;
    std::vector<EpochStats> epochs;
    double final_accuracy = 0.0;
    double final_mask_rate = 0.0;
    double final_mean_pred_entropy = 0.0;
    std::string fm_checkpoint_hash, sm_checkpoint_hash;
    std::string fm_bank_hash, sm_bank_hash;
    int flagged_empty_batches = 0;
};

namespace engine_detail {

inline void check_finite(double loss, const char* which, int epoch, int batch) {
    if (!std::isfinite(loss))
        throw std::runtime_error(std::string("non-finite ") + which + " loss at epoch " +
                                 std::to_string(epoch) + " batch " + std::to_string(batch));
}

inline std::vector<std::vector<int>> make_batches(int n, int batch_size, Rng& rng) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    std::vector<std::vector<int>> batches;
    for (int s = 0; s < n; s += batch_size) {
        const int e = std::min(s + batch_size, n);
        batches.emplace_back(idx.begin() + s, idx.begin() + e);
    }
    return batches;
}

}  // namespace engine_detail

inline double evaluate_accuracy(Branch& br, const Mat& X, const std::vector<int32_t>& labels) {
    Mat feats = br.encode(X);
    ProbBatch p = br.linear_view(feats);
    auto pred = predicted_label(p);
    double hits = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i] ? 1.0 : 0.0;
    return labels.empty() ? 0.0 : hits / labels.size();
}

// Phase 1: both branches minimize labeled cross-entropy independently.
// Returns {fm, sm} final source accuracies. Prototype banks are initialized
// by the caller via init_from_classifier afterwards.
inline std::pair<double, double> pretrain_source(Branch& fm, Branch& sm, const CohortDataset& source,
                                                 const AdaptationConfig& cfg) {
    if (source.num_samples() == 0) throw std::invalid_argument("pretrain_source: empty source set");
    set_phase_freezing(fm, sm, Phase::Pretrain);
    const Mat X = cohort_to_matrix(source);
    std::vector<int> labels(source.labels.begin(), source.labels.end());

    auto train_branch = [&](Branch& br, uint64_t stream) {
        Adam opt(br.trainable_params());
        Rng rng(derive_seed(cfg.seed, stream));
        const int n = X.rows;
        const int nbatch = (n + cfg.batch_size - 1) / cfg.batch_size;
        const long total_steps = static_cast<long>(cfg.pretrain_epochs) * nbatch;
        long step = 0;
        for (int epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
            auto batches = engine_detail::make_batches(n, cfg.batch_size, rng);
            for (size_t b = 0; b < batches.size(); ++b) {
                Mat Xb = rows_of(X, batches[b]);
                std::vector<int> yb(batches[b].size());
                for (size_t i = 0; i < batches[b].size(); ++i) yb[i] = labels[batches[b][i]];
                Mat feats = br.encode(Xb, true);
                ProbBatch p = br.linear_view(feats, true);
                const double loss = source_ce(p, yb);
                engine_detail::check_finite(loss, "source-ce", epoch, static_cast<int>(b));
                Mat dp = source_ce_grad(p, yb);
                Mat dlogits = softmax_backward(p.values, dp);
                br.zero_grads();
                Mat dfeats = br.classifier().backward(dlogits);
                br.encoder().backward(dfeats);
                opt.step(lr_at(step, total_steps, cfg.effective_pretrain_lr0(), cfg.decay_power,
                               cfg.lr_schedule));
                ++step;
            }
        }
        return evaluate_accuracy(br, X, source.labels);
    };

    const double acc_fm = train_branch(fm, 11);
    const double acc_sm = train_branch(sm, 12);
    return {acc_fm, acc_sm};
}

struct SourceOnlyEval {
    double accuracy = 0.0;
    double mask_rate = 0.0;
};

// Evaluation of the pretrained pair on the target without any adaptation.
inline SourceOnlyEval evaluate_source_only(Branch& fm, Branch& sm, const PrototypeBank& bank_fm,
                                           const PrototypeBank& bank_sm, const CohortDataset& target) {
    const Mat X = cohort_to_matrix(target);
    SourceOnlyEval out;
    out.accuracy = evaluate_accuracy(sm, X, target.labels);
    RefinementBundle bundle = build_bundle(fm, sm, bank_fm, bank_sm, X);
    out.mask_rate = bundle.mask_rate();
    return out;
}

// ---------------------------------------------------------------------------
// Phase 2: calibrate-then-distill. Per batch the order is fixed:
// forward -> EMA -> refinement -> FM step (MI) -> SM step (CE+KD+Div).
// The FM backbone is frozen, so its features are computed once up front; the
// distillation teacher is re-read from the FM classifier after its
// calibration step each iteration.
// ---------------------------------------------------------------------------
inline RunReport adapt_target(Branch& fm, Branch& sm, PrototypeBank& bank_fm, PrototypeBank& bank_sm,
                              const CohortDataset& target, const AdaptationConfig& cfg,
                              const StageHook& hook = nullptr) {
    if (target.num_samples() == 0) throw std::invalid_argument("adapt_target: empty target set");
    set_phase_freezing(fm, sm, Phase::Adapt);
    bank_fm.momentum = cfg.momentum;
    bank_fm.margin_threshold = cfg.margin_threshold;
    bank_fm.temperature = cfg.temperature;
    bank_sm.momentum = cfg.momentum;
    bank_sm.margin_threshold = cfg.margin_threshold;
    bank_sm.temperature = cfg.temperature;

    const Mat X = cohort_to_matrix(target);
    const int n = X.rows;
    std::vector<int> truth(target.labels.begin(), target.labels.end());

    // FM backbone frozen: features are constant for the whole run.
    const Mat fm_feats_all = fm.encode(X);

    Adam fm_opt(fm.trainable_params());
    Adam sm_opt(sm.trainable_params());
    Rng shuffle_rng(derive_seed(cfg.seed, 21));

    const int nbatch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = static_cast<long>(cfg.epochs) * nbatch;
    long step = 0;

    RunReport report;
    report.config_hash = config_hash(cfg);
    report.seed = cfg.seed;

    auto select_labels = [&](const RefinementBundle& b) -> const std::vector<int>& {
        switch (cfg.pseudo_label_variant) {
            case PseudoLabelVariant::FmProto: return b.labels_fm_proto;
            case PseudoLabelVariant::FmLinear: return b.labels_fm_linear;
            case PseudoLabelVariant::SmProto: return b.labels_sm_proto;
            case PseudoLabelVariant::SmLinear: return b.labels_sm_linear;
            default: return b.refined;
        }
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochStats es;
        double weight_sum = 0.0;

        if (cfg.ema_cadence == EmaCadence::Epoch) {
            ProbBatch p_fm_all = fm.linear_view(fm_feats_all);
            Mat sm_feats_all = sm.encode(X);
            ProbBatch p_sm_all = sm.linear_view(sm_feats_all);
            if (cfg.ema_update_fm_during_adapt)
                ema_update(bank_fm, fm_feats_all, predicted_label(p_fm_all), margin(p_fm_all));
            ema_update(bank_sm, sm_feats_all, predicted_label(p_sm_all), margin(p_sm_all));
            if (hook) hook(Stage::EmaUpdate, epoch, -1);
        }

        if (cfg.use_mi && cfg.mi_scope == MiScope::Dataset) {
            // one calibration step per epoch from the full-dataset joint
            ProbBatch p_fm_all = fm.linear_view(fm_feats_all, true);
            Mat sm_feats_all = sm.encode(X);
            ProbBatch p_sm_all = sm.linear_view(sm_feats_all);
            JointDistribution J = joint_distribution(p_fm_all, p_sm_all);
            const double l_mi = mi_loss(J);
            engine_detail::check_finite(l_mi, "mi", epoch, -1);
            Mat dp = mi_loss_grad_fm_probs(J, p_sm_all.values);
            Mat dlogits = softmax_backward(p_fm_all.values, dp);
            fm.zero_grads();
            fm.classifier().backward(dlogits);
            fm_opt.step(lr_at(step, total_steps, cfg.effective_fm_lr0(), cfg.decay_power, cfg.lr_schedule));
            es.l_mi += l_mi * n;  // counted once per epoch over the full set
        }

        auto batches = engine_detail::make_batches(n, cfg.batch_size, shuffle_rng);
        for (size_t b = 0; b < batches.size(); ++b) {
            const auto& idx = batches[b];
            const int bn = static_cast<int>(idx.size());
            Mat Xb = rows_of(X, idx);
            Mat fm_feats = rows_of(fm_feats_all, idx);

            // forward both branches
            Mat sm_feats = sm.encode(Xb, true);
            ProbBatch p_fm = fm.linear_view(fm_feats, true);
            ProbBatch p_sm = sm.linear_view(sm_feats, true);
            if (hook) hook(Stage::Forward, epoch, static_cast<int>(b));

            // EMA prototype refinement
            if (cfg.ema_cadence == EmaCadence::Batch) {
                if (cfg.ema_update_fm_during_adapt)
                    ema_update(bank_fm, fm_feats, predicted_label(p_fm), margin(p_fm));
                ema_update(bank_sm, sm_feats, predicted_label(p_sm), margin(p_sm));
                if (hook) hook(Stage::EmaUpdate, epoch, static_cast<int>(b));
            }

            // consensus mask + two-stage refinement
            RefinementBundle bundle =
                build_bundle_from_views(fm_feats, p_fm, sm_feats, p_sm, bank_fm, bank_sm);
            std::vector<int> refined = select_labels(bundle);
            if (cfg.inject_oracle_labels)
                for (int i = 0; i < bn; ++i) refined[i] = truth[idx[i]];
            if (hook) hook(Stage::Refine, epoch, static_cast<int>(b));

            // FM calibration step
            const double lr_now_fm =
                lr_at(step, total_steps, cfg.effective_fm_lr0(), cfg.decay_power, cfg.lr_schedule);
            if (cfg.use_mi && cfg.mi_scope == MiScope::Batch) {
                JointDistribution J = joint_distribution(p_fm, p_sm);
                const double l_mi = mi_loss(J);
                engine_detail::check_finite(l_mi, "mi", epoch, static_cast<int>(b));
                Mat dp = mi_loss_grad_fm_probs(J, p_sm.values);
                if (!cfg.kd_detach_teacher && cfg.use_kd) {
                    Mat dteach = kd_grad_teacher(p_fm, p_sm);
                    for (size_t i = 0; i < dp.v.size(); ++i) dp.v[i] += cfg.weights.lambda_kd * dteach.v[i];
                }
                Mat dlogits = softmax_backward(p_fm.values, dp);
                fm.zero_grads();
                fm.classifier().backward(dlogits);
                fm_opt.step(lr_now_fm);
                es.l_mi += l_mi * bn;
            }
            if (hook) hook(Stage::FmStep, epoch, static_cast<int>(b));

            // distill the calibrated teacher
            ProbBatch p_teacher = fm.linear_view(fm_feats);

            double l_ce = 0.0, l_kd = 0.0, l_div = 0.0;
            Mat dp_sm(bn, p_sm.values.cols);
            bool any_sm_loss = false;
            std::vector<uint8_t> mask_eff =
                cfg.use_consensus_mask ? bundle.mask : std::vector<uint8_t>(bn, 1);
            if (cfg.use_ce) {
                bool empty = false;
                l_ce = masked_ce(p_sm, refined, mask_eff, &empty);
                if (empty) ++es.empty_ce_batches;
                Mat d = masked_ce_grad(p_sm, refined, mask_eff);
                for (size_t i = 0; i < dp_sm.v.size(); ++i) dp_sm.v[i] += d.v[i];
                any_sm_loss = true;
            }
            if (cfg.use_kd) {
                l_kd = kd_loss(p_teacher, p_sm);
                Mat d = kd_grad_student(p_teacher, p_sm);
                for (size_t i = 0; i < dp_sm.v.size(); ++i) dp_sm.v[i] += cfg.weights.lambda_kd * d.v[i];
                any_sm_loss = true;
            }
            if (cfg.use_div) {
                l_div = div_loss(p_sm);
                Mat d = div_grad(p_sm);
                for (size_t i = 0; i < dp_sm.v.size(); ++i) dp_sm.v[i] += cfg.weights.lambda_div * d.v[i];
                any_sm_loss = true;
            }
            const double l_sm = total_sm_loss(l_ce, l_kd, l_div, cfg.weights);
            engine_detail::check_finite(l_sm, "sm", epoch, static_cast<int>(b));
            if (any_sm_loss) {
                Mat dlogits = softmax_backward(p_sm.values, dp_sm);
                sm.zero_grads();
                Mat dfeats = sm.classifier().backward(dlogits);
                sm.encoder().backward(dfeats);
                sm_opt.step(lr_at(step, total_steps, cfg.effective_sm_lr0(), cfg.decay_power,
                                  cfg.lr_schedule));
            }
            if (hook) hook(Stage::SmStep, epoch, static_cast<int>(b));

            es.l_ce += l_ce * bn;
            es.l_kd += l_kd * bn;
            es.l_div += l_div * bn;
            es.mask_rate += bundle.mask_rate() * bn;
            es.agreement_rate += bundle.agreement_rate() * bn;
            double acc = 0.0;
            for (int i = 0; i < bn; ++i) acc += bundle.refined[i] == truth[idx[i]] ? 1.0 : 0.0;
            es.pseudo_acc += acc;
            weight_sum += bn;
            ++step;
        }

        es.l_mi /= weight_sum;
        es.l_ce /= weight_sum;
        es.l_kd /= weight_sum;
        es.l_div /= weight_sum;
        es.mask_rate /= weight_sum;
        es.agreement_rate /= weight_sum;
        es.pseudo_acc /= weight_sum;
        es.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        report.flagged_empty_batches += es.empty_ce_batches;
        report.epochs.push_back(es);
    }

    // final transductive evaluation
    {
        Mat sm_feats_all = sm.encode(X);
        ProbBatch p_sm_all = sm.linear_view(sm_feats_all);
        auto pred = predicted_label(p_sm_all);
        double hits = 0.0;
        for (int i = 0; i < n; ++i) hits += pred[i] == truth[i] ? 1.0 : 0.0;
        report.final_accuracy = hits / n;
        report.final_mean_pred_entropy = mean_prediction_entropy(p_sm_all);
        ProbBatch p_fm_all = fm.linear_view(fm_feats_all);
        RefinementBundle bundle =
            build_bundle_from_views(fm_feats_all, p_fm_all, sm_feats_all, p_sm_all, bank_fm, bank_sm);
        report.final_mask_rate = bundle.mask_rate();
    }
    report.fm_checkpoint_hash = hash_string_hex(serialize_branch(fm));
    report.sm_checkpoint_hash = hash_string_hex(serialize_branch(sm));
    report.fm_bank_hash = hash_string_hex(serialize_bank(bank_fm));
    report.sm_bank_hash = hash_string_hex(serialize_bank(bank_sm));
    return report;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification.
// ---------------------------------------------------------------------------
enum class LossSelector { SourceCE, FmCalibration, SmComposite };

struct GradCheckAux {
    std::vector<int> labels;
    std::vector<uint8_t> mask;
    Mat partner_probs;  // the SM side of the joint, held constant
    Mat teacher_probs;  // the FM side of distillation, held constant
    LossWeights weights;
};

inline GradCheckAux make_gradcheck_aux(int n, int k, uint64_t seed) {
    GradCheckAux aux;
    Rng rng(derive_seed(seed, 77));
    aux.labels.resize(n);
    aux.mask.resize(n);
    for (int i = 0; i < n; ++i) {
        aux.labels[i] = i % k;
        aux.mask[i] = (i % 3 != 0) ? 1 : 0;
    }
    aux.mask[0] = 1;  // never an empty mask
    Mat a(n, k), b(n, k);
    for (auto& x : a.v) x = rng.gaussian();
    for (auto& x : b.v) x = rng.gaussian();
    aux.partner_probs = softmax_rows(a);
    aux.teacher_probs = softmax_rows(b);
    return aux;
}

namespace engine_detail {

inline double selected_loss(Branch& br, LossSelector sel, const Mat& probe, const GradCheckAux& aux,
                            bool cache) {
    Mat feats = br.encode(probe, cache);
    ProbBatch p = br.linear_view(feats, cache);
    switch (sel) {
        case LossSelector::SourceCE:
            return source_ce(p, aux.labels);
        case LossSelector::FmCalibration: {
            ProbBatch partner{aux.partner_probs, View::Linear, Role::SM};
            return mi_loss(joint_distribution(p, partner));
        }
        default: {
            ProbBatch teacher{aux.teacher_probs, View::Linear, Role::FM};
            const double ce = masked_ce(p, aux.labels, aux.mask);
            const double kd = kd_loss(teacher, p);
            const double dv = div_loss(p);
            return total_sm_loss(ce, kd, dv, aux.weights);
        }
    }
}

inline Mat selected_loss_grad_probs(const ProbBatch& p, LossSelector sel, const GradCheckAux& aux) {
    switch (sel) {
        case LossSelector::SourceCE:
            return source_ce_grad(p, aux.labels);
        case LossSelector::FmCalibration: {
            ProbBatch partner{aux.partner_probs, View::Linear, Role::SM};
            JointDistribution J = joint_distribution(p, partner);
            return mi_loss_grad_fm_probs(J, aux.partner_probs);
        }
        default: {
            ProbBatch teacher{aux.teacher_probs, View::Linear, Role::FM};
            Mat d = masked_ce_grad(p, aux.labels, aux.mask);
            Mat dk = kd_grad_student(teacher, p);
            Mat dd = div_grad(p);
            for (size_t i = 0; i < d.v.size(); ++i)
                d.v[i] += aux.weights.lambda_kd * dk.v[i] + aux.weights.lambda_div * dd.v[i];
            return d;
        }
    }
}

}  // namespace engine_detail

// Central finite differences (step h) on every trainable scalar parameter of
// the branch vs. the analytic backward pass. Returns the max relative error;
// an empty trainable set returns 0 by convention.
inline double check_gradients(Branch& br, LossSelector sel, const Mat& probe, const GradCheckAux& aux,
                              double h = 1e-5) {
    auto trainable = br.trainable_params();
    if (trainable.empty()) return 0.0;

    // analytic pass
    br.zero_grads();
    {
        Mat feats = br.encode(probe, true);
        ProbBatch p = br.linear_view(feats, true);
        Mat dp = engine_detail::selected_loss_grad_probs(p, sel, aux);
        Mat dlogits = softmax_backward(p.values, dp);
        Mat dfeats = br.classifier().backward(dlogits);
        if (br.encoder_trainable) br.encoder().backward(dfeats);
    }
    std::vector<std::vector<double>> analytic;
    for (auto* t : trainable) {
        for (double g : t->g)
            if (!std::isfinite(g)) throw std::runtime_error("check_gradients: non-finite analytic gradient");
        analytic.push_back(t->g);
    }

    double max_rel = 0.0;
    for (size_t ti = 0; ti < trainable.size(); ++ti) {
        auto* t = trainable[ti];
        for (size_t j = 0; j < t->w.size(); ++j) {
            const double orig = t->w[j];
            t->w[j] = orig + h;
            const double lp = engine_detail::selected_loss(br, sel, probe, aux, false);
            t->w[j] = orig - h;
            const double lm = engine_detail::selected_loss(br, sel, probe, aux, false);
            t->w[j] = orig;
            const double numeric = (lp - lm) / (2.0 * h);
            const double a = analytic[ti][j];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
            max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
        }
    }
    return max_rel;
}

}  // namespace fused
