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

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "fused/fused.hpp"

namespace fs = std::filesystem;
using namespace fused;

namespace {

ExperimentSpec load_spec_or_default(const std::string& config_path) {
    if (config_path.empty()) return ExperimentSpec{};
    return parse_config_file(config_path);
}

Fold fold_of(const CohortDataset& cohort, const ExperimentSpec& spec, int fold_index) {
    SplitPlan plan =
        spec.split_scheme == "loso" ? loso_splits(cohort) : logo_splits(cohort, spec.group_size);
    if (fold_index < 0 || fold_index >= static_cast<int>(plan.folds.size()))
        throw std::runtime_error("fold index " + std::to_string(fold_index) + " out of range, plan has " +
                                 std::to_string(plan.folds.size()) + " folds");
    return plan.folds[fold_index];
}

int cmd_gen_data(const std::string& out, int subjects, int trials, int channels, int timepoints,
                 int classes, double severity, double jitter, double noise, uint64_t seed, double rate) {
    ShiftSpec spec{severity, jitter, noise, seed};
    CohortDataset d =
        generate_cohort(subjects, trials, channels, timepoints, classes, spec, static_cast<float>(rate));
    save_dataset(d, out);
    std::printf("wrote %s: N=%d C=%d T=%d K=%d rate=%g\n", out.c_str(), d.num_samples(), d.C, d.T, d.K,
                static_cast<double>(d.sampling_rate));
    return 0;
}

int cmd_preprocess(const std::string& in, const std::string& out, const std::string& ops) {
    CohortDataset d = load_dataset(in);
    CohortDataset p = preprocess(d, parse_pipeline(ops));
    save_dataset(p, out);
    std::printf("wrote %s: N=%d C=%d T=%d rate=%g\n", out.c_str(), p.num_samples(), p.C, p.T,
                static_cast<double>(p.sampling_rate));
    return 0;
}

int cmd_pretrain(const std::string& config, const std::string& data, int fold_index,
                 const std::string& out_dir) {
    ExperimentSpec spec = load_spec_or_default(config);
    CohortDataset cohort = data.empty() ? materialize_cohort(spec.data) : load_dataset(data);
    Fold fold = fold_of(cohort, spec, fold_index);
    CohortDataset source = subset_by_subjects(cohort, fold.source_subjects);
    CohortDataset target = subset_by_subjects(cohort, fold.target_subjects);

    AdaptationConfig cfg = spec.base;
    Branch fm = make_fm_branch(cfg, cohort.C, cohort.T, cohort.K, derive_seed(cfg.seed, 300));
    Branch sm = make_sm_branch(cfg, cohort.C, cohort.T, cohort.K, derive_seed(cfg.seed, 301));
    auto [acc_fm, acc_sm] = pretrain_source(fm, sm, source, cfg);

    PrototypeBank bfm = init_from_classifier(fm, cfg.momentum, cfg.margin_threshold, cfg.temperature);
    PrototypeBank bsm = init_from_classifier(sm, cfg.momentum, cfg.margin_threshold, cfg.temperature);
    SourceOnlyEval so = evaluate_source_only(fm, sm, bfm, bsm, target);

    fs::create_directories(out_dir);
    const std::string h_fm = save_branch_checkpoint(fm, out_dir + "/fm.ckpt");
    const std::string h_sm = save_branch_checkpoint(sm, out_dir + "/sm.ckpt");
    save_bank(bfm, out_dir + "/fm_bank.bin");
    save_bank(bsm, out_dir + "/sm_bank.bin");
    write_text_file(out_dir + "/resolved.cfg", experiment_spec_text(spec));
    std::printf("source acc: fm=%.4f sm=%.4f; target source-only acc=%.4f mask_rate=%.4f\n", acc_fm,
                acc_sm, so.accuracy, so.mask_rate);
    std::printf("checkpoints: fm=%s sm=%s\n", h_fm.c_str(), h_sm.c_str());
    return 0;
}

int cmd_adapt(const std::string& config, const std::string& data, int fold_index, const std::string& fm_path,
              const std::string& sm_path, const std::string& out_dir) {
    ExperimentSpec spec = load_spec_or_default(config);
    CohortDataset cohort = data.empty() ? materialize_cohort(spec.data) : load_dataset(data);
    Fold fold = fold_of(cohort, spec, fold_index);
    CohortDataset target = subset_by_subjects(cohort, fold.target_subjects);

    AdaptationConfig cfg = spec.base;
    Branch fm = load_branch_checkpoint(fm_path);
    Branch sm = load_branch_checkpoint(sm_path);
    PrototypeBank bfm = init_from_classifier(fm, cfg.momentum, cfg.margin_threshold, cfg.temperature);
    PrototypeBank bsm = init_from_classifier(sm, cfg.momentum, cfg.margin_threshold, cfg.temperature);

    RunReport rep = adapt_target(fm, sm, bfm, bsm, target, cfg);

    fs::create_directories(out_dir);
    write_text_file(out_dir + "/report.txt", run_report_text(rep));
    write_text_file(out_dir + "/report.csv", run_report_csv(rep));
    write_text_file(out_dir + "/loss_trace.csv", loss_trace_csv(rep));
    write_text_file(out_dir + "/diagnostics.csv", diagnostics_csv(rep));
    write_text_file(out_dir + "/timing.csv", timing_csv(rep));
    write_centroids_csv(bfm, out_dir + "/prototypes_fm.csv");
    write_centroids_csv(bsm, out_dir + "/prototypes_sm.csv");
    save_branch_checkpoint(fm, out_dir + "/fm.ckpt");
    save_branch_checkpoint(sm, out_dir + "/sm.ckpt");
    save_bank(bfm, out_dir + "/fm_bank.bin");
    save_bank(bsm, out_dir + "/sm_bank.bin");
    write_text_file(out_dir + "/resolved.cfg", experiment_spec_text(spec));
    std::printf("final accuracy=%.4f mask_rate=%.4f report=%s/report.txt\n", rep.final_accuracy,
                rep.final_mask_rate, out_dir.c_str());
    return 0;
}

int cmd_run(const std::string& config, const std::string& out_override, int jobs_override,
            bool save_checkpoints, bool standard_grids) {
    ExperimentSpec spec = load_spec_or_default(config);
    if (!out_override.empty()) spec.output_dir = out_override;
    if (jobs_override > 0) spec.jobs = jobs_override;
    RunOptions opts;
    opts.save_checkpoints = save_checkpoints;
    opts.with_standard_grids = standard_grids;
    ExperimentResult res = run_experiment(spec, opts);
    std::printf("%s", summary_text(res.table).c_str());
    if (!res.failures.empty()) {
        for (const auto& f : res.failures)
            std::fprintf(stderr, "FAILED fold %d seed %llu: %s\n", f.fold,
                         static_cast<unsigned long long>(f.seed), f.message.c_str());
        return 1;
    }
    std::printf("results: %s/results.csv\n", res.output_dir.c_str());
    return 0;
}

int cmd_export_features(const std::string& checkpoint, const std::string& data, const std::string& out) {
    Branch br = load_branch_checkpoint(checkpoint);
    CohortDataset d = load_dataset(data);
    export_features(br, d, out);
    std::printf("wrote %s: %d rows, %d feature dims\n", out.c_str(), d.num_samples(), br.feature_dim());
    return 0;
}

// ---------------------------------------------------------------------------
// verify: oracle and gradient self-checks, one line each, nonzero on failure.
// ---------------------------------------------------------------------------
int cmd_verify() {
    int failures = 0;
    auto check = [&](const char* name, bool ok) {
        std::printf("[%s] %s\n", ok ? "ok" : "FAIL", name);
        if (!ok) ++failures;
    };

    // losses vs scalar oracles on random prob batches
    {
        Rng rng(123);
        bool mi_ok = true, kd_ok = true, div_ok = true, ce_ok = true;
        for (int rep = 0; rep < 20; ++rep) {
            const int n = 2 + static_cast<int>(rng.below(30));
            const int k = 2 + static_cast<int>(rng.below(6));
            Mat a(n, k), b(n, k);
            for (auto& x : a.v) x = rng.gaussian();
            for (auto& x : b.v) x = rng.gaussian();
            ProbBatch pf{softmax_rows(a), View::Linear, Role::FM};
            ProbBatch ps{softmax_rows(b), View::Linear, Role::SM};

            JointDistribution J = joint_distribution(pf, ps);
            double hp = 0.0, hf = 0.0, hs = 0.0;
            for (int j = 0; j < k; ++j) {
                hf -= J.marginal_fm[j] * log_floored(J.marginal_fm[j]);
                hs -= J.marginal_sm[j] * log_floored(J.marginal_sm[j]);
                for (int kk = 0; kk < k; ++kk) hp -= J.P(j, kk) * log_floored(J.P(j, kk));
            }
            if (std::abs(mi_loss(J) - (-(hf + hs - hp))) > 1e-9) mi_ok = false;

            double kd_ref = 0.0;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < k; ++j)
                    kd_ref += pf.values(i, j) * (log_floored(pf.values(i, j)) - log_floored(ps.values(i, j)));
            kd_ref /= n;
            if (std::abs(kd_loss(pf, ps) - kd_ref) > 1e-10) kd_ok = false;

            double div_ref = 0.0;
            for (int j = 0; j < k; ++j) {
                double m = 0.0;
                for (int i = 0; i < n; ++i) m += ps.values(i, j);
                m /= n;
                div_ref += m * log_floored(m);
            }
            if (std::abs(div_loss(ps) - div_ref) > 1e-12) div_ok = false;

            std::vector<int> labels(n);
            std::vector<uint8_t> mask(n);
            for (int i = 0; i < n; ++i) {
                labels[i] = static_cast<int>(rng.below(k));
                mask[i] = rng.uniform() < 0.7 ? 1 : 0;
            }
            double msum = 0.0, ce_ref = 0.0;
            for (int i = 0; i < n; ++i)
                if (mask[i]) {
                    ce_ref -= log_floored(ps.values(i, labels[i]));
                    msum += 1.0;
                }
            ce_ref = msum > 0.0 ? ce_ref / msum : 0.0;
            if (std::abs(masked_ce(ps, labels, mask) - ce_ref) > 1e-12) ce_ok = false;
        }
        check("mi_loss entropy identity (20 random joints, 1e-9)", mi_ok);
        check("kd_loss scalar oracle (1e-10)", kd_ok);
        check("div_loss scalar oracle (1e-12)", div_ok);
        check("masked_ce scalar oracle (1e-12)", ce_ok);
    }

    // gradient checks on small toy branches
    {
        AdaptationConfig cfg;
        cfg.fm_hidden1 = 8;
        cfg.fm_hidden2 = 8;
        cfg.fm_feature_dim = 10;
        cfg.sm_filters = 2;
        cfg.sm_kernel = 5;
        cfg.sm_pool = 4;
        cfg.sm_feature_dim = 8;
        const int C = 3, T = 32, K = 3, N = 6;
        Branch fm = make_fm_branch(cfg, C, T, K, 42);
        Branch sm = make_sm_branch(cfg, C, T, K, 43);
        Rng rng(7);
        Mat probe(N, C * T);
        for (auto& x : probe.v) x = rng.gaussian();
        GradCheckAux aux = make_gradcheck_aux(N, K, 5);

        set_phase_freezing(fm, sm, Phase::Pretrain);
        const double e1 = check_gradients(fm, LossSelector::SourceCE, probe, aux);
        const double e2 = check_gradients(sm, LossSelector::SourceCE, probe, aux);
        set_phase_freezing(fm, sm, Phase::Adapt);
        const double e3 = check_gradients(fm, LossSelector::FmCalibration, probe, aux);
        const double e4 = check_gradients(sm, LossSelector::SmComposite, probe, aux);
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "gradient checks < 1e-4 (source_ce %.2e/%.2e, mi %.2e, composite %.2e)", e1, e2, e3,
                      e4);
        check(buf, e1 < 1e-4 && e2 < 1e-4 && e3 < 1e-4 && e4 < 1e-4);
    }

    // refinement vs brute force
    {
        Rng rng(99);
        bool ok = true;
        for (int rep = 0; rep < 2000 && ok; ++rep) {
            const int k = 2 + static_cast<int>(rng.below(6));
            std::vector<int> fm_lin{static_cast<int>(rng.below(k))}, sm_lin{static_cast<int>(rng.below(k))};
            Mat sf(1, k), ssm(1, k);
            for (auto& x : sf.v) x = rng.uniform(-1.0, 1.0);
            for (auto& x : ssm.v) x = rng.uniform(-1.0, 1.0);
            if (rng.uniform() < 0.3) ssm.v[static_cast<size_t>(rng.below(k))] = sf.v[static_cast<size_t>(rng.below(k))];
            auto [refined, stage] = refine_labels(fm_lin, sm_lin, sf, ssm);
            int expect;
            if (fm_lin[0] == sm_lin[0]) expect = fm_lin[0];
            else {
                expect = 0;
                double best = -2.0;
                for (int kk = 0; kk < k; ++kk)
                    for (double s : {sf.v[kk], ssm.v[kk]})
                        if (s > best) {
                            best = s;
                            expect = kk;
                        }
            }
            if (refined[0] != expect) ok = false;
        }
        check("two-stage refinement vs brute-force scan (2000 cases)", ok);
    }

    // schedule closed form
    {
        const double end = lr_at(1000, 1000, 1.0);
        bool mono = true;
        double prev = 1e30;
        for (int s = 0; s <= 1000; s += 50) {
            const double lr = lr_at(s, 1000, 1.0);
            if (lr > prev + 1e-15) mono = false;
            prev = lr;
        }
        check("lr schedule endpoint 11^-0.75 and monotone",
              std::abs(end - std::pow(11.0, -0.75)) < 1e-12 && mono);
    }

    // dataset round-trip
    {
        ShiftSpec s{0.3, 0.1, 0.5, 11};
        CohortDataset d = generate_cohort(3, 2, 4, 32, 2, s);
        const std::string tmp = (fs::temp_directory_path() / "fused_verify.fusd").string();
        save_dataset(d, tmp);
        CohortDataset d2 = load_dataset(tmp);
        const bool ok = d2.samples == d.samples && d2.labels == d.labels && d2.subjects == d.subjects &&
                        d2.C == d.C && d2.T == d.T && d2.K == d.K;
        fs::remove(tmp);
        check("dataset save/load round-trip bitwise", ok);
    }

    std::printf("%s\n", failures == 0 ? "all self-checks passed" : "SELF-CHECKS FAILED");
    return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fused: dual-branch source-free domain adaptation toolkit"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-subject cohort");
    std::string gen_out = "cohort.fusd";
    int gen_subjects = 8, gen_trials = 24, gen_channels = 8, gen_timepoints = 256, gen_classes = 4;
    double gen_severity = 0.5, gen_jitter = 0.1, gen_noise = 1.0, gen_rate = 128.0;
    uint64_t gen_seed = 7;
    gen->add_option("--out", gen_out, "output dataset path");
    gen->add_option("--subjects", gen_subjects);
    gen->add_option("--trials-per-class", gen_trials);
    gen->add_option("--channels", gen_channels);
    gen->add_option("--timepoints", gen_timepoints);
    gen->add_option("--classes", gen_classes);
    gen->add_option("--severity", gen_severity, "off-diagonal channel-mixing mass");
    gen->add_option("--jitter", gen_jitter, "per-trial amplitude jitter");
    gen->add_option("--noise", gen_noise, "additive noise sigma");
    gen->add_option("--seed", gen_seed);
    gen->add_option("--rate", gen_rate, "sampling rate in Hz");

    // preprocess
    auto* pre = app.add_subcommand("preprocess", "apply a preprocessing pipeline");
    std::string pre_in, pre_out, pre_ops;
    pre->add_option("--in", pre_in)->required();
    pre->add_option("--out", pre_out)->required();
    pre->add_option("--ops", pre_ops,
                    "e.g. \"bandpass(0.3,50)|resample(200)|window(2,2)|channel_select(0,1)|zscore\"")
        ->required();

    // pretrain
    auto* pt = app.add_subcommand("pretrain", "phase 1: source pretraining for one fold");
    std::string pt_config, pt_data, pt_out = "pretrain_out";
    int pt_fold = 0;
    pt->add_option("--config", pt_config, "experiment config file");
    pt->add_option("--data", pt_data, "dataset path (overrides config)");
    pt->add_option("--fold", pt_fold, "fold index in the split plan");
    pt->add_option("--out", pt_out);

    // adapt
    auto* ad = app.add_subcommand("adapt", "phase 2: source-free adaptation for one fold");
    std::string ad_config, ad_data, ad_fm, ad_sm, ad_out = "adapt_out";
    int ad_fold = 0;
    ad->add_option("--config", ad_config);
    ad->add_option("--data", ad_data);
    ad->add_option("--fold", ad_fold);
    ad->add_option("--fm", ad_fm, "pretrained FM checkpoint")->required();
    ad->add_option("--sm", ad_sm, "pretrained SM checkpoint")->required();
    ad->add_option("--out", ad_out);

    // run
    auto* run = app.add_subcommand("run", "full experiment: folds x seeds x grid");
    std::string run_config, run_out;
    int run_jobs = 0;
    bool run_save = false;
    run->add_option("--config", run_config)->required();
    run->add_option("--out", run_out, "override exp.output_dir");
    run->add_option("--jobs", run_jobs, "parallel fold workers");
    run->add_flag("--save-checkpoints", run_save);

    // ablate
    auto* ab = app.add_subcommand("ablate", "run with the standard ablation and variant grids");
    std::string ab_config, ab_out;
    int ab_jobs = 0;
    bool ab_save = false;
    ab->add_option("--config", ab_config)->required();
    ab->add_option("--out", ab_out);
    ab->add_option("--jobs", ab_jobs);
    ab->add_flag("--save-checkpoints", ab_save);

    // export-features
    auto* ex = app.add_subcommand("export-features", "dump encoder features to CSV");
    std::string ex_ckpt, ex_data, ex_out = "features.csv";
    ex->add_option("--checkpoint", ex_ckpt)->required();
    ex->add_option("--data", ex_data)->required();
    ex->add_option("--out", ex_out);

    // verify
    app.add_subcommand("verify", "run the gradient/oracle self-checks");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed())
            return cmd_gen_data(gen_out, gen_subjects, gen_trials, gen_channels, gen_timepoints, gen_classes,
                                gen_severity, gen_jitter, gen_noise, gen_seed, gen_rate);
        if (pre->parsed()) return cmd_preprocess(pre_in, pre_out, pre_ops);
        if (pt->parsed()) return cmd_pretrain(pt_config, pt_data, pt_fold, pt_out);
        if (ad->parsed()) return cmd_adapt(ad_config, ad_data, ad_fold, ad_fm, ad_sm, ad_out);
        if (run->parsed()) return cmd_run(run_config, run_out, run_jobs, run_save, false);
        if (ab->parsed()) return cmd_run(ab_config, ab_out, ab_jobs, ab_save, true);
        if (ex->parsed()) return cmd_export_features(ex_ckpt, ex_data, ex_out);
        return cmd_verify();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
