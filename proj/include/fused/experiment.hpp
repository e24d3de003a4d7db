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

#include <atomic>
#include <cmath>
#include <filesystem>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fused/config.hpp"
#include "fused/engine.hpp"
#include "fused/preprocess.hpp"
#include "fused/report.hpp"
#include "fused/splits.hpp"

namespace fused {

struct ResultRow {
    std::string config_name, config_hash;
    int fold = 0;
    uint64_t seed = 0;
    double accuracy = 0.0, mask_rate_final = 0.0;
};

struct AggregateRow {
    std::string config_name, config_hash;
    int count = 0;
    double acc_mean = 0.0, acc_std = 0.0, mask_rate_mean = 0.0;
};

struct ResultTable {
    std::vector<ResultRow> rows;
    std::vector<AggregateRow> aggregates;
};

struct UnitFailure {
    int fold = 0;
    uint64_t seed = 0;
    std::string config_name;
    std::string message;
};

struct ExperimentResult {
    ResultTable table;
    std::vector<UnitFailure> failures;
    std::string output_dir;
};

// Table-style single-component-off ablation rows.
inline std::vector<GridEntry> standard_ablation_grid() {
    return {
        {"no_mask", {{"toggle.use_consensus_mask", "false"}}},
        {"no_mask_no_ce", {{"toggle.use_consensus_mask", "false"}, {"toggle.use_ce", "false"}}},
        {"no_mi", {{"toggle.use_mi", "false"}}},
        {"no_kd", {{"toggle.use_kd", "false"}}},
        {"no_div", {{"toggle.use_div", "false"}}},
    };
}

// Single-view pseudo-label variants.
inline std::vector<GridEntry> standard_variant_grid() {
    return {
        {"pl_fm_proto", {{"toggle.pseudo_label_variant", "fm_proto"}}},
        {"pl_fm_linear", {{"toggle.pseudo_label_variant", "fm_linear"}}},
        {"pl_sm_proto", {{"toggle.pseudo_label_variant", "sm_proto"}}},
        {"pl_sm_linear", {{"toggle.pseudo_label_variant", "sm_linear"}}},
    };
}

inline CohortDataset materialize_cohort(const DataSpec& d) {
    CohortDataset cohort;
    if (!d.path.empty()) {
        cohort = load_dataset(d.path);
    } else {
        ShiftSpec spec{d.severity, d.jitter, d.noise, d.seed};
        cohort = generate_cohort(d.subjects, d.trials_per_class, d.channels, d.timepoints, d.classes, spec,
                                 static_cast<float>(d.rate));
    }
    if (!d.preprocess_ops.empty()) cohort = preprocess(cohort, parse_pipeline(d.preprocess_ops));
    return cohort;
}

inline Branch make_fm_branch(const AdaptationConfig& cfg, int C, int T, int K, uint64_t init_seed) {
    Rng rng(init_seed);
    auto enc = std::make_unique<MlpEncoder>(C, T, cfg.fm_hidden1, cfg.fm_hidden2, cfg.fm_feature_dim, rng);
    return Branch(Role::FM, std::move(enc), K, rng);
}

inline Branch make_sm_branch(const AdaptationConfig& cfg, int C, int T, int K, uint64_t init_seed) {
    Rng rng(init_seed);
    auto enc =
        std::make_unique<ConvEncoder>(C, T, cfg.sm_filters, cfg.sm_kernel, cfg.sm_pool, cfg.sm_feature_dim, rng);
    return Branch(Role::SM, std::move(enc), K, rng);
}

// Pretraining depends on these knobs only; grid entries sharing them reuse
// one phase-1 run.
inline std::string pretrain_signature(const AdaptationConfig& c) {
    std::string s;
    s += std::to_string(c.pretrain_epochs) + "|" + fmt_double(c.effective_pretrain_lr0()) + "|";
    s += fmt_double(c.decay_power) + "|" + (c.lr_schedule == LrSchedule::InvPower ? "ip" : "ex") + "|";
    s += std::to_string(c.batch_size) + "|" + std::to_string(c.seed) + "|";
    s += std::to_string(c.fm_hidden1) + "," + std::to_string(c.fm_hidden2) + "," +
         std::to_string(c.fm_feature_dim) + "|";
    s += std::to_string(c.sm_filters) + "," + std::to_string(c.sm_kernel) + "," + std::to_string(c.sm_pool) +
         "," + std::to_string(c.sm_feature_dim);
    return s;
}

inline std::string result_table_csv(const ResultTable& t) {
    std::string out = "kind,config,config_hash,fold,seed,n,accuracy,mask_rate_final,accuracy_std\n";
    for (const auto& r : t.rows)
        out += "row," + r.config_name + "," + r.config_hash + "," + std::to_string(r.fold) + "," +
               std::to_string(r.seed) + ",1," + fmt_double(r.accuracy) + "," +
               fmt_double(r.mask_rate_final) + ",\n";
    for (const auto& a : t.aggregates)
        out += "agg," + a.config_name + "," + a.config_hash + ",-1,-1," + std::to_string(a.count) + "," +
               fmt_double(a.acc_mean) + "," + fmt_double(a.mask_rate_mean) + "," + fmt_double(a.acc_std) +
               "\n";
    return out;
}

inline void compute_aggregates(ResultTable& t) {
    std::map<std::string, std::vector<const ResultRow*>> by_config;
    for (const auto& r : t.rows) by_config[r.config_name].push_back(&r);
    t.aggregates.clear();
    for (const auto& [name, rows] : by_config) {
        AggregateRow a;
        a.config_name = name;
        a.config_hash = rows.front()->config_hash;
        a.count = static_cast<int>(rows.size());
        for (const auto* r : rows) {
            a.acc_mean += r->accuracy;
            a.mask_rate_mean += r->mask_rate_final;
        }
        a.acc_mean /= a.count;
        a.mask_rate_mean /= a.count;
        double var = 0.0;
        for (const auto* r : rows) var += (r->accuracy - a.acc_mean) * (r->accuracy - a.acc_mean);
        a.acc_std = a.count > 1 ? std::sqrt(var / (a.count - 1)) : 0.0;
        t.aggregates.push_back(a);
    }
}

// Recomputes every table number from the RunReports stored on disk and from
// the rows; throws on any disagreement beyond 1e-9.
inline void cross_check_result_table(const ResultTable& t, const std::string& out_dir) {
    namespace fs = std::filesystem;
    for (const auto& r : t.rows) {
        const std::string path = out_dir + "/runs/" + r.config_name + "/fold" + std::to_string(r.fold) +
                                 "_seed" + std::to_string(r.seed) + "/report.txt";
        RunReport rep = parse_run_report_text(read_text_file(path));
        if (std::abs(rep.final_accuracy - r.accuracy) > 1e-9 ||
            std::abs(rep.final_mask_rate - r.mask_rate_final) > 1e-9)
            throw std::runtime_error("result table cross-check failed for " + path);
    }
    ResultTable recomputed = t;
    compute_aggregates(recomputed);
    if (recomputed.aggregates.size() != t.aggregates.size())
        throw std::runtime_error("result table cross-check: aggregate count drifted");
    for (size_t i = 0; i < t.aggregates.size(); ++i) {
        const auto& a = t.aggregates[i];
        const auto& b = recomputed.aggregates[i];
        if (a.config_name != b.config_name || std::abs(a.acc_mean - b.acc_mean) > 1e-9 ||
            std::abs(a.acc_std - b.acc_std) > 1e-9 || std::abs(a.mask_rate_mean - b.mask_rate_mean) > 1e-9)
            throw std::runtime_error("result table cross-check: aggregate mismatch for " + a.config_name);
    }
}

inline std::string summary_text(const ResultTable& t) {
    std::ostringstream os;
    os << "config                  n   acc_mean  acc_std   mask_rate\n";
    for (const auto& a : t.aggregates) {
        os << a.config_name;
        for (size_t i = a.config_name.size(); i < 24; ++i) os << ' ';
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%-3d %9.4f %9.4f %9.4f\n", a.count, a.acc_mean, a.acc_std,
                      a.mask_rate_mean);
        os << buf;
    }
    return os.str();
}

struct RunOptions {
    bool save_checkpoints = false;
    bool with_standard_grids = false;  // append Table-style ablation + variant rows
};

// Executes pretrain + adapt per fold per seed per grid entry, plus the
// source-only baseline for every fold/seed. Partial results survive unit
// failures; the caller decides the exit code from `failures`.
inline ExperimentResult run_experiment(const ExperimentSpec& spec, const RunOptions& opts = {}) {
    namespace fs = std::filesystem;
    ExperimentResult result;
    result.output_dir = spec.output_dir;
    fs::create_directories(spec.output_dir);
    write_text_file(spec.output_dir + "/resolved.cfg", experiment_spec_text(spec));

    CohortDataset cohort = materialize_cohort(spec.data);
    if (spec.data.path.empty()) save_dataset(cohort, spec.output_dir + "/dataset.fusd");

    SplitPlan plan = spec.split_scheme == "loso" ? loso_splits(cohort) : logo_splits(cohort, spec.group_size);
    validate_split_plan(plan, cohort);
    write_split_manifest(plan, spec.output_dir + "/manifest.txt");

    std::vector<GridEntry> grid;
    grid.push_back({"full", {}});
    for (const auto& e : spec.grid) grid.push_back(e);
    if (opts.with_standard_grids) {
        for (const auto& e : standard_ablation_grid()) grid.push_back(e);
        for (const auto& e : standard_variant_grid()) grid.push_back(e);
    }

    struct Unit {
        int fold;
        uint64_t seed;
    };
    std::vector<Unit> units;
    for (size_t f = 0; f < plan.folds.size(); ++f)
        for (uint64_t s : spec.seeds) units.push_back({static_cast<int>(f), s});

    std::mutex mu;
    std::atomic<size_t> cursor{0};

    auto run_unit = [&](const Unit& u) {
        const Fold& fold = plan.folds[u.fold];
        CohortDataset source = subset_by_subjects(cohort, fold.source_subjects);
        CohortDataset target = subset_by_subjects(cohort, fold.target_subjects);

        // group grid entries by their pretraining signature
        std::map<std::string, std::vector<size_t>> groups;
        std::vector<AdaptationConfig> cfgs(grid.size());
        for (size_t g = 0; g < grid.size(); ++g) {
            cfgs[g] = resolve_grid_entry(spec.base, grid[g]);
            cfgs[g].seed = derive_seed(u.seed, 9000 + static_cast<uint64_t>(u.fold));
            groups[pretrain_signature(cfgs[g])].push_back(g);
        }

        for (const auto& [sig, members] : groups) {
            const AdaptationConfig& cfg0 = cfgs[members.front()];
            Branch fm = make_fm_branch(cfg0, cohort.C, cohort.T, cohort.K,
                                       derive_seed(cfg0.seed, 300));
            Branch sm = make_sm_branch(cfg0, cohort.C, cohort.T, cohort.K,
                                       derive_seed(cfg0.seed, 301));
            pretrain_source(fm, sm, source, cfg0);

            const bool base_group = std::find(members.begin(), members.end(), size_t{0}) != members.end();
            if (base_group) {
                PrototypeBank bfm = init_from_classifier(fm, cfg0.momentum, cfg0.margin_threshold,
                                                         cfg0.temperature);
                PrototypeBank bsm = init_from_classifier(sm, cfg0.momentum, cfg0.margin_threshold,
                                                         cfg0.temperature);
                SourceOnlyEval so = evaluate_source_only(fm, sm, bfm, bsm, target);
                // a zero-epoch report backs the baseline row so the table
                // cross-check covers it like any other run
                RunReport baseline;
                baseline.config_hash = config_hash(cfg0);
                baseline.seed = cfg0.seed;
                baseline.final_accuracy = so.accuracy;
                baseline.final_mask_rate = so.mask_rate;
                baseline.fm_checkpoint_hash = hash_string_hex(serialize_branch(fm));
                baseline.sm_checkpoint_hash = hash_string_hex(serialize_branch(sm));
                baseline.fm_bank_hash = hash_string_hex(serialize_bank(bfm));
                baseline.sm_bank_hash = hash_string_hex(serialize_bank(bsm));
                const std::string dir = spec.output_dir + "/runs/source_only/fold" +
                                        std::to_string(u.fold) + "_seed" + std::to_string(u.seed);
                fs::create_directories(dir);
                write_text_file(dir + "/report.txt", run_report_text(baseline));
                ResultRow row{"source_only", config_hash(cfg0), u.fold, u.seed, so.accuracy, so.mask_rate};
                std::lock_guard<std::mutex> lk(mu);
                result.table.rows.push_back(row);
            }
            if (opts.save_checkpoints) {
                const std::string dir = spec.output_dir + "/pretrain/fold" + std::to_string(u.fold) +
                                        "_seed" + std::to_string(u.seed);
                fs::create_directories(dir);
                save_branch_checkpoint(fm, dir + "/fm.ckpt");
                save_branch_checkpoint(sm, dir + "/sm.ckpt");
            }

            for (size_t g : members) {
                const AdaptationConfig& cfg = cfgs[g];
                Branch fm_run = fm;
                Branch sm_run = sm;
                PrototypeBank bfm = init_from_classifier(fm_run, cfg.momentum, cfg.margin_threshold,
                                                         cfg.temperature);
                PrototypeBank bsm = init_from_classifier(sm_run, cfg.momentum, cfg.margin_threshold,
                                                         cfg.temperature);
                RunReport rep = adapt_target(fm_run, sm_run, bfm, bsm, target, cfg);

                const std::string dir = spec.output_dir + "/runs/" + grid[g].name + "/fold" +
                                        std::to_string(u.fold) + "_seed" + std::to_string(u.seed);
                fs::create_directories(dir);
                write_text_file(dir + "/report.txt", run_report_text(rep));
                write_text_file(dir + "/report.csv", run_report_csv(rep));
                write_text_file(dir + "/loss_trace.csv", loss_trace_csv(rep));
                write_text_file(dir + "/diagnostics.csv", diagnostics_csv(rep));
                write_text_file(dir + "/timing.csv", timing_csv(rep));
                write_centroids_csv(bfm, dir + "/prototypes_fm.csv");
                write_centroids_csv(bsm, dir + "/prototypes_sm.csv");
                if (opts.save_checkpoints) {
                    save_branch_checkpoint(fm_run, dir + "/fm.ckpt");
                    save_branch_checkpoint(sm_run, dir + "/sm.ckpt");
                    save_bank(bfm, dir + "/fm_bank.bin");
                    save_bank(bsm, dir + "/sm_bank.bin");
                }

                ResultRow row{grid[g].name, config_hash(cfg), u.fold, u.seed, rep.final_accuracy,
                              rep.final_mask_rate};
                std::lock_guard<std::mutex> lk(mu);
                result.table.rows.push_back(row);
            }
        }
    };

    auto worker = [&]() {
        for (;;) {
            const size_t i = cursor.fetch_add(1);
            if (i >= units.size()) return;
            try {
                run_unit(units[i]);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lk(mu);
                result.failures.push_back({units[i].fold, units[i].seed, "", e.what()});
            }
        }
    };

    int jobs = spec.jobs > 0 ? spec.jobs : static_cast<int>(std::thread::hardware_concurrency());
    jobs = std::max(1, std::min<int>(jobs, static_cast<int>(units.size())));
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    std::sort(result.table.rows.begin(), result.table.rows.end(), [](const ResultRow& a, const ResultRow& b) {
        if (a.config_name != b.config_name) return a.config_name < b.config_name;
        if (a.fold != b.fold) return a.fold < b.fold;
        return a.seed < b.seed;
    });
    compute_aggregates(result.table);
    cross_check_result_table(result.table, spec.output_dir);
    write_text_file(spec.output_dir + "/results.csv", result_table_csv(result.table));
    write_text_file(spec.output_dir + "/summary.txt", summary_text(result.table));
    if (!result.failures.empty()) {
        std::string msg;
        for (const auto& f : result.failures)
            msg += "fold " + std::to_string(f.fold) + " seed " + std::to_string(f.seed) + ": " + f.message +
                   "\n";
        write_text_file(spec.output_dir + "/failures.txt", msg);
    }
    return result;
}

// One row per sample: subject, label, then the SM encoder's feature values.
inline void export_features(Branch& branch, const CohortDataset& data, const std::string& out_path) {
    if (branch.input_channels() != data.C || branch.input_timepoints() != data.T)
        throw std::invalid_argument("export_features: dataset dims do not match the checkpoint (C=" +
                                    std::to_string(data.C) + ", T=" + std::to_string(data.T) + " vs C=" +
                                    std::to_string(branch.input_channels()) + ", T=" +
                                    std::to_string(branch.input_timepoints()) + ")");
    const Mat X = cohort_to_matrix(data);
    Mat feats = branch.encode(X);
    std::string out = "subject,label";
    for (int d = 0; d < feats.cols; ++d) out += ",f" + std::to_string(d);
    out += "\n";
    for (int i = 0; i < feats.rows; ++i) {
        out += std::to_string(data.subjects[i]) + "," + std::to_string(data.labels[i]);
        const double* fr = feats.row(i);
        for (int d = 0; d < feats.cols; ++d) out += "," + fmt_double(fr[d]);
        out += "\n";
    }
    write_text_file(out_path, out);
}

}  // namespace fused
