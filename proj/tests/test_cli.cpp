#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "fused/fused.hpp"
#include "test_support.hpp"

using namespace fused;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("fused_cli_" + name);
    fs::remove_all(p);
    return p.string();
}

// tiny cohort + short schedules so experiment-level tests stay fast
ExperimentSpec tiny_spec(const std::string& out) {
    ExperimentSpec spec;
    spec.data.subjects = 3;
    spec.data.trials_per_class = 6;
    spec.data.channels = 3;
    spec.data.timepoints = 48;
    spec.data.classes = 2;
    spec.data.severity = 0.5;
    spec.data.noise = 1.0;
    spec.data.rate = 64.0;
    spec.data.seed = 3;
    spec.base.fm_hidden1 = 16;
    spec.base.fm_hidden2 = 16;
    spec.base.fm_feature_dim = 12;
    spec.base.sm_filters = 2;
    spec.base.sm_kernel = 7;
    spec.base.sm_pool = 4;
    spec.base.sm_feature_dim = 8;
    spec.base.pretrain_epochs = 6;
    spec.base.epochs = 4;
    spec.base.batch_size = 8;
    spec.output_dir = out;
    spec.jobs = 2;
    return spec;
}

}  // namespace

// ---------------------------------------------------------------------------
// config parsing
// ---------------------------------------------------------------------------

TEST_CASE("parse_config: empty text yields the documented defaults") {
    ExperimentSpec spec = parse_config_text("");
    REQUIRE(spec.base.epochs == 50);
    REQUIRE(spec.base.batch_size == 32);
    REQUIRE(spec.base.lr0 == 1e-4);
    REQUIRE(spec.base.momentum == 0.9);
    REQUIRE(spec.base.margin_threshold == 0.6);
    REQUIRE(spec.base.temperature == 10.0);
    REQUIRE(spec.base.weights.lambda_kd == 1.0);
    REQUIRE(spec.base.weights.lambda_div == 1.0);
    REQUIRE(spec.base.lr_schedule == LrSchedule::InvPower);
    REQUIRE(spec.base.use_consensus_mask);
    REQUIRE(spec.base.use_mi);
    REQUIRE(spec.base.use_kd);
    REQUIRE(spec.base.use_ce);
    REQUIRE(spec.base.use_div);
    REQUIRE(spec.base.pseudo_label_variant == PseudoLabelVariant::Fused);
    REQUIRE(spec.split_scheme == "loso");
}

TEST_CASE("parse_config: unknown keys and malformed lines are rejected with the key path") {
    REQUIRE_THROWS_WITH(parse_config_text("adapt.nonsense=3\n"),
                        Catch::Matchers::ContainsSubstring("adapt.nonsense"));
    REQUIRE_THROWS_WITH(parse_config_text("epochs 50\n"), Catch::Matchers::ContainsSubstring("key=value"));
    REQUIRE_THROWS_WITH(parse_config_text("adapt.epochs=abc\n"),
                        Catch::Matchers::ContainsSubstring("adapt.epochs"));
}

TEST_CASE("parse_config: out-of-range values name the offending key") {
    REQUIRE_THROWS_WITH(parse_config_text("proto.margin_threshold=1.5\n"),
                        Catch::Matchers::ContainsSubstring("proto.margin_threshold"));
    REQUIRE_THROWS_WITH(parse_config_text("adapt.epochs=0\n"),
                        Catch::Matchers::ContainsSubstring("adapt.epochs"));
    REQUIRE_THROWS_WITH(parse_config_text("adapt.lr0=-1\n"), Catch::Matchers::ContainsSubstring("adapt.lr0"));
    REQUIRE_THROWS_WITH(parse_config_text("proto.momentum=1.0\n"),
                        Catch::Matchers::ContainsSubstring("proto.momentum"));
    REQUIRE_THROWS_WITH(parse_config_text("loss.lambda_kd=-0.5\n"),
                        Catch::Matchers::ContainsSubstring("loss.lambda_kd"));
}

TEST_CASE("parse_config: comments, blank lines, and whitespace are tolerated") {
    ExperimentSpec spec = parse_config_text(
        "# a comment\n"
        "\n"
        "  adapt.epochs = 12   # trailing comment\n"
        "toggle.use_mi=false\n"
        "exp.seeds=3,4,5\n");
    REQUIRE(spec.base.epochs == 12);
    REQUIRE_FALSE(spec.base.use_mi);
    REQUIRE(spec.seeds == std::vector<uint64_t>{3, 4, 5});
}

TEST_CASE("parse_config: echo round-trip is exact") {
    const std::string text =
        "adapt.epochs=17\n"
        "adapt.lr_schedule=exp\n"
        "proto.temperature=20\n"
        "toggle.pseudo_label_variant=sm_proto\n"
        "data.subjects=5\n"
        "split.scheme=logo\n"
        "split.group_size=2\n"
        "exp.seeds=1,2\n"
        "grid.no_mi=toggle.use_mi=false\n"
        "grid.weak_kd=loss.lambda_kd=0.25;toggle.use_div=false\n";
    ExperimentSpec spec = parse_config_text(text);
    const std::string echoed = experiment_spec_text(spec);
    ExperimentSpec back = parse_config_text(echoed);
    REQUIRE(experiment_spec_text(back) == echoed);
    REQUIRE(back.base.epochs == 17);
    REQUIRE(back.base.lr_schedule == LrSchedule::Exponential);
    REQUIRE(back.grid.size() == 2);
    REQUIRE(back.grid[1].overrides.size() == 2);
}

TEST_CASE("parse_config: grid overrides resolve and validate") {
    ExperimentSpec spec = parse_config_text("grid.no_kd=toggle.use_kd=false\n");
    AdaptationConfig c = resolve_grid_entry(spec.base, spec.grid[0]);
    REQUIRE_FALSE(c.use_kd);
    REQUIRE(c.use_mi);  // base untouched
    REQUIRE_THROWS_WITH(parse_config_text("grid.bad=proto.momentum=2.0\n"),
                        Catch::Matchers::ContainsSubstring("proto.momentum"));
    REQUIRE_THROWS_WITH(parse_config_text("grid.bad=notakey=1\n"),
                        Catch::Matchers::ContainsSubstring("notakey"));
}

TEST_CASE("config_hash: sensitive to toggles, stable under echo") {
    AdaptationConfig a;
    AdaptationConfig b = a;
    b.use_mi = false;
    REQUIRE(config_hash(a) != config_hash(b));
    ExperimentSpec spec;
    spec.base = a;
    ExperimentSpec back = parse_config_text(experiment_spec_text(spec));
    REQUIRE(config_hash(back.base) == config_hash(a));
}

// ---------------------------------------------------------------------------
// experiment harness
// ---------------------------------------------------------------------------

TEST_CASE("run_experiment: folds x seeds x grid with baseline rows and byte-stable reruns") {
    const std::string out = tmp_dir("exp");
    ExperimentSpec spec = tiny_spec(out);
    spec.seeds = {0, 1};
    spec.grid.push_back({"no_kd", {{"toggle.use_kd", "false"}}});

    ExperimentResult res = run_experiment(spec);
    REQUIRE(res.failures.empty());
    // 3 folds x 2 seeds x (full + no_kd) + source_only rows
    int full_rows = 0, nokd_rows = 0, baseline_rows = 0;
    for (const auto& r : res.table.rows) {
        if (r.config_name == "full") ++full_rows;
        if (r.config_name == "no_kd") ++nokd_rows;
        if (r.config_name == "source_only") ++baseline_rows;
        REQUIRE(r.accuracy >= 0.0);
        REQUIRE(r.accuracy <= 1.0);
    }
    REQUIRE(full_rows == 6);
    REQUIRE(nokd_rows == 6);
    REQUIRE(baseline_rows == 6);
    // source-only baseline aggregate is present
    bool has_baseline_agg = false;
    for (const auto& a : res.table.aggregates)
        if (a.config_name == "source_only") has_baseline_agg = true;
    REQUIRE(has_baseline_agg);

    REQUIRE(fs::exists(out + "/results.csv"));
    REQUIRE(fs::exists(out + "/summary.txt"));
    REQUIRE(fs::exists(out + "/manifest.txt"));
    REQUIRE(fs::exists(out + "/resolved.cfg"));
    REQUIRE(fs::exists(out + "/dataset.fusd"));
    REQUIRE(fs::exists(out + "/runs/full/fold0_seed0/report.txt"));
    REQUIRE(fs::exists(out + "/runs/full/fold0_seed0/loss_trace.csv"));
    REQUIRE(fs::exists(out + "/runs/full/fold0_seed0/diagnostics.csv"));
    REQUIRE(fs::exists(out + "/runs/full/fold0_seed0/prototypes_fm.csv"));

    const std::string csv1 = read_text_file(out + "/results.csv");
    REQUIRE(csv1.find("source_only") != std::string::npos);

    // rerun the same spec into a new directory: identical csv bytes
    const std::string out2 = tmp_dir("exp2");
    ExperimentSpec spec2 = spec;
    spec2.output_dir = out2;
    run_experiment(spec2);
    const std::string csv2 = read_text_file(out2 + "/results.csv");
    REQUIRE(csv1 == csv2);

    // aggregates equal the recomputed mean of their rows
    for (const auto& a : res.table.aggregates) {
        double mean = 0.0;
        int n = 0;
        for (const auto& r : res.table.rows)
            if (r.config_name == a.config_name) {
                mean += r.accuracy;
                ++n;
            }
        mean /= n;
        REQUIRE(n == a.count);
        REQUIRE(std::abs(mean - a.acc_mean) < 1e-9);
    }

    // loss trace header matches the documented interface
    std::ifstream trace(out + "/runs/full/fold0_seed0/loss_trace.csv");
    std::string header;
    std::getline(trace, header);
    REQUIRE(header == "epoch,L_MI,L_CE,L_KD,L_Div,mask_rate");

    fs::remove_all(out);
    fs::remove_all(out2);
}

TEST_CASE("run_experiment: unit failures are recorded and partial results survive") {
    const std::string out = tmp_dir("fail");
    ExperimentSpec spec = tiny_spec(out);
    spec.seeds = {0};
    // kernel longer than the input blows up at branch construction inside units
    spec.grid.push_back({"broken", {{"sm.kernel", "1000"}}});
    ExperimentResult res = run_experiment(spec);
    REQUIRE(res.failures.size() == 3);  // every fold hits the broken entry
    REQUIRE(fs::exists(out + "/failures.txt"));
    fs::remove_all(out);
}

TEST_CASE("run_experiment: checkpoints optionally saved and loadable") {
    const std::string out = tmp_dir("ckpt");
    ExperimentSpec spec = tiny_spec(out);
    spec.seeds = {0};
    RunOptions opts;
    opts.save_checkpoints = true;
    ExperimentResult res = run_experiment(spec, opts);
    REQUIRE(res.failures.empty());
    REQUIRE(fs::exists(out + "/pretrain/fold0_seed0/sm.ckpt"));
    Branch sm = load_branch_checkpoint(out + "/runs/full/fold0_seed0/sm.ckpt");
    REQUIRE(sm.role() == Role::SM);
    PrototypeBank bank = load_bank(out + "/runs/full/fold0_seed0/sm_bank.bin");
    REQUIRE(bank.num_classes() == 2);
    // recorded hash matches the file on disk
    RunReport rep = parse_run_report_text(read_text_file(out + "/runs/full/fold0_seed0/report.txt"));
    const std::string blob = read_text_file(out + "/runs/full/fold0_seed0/sm.ckpt");
    REQUIRE(hash_string_hex(blob) == rep.sm_checkpoint_hash);
    fs::remove_all(out);
}

TEST_CASE("standard grids carry the documented rows") {
    auto ablation = standard_ablation_grid();
    REQUIRE(ablation.size() == 5);
    REQUIRE(ablation[0].name == "no_mask");
    REQUIRE(ablation[1].name == "no_mask_no_ce");
    REQUIRE(ablation[1].overrides.size() == 2);
    auto variants = standard_variant_grid();
    REQUIRE(variants.size() == 4);
    for (const auto& v : variants) REQUIRE(v.overrides[0].first == "toggle.pseudo_label_variant");
}

// ---------------------------------------------------------------------------
// feature export
// ---------------------------------------------------------------------------

TEST_CASE("export_features: one row per sample plus header; deterministic; dims checked") {
    ShiftSpec shift{0.3, 0.1, 0.6, 12};
    CohortDataset d = generate_cohort(2, 3, 3, 48, 2, shift, 64.0f);
    AdaptationConfig cfg = tiny_spec("unused").base;
    Branch sm = make_sm_branch(cfg, d.C, d.T, d.K, 55);

    const std::string path = (fs::temp_directory_path() / "fused_feats.csv").string();
    export_features(sm, d, path);
    std::ifstream f(path);
    std::string line;
    int lines = 0;
    std::string first_data;
    while (std::getline(f, line)) {
        if (lines == 0) REQUIRE(line.rfind("subject,label,f0", 0) == 0);
        if (lines == 1) first_data = line;
        ++lines;
    }
    REQUIRE(lines == d.num_samples() + 1);

    export_features(sm, d, path);
    std::ifstream f2(path);
    std::getline(f2, line);
    std::getline(f2, line);
    REQUIRE(line == first_data);
    fs::remove(path);

    CohortDataset wrong = generate_cohort(2, 2, 4, 48, 2, shift, 64.0f);
    REQUIRE_THROWS_WITH(export_features(sm, wrong, path), Catch::Matchers::ContainsSubstring("C="));
}

namespace {

// reads an export_features CSV back into a feature matrix + labels
std::pair<Mat, std::vector<int>> read_feature_csv(const std::string& path) {
    std::ifstream f(path);
    std::string line;
    std::getline(f, line);  // header
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    while (std::getline(f, line)) {
        std::vector<double> vals;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
        labels.push_back(static_cast<int>(vals[1]));
        rows.emplace_back(vals.begin() + 2, vals.end());
    }
    Mat X(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy(rows[i].begin(), rows[i].end(), X.row(static_cast<int>(i)));
    return {X, labels};
}

}  // namespace

TEST_CASE("export_features: adaptation raises the linear-probe accuracy of target features") {
    ShiftSpec shift{0.5, 0.1, 0.8, 5};
    CohortDataset cohort = generate_cohort(4, 12, 4, 64, 3, shift, 64.0f);
    AdaptationConfig cfg;
    cfg.fm_hidden1 = 32;
    cfg.fm_hidden2 = 32;
    cfg.fm_feature_dim = 24;
    cfg.sm_filters = 4;
    cfg.sm_kernel = 9;
    cfg.sm_pool = 4;
    cfg.sm_feature_dim = 16;
    cfg.pretrain_epochs = 30;
    cfg.epochs = 25;
    cfg.batch_size = 16;
    cfg.lr0 = 1e-3;
    cfg.seed = 3;

    SplitPlan plan = loso_splits(cohort);
    CohortDataset source = subset_by_subjects(cohort, plan.folds[0].source_subjects);
    CohortDataset target = subset_by_subjects(cohort, plan.folds[0].target_subjects);
    Branch fm = make_fm_branch(cfg, cohort.C, cohort.T, cohort.K, derive_seed(cfg.seed, 300));
    Branch sm = make_sm_branch(cfg, cohort.C, cohort.T, cohort.K, derive_seed(cfg.seed, 301));
    pretrain_source(fm, sm, source, cfg);

    const std::string src_pre = (fs::temp_directory_path() / "fused_src_pre.csv").string();
    const std::string tgt_pre = (fs::temp_directory_path() / "fused_tgt_pre.csv").string();
    export_features(sm, source, src_pre);
    export_features(sm, target, tgt_pre);

    PrototypeBank bfm = init_from_classifier(fm, cfg.momentum, cfg.margin_threshold, cfg.temperature);
    PrototypeBank bsm = init_from_classifier(sm, cfg.momentum, cfg.margin_threshold, cfg.temperature);
    adapt_target(fm, sm, bfm, bsm, target, cfg);

    const std::string src_post = (fs::temp_directory_path() / "fused_src_post.csv").string();
    const std::string tgt_post = (fs::temp_directory_path() / "fused_tgt_post.csv").string();
    export_features(sm, source, src_post);
    export_features(sm, target, tgt_post);

    // the probe trains on exported source features and evaluates the target
    // fold, before vs after adaptation
    auto probe_acc = [&](const std::string& train_csv, const std::string& eval_csv) {
        auto [Xtr, ytr] = read_feature_csv(train_csv);
        auto [Xte, yte] = read_feature_csv(eval_csv);
        oracle::RidgeProbe probe;
        probe.fit(Xtr, ytr, cohort.K, 1e-2);
        return probe.accuracy(Xte, yte);
    };
    const double pre = probe_acc(src_pre, tgt_pre);
    const double post = probe_acc(src_post, tgt_post);
    INFO("probe accuracy pre=" << pre << " post=" << post);
    REQUIRE(post > pre);

    for (const auto& p : {src_pre, tgt_pre, src_post, tgt_post}) fs::remove(p);
}
