#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "fused/fused.hpp"
#include "test_support.hpp"

using namespace fused;

namespace {

// Small cohort for engine-level tests: fast but non-trivial.
CohortDataset engine_cohort(double severity = 0.5, double noise = 0.8, uint64_t seed = 5) {
    ShiftSpec spec{severity, 0.1, noise, seed};
    return generate_cohort(4, 12, 4, 64, 3, spec, 64.0f);
}

AdaptationConfig engine_cfg() {
    AdaptationConfig cfg;
    cfg.fm_hidden1 = 32;
    cfg.fm_hidden2 = 32;
    cfg.fm_feature_dim = 24;
    cfg.sm_filters = 4;
    cfg.sm_kernel = 9;
    cfg.sm_pool = 4;
    cfg.sm_feature_dim = 16;
    cfg.pretrain_epochs = 30;
    cfg.epochs = 12;
    cfg.batch_size = 16;
    cfg.lr0 = 1e-3;  // small nets, short runs
    cfg.seed = 3;
    return cfg;
}

struct Pretrained {
    Branch fm, sm;
    PrototypeBank bfm, bsm;
    CohortDataset source, target;
};

Pretrained pretrain_fixture(const AdaptationConfig& cfg, const CohortDataset& cohort) {
    SplitPlan plan = loso_splits(cohort);
    const Fold& fold = plan.folds[0];
    Pretrained p{make_fm_branch(cfg, cohort.C, cohort.T, cohort.K, derive_seed(cfg.seed, 300)),
                 make_sm_branch(cfg, cohort.C, cohort.T, cohort.K, derive_seed(cfg.seed, 301)),
                 {},
                 {},
                 subset_by_subjects(cohort, fold.source_subjects),
                 subset_by_subjects(cohort, fold.target_subjects)};
    pretrain_source(p.fm, p.sm, p.source, cfg);
    p.bfm = init_from_classifier(p.fm, cfg.momentum, cfg.margin_threshold, cfg.temperature);
    p.bsm = init_from_classifier(p.sm, cfg.momentum, cfg.margin_threshold, cfg.temperature);
    return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// learning-rate schedule and optimizer
// ---------------------------------------------------------------------------

TEST_CASE("lr_at: endpoints, closed form, monotone non-increasing") {
    REQUIRE(lr_at(0, 1000, 3e-4) == 3e-4);
    REQUIRE(std::abs(lr_at(1000, 1000, 1.0) - std::pow(11.0, -0.75)) < 1e-12);
    double prev = 1e9;
    for (long s = 0; s <= 500; ++s) {
        const double lr = lr_at(s, 500, 1e-4);
        REQUIRE(lr <= prev + 1e-18);
        prev = lr;
    }
    // the exponential alternative shares both endpoints
    REQUIRE(lr_at(0, 100, 2.0, 0.75, LrSchedule::Exponential) == 2.0);
    REQUIRE(std::abs(lr_at(100, 100, 2.0, 0.75, LrSchedule::Exponential) - 2.0 * std::pow(11.0, -0.75)) <
            1e-12);
    REQUIRE_THROWS(lr_at(-1, 10, 1.0));
    REQUIRE_THROWS(lr_at(11, 10, 1.0));
}

TEST_CASE("adam: zero gradients leave parameters untouched") {
    ParamTensor p("x", 4);
    p.w = {1.0, -2.0, 3.0, 0.5};
    const auto before = p.w;
    Adam opt({&p});
    opt.zero_grad();
    opt.step(0.1);
    REQUIRE(p.w == before);
}

// ---------------------------------------------------------------------------
// gradient verification
// ---------------------------------------------------------------------------

TEST_CASE("check_gradients: classifier-only source_ce is accurate below 1e-6") {
    AdaptationConfig cfg;
    cfg.fm_hidden1 = 8;
    cfg.fm_hidden2 = 8;
    cfg.fm_feature_dim = 10;
    Branch fm = make_fm_branch(cfg, 3, 16, 3, 11);
    fm.encoder_trainable = false;  // linear classifier alone
    fm.classifier_trainable = true;
    Mat probe(6, 48);
    Rng rng(12);
    for (auto& x : probe.v) x = rng.gaussian();
    GradCheckAux aux = make_gradcheck_aux(6, 3, 13);
    REQUIRE(check_gradients(fm, LossSelector::SourceCE, probe, aux) < 1e-6);
}

TEST_CASE("check_gradients: fully frozen branch reports zero by convention") {
    AdaptationConfig cfg;
    cfg.fm_hidden1 = 8;
    cfg.fm_hidden2 = 8;
    cfg.fm_feature_dim = 10;
    Branch fm = make_fm_branch(cfg, 3, 16, 3, 14);
    fm.encoder_trainable = false;
    fm.classifier_trainable = false;
    Mat probe(4, 48);
    Rng rng(15);
    for (auto& x : probe.v) x = rng.gaussian();
    GradCheckAux aux = make_gradcheck_aux(4, 3, 16);
    REQUIRE(check_gradients(fm, LossSelector::SourceCE, probe, aux) == 0.0);
}

TEST_CASE("check_gradients: every selector on both toy branches below 1e-4") {
    AdaptationConfig cfg;
    cfg.fm_hidden1 = 10;
    cfg.fm_hidden2 = 8;
    cfg.fm_feature_dim = 12;
    cfg.sm_filters = 2;
    cfg.sm_kernel = 5;
    cfg.sm_pool = 3;
    cfg.sm_feature_dim = 9;
    const int C = 3, T = 24, K = 3, N = 5;
    Branch fm = make_fm_branch(cfg, C, T, K, 17);
    Branch sm = make_sm_branch(cfg, C, T, K, 18);
    Mat probe(N, C * T);
    Rng rng(19);
    for (auto& x : probe.v) x = rng.gaussian();
    GradCheckAux aux = make_gradcheck_aux(N, K, 20);

    set_phase_freezing(fm, sm, Phase::Pretrain);
    REQUIRE(check_gradients(fm, LossSelector::SourceCE, probe, aux) < 1e-4);
    REQUIRE(check_gradients(sm, LossSelector::SourceCE, probe, aux) < 1e-4);
    set_phase_freezing(fm, sm, Phase::Adapt);
    REQUIRE(check_gradients(fm, LossSelector::FmCalibration, probe, aux) < 1e-4);
    REQUIRE(check_gradients(sm, LossSelector::SmComposite, probe, aux) < 1e-4);
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

TEST_CASE("pretrain_source: separable two-class source reaches > 0.95 accuracy") {
    ShiftSpec spec{0.0, 0.05, 0.3, 8};
    CohortDataset cohort = generate_cohort(2, 20, 4, 64, 2, spec, 64.0f);
    AdaptationConfig cfg = engine_cfg();
    cfg.pretrain_epochs = 50;
    Branch fm = make_fm_branch(cfg, cohort.C, cohort.T, cohort.K, 21);
    Branch sm = make_sm_branch(cfg, cohort.C, cohort.T, cohort.K, 22);
    auto [acc_fm, acc_sm] = pretrain_source(fm, sm, cohort, cfg);
    REQUIRE(acc_fm > 0.95);
    REQUIRE(acc_sm > 0.95);
}

TEST_CASE("pretrain_source: zero epochs leave both branches unchanged") {
    CohortDataset cohort = engine_cohort();
    AdaptationConfig cfg = engine_cfg();
    cfg.pretrain_epochs = 0;
    Branch fm = make_fm_branch(cfg, cohort.C, cohort.T, cohort.K, 23);
    Branch sm = make_sm_branch(cfg, cohort.C, cohort.T, cohort.K, 24);
    const std::string h1 = fm.encoder_param_hash(), h2 = fm.classifier_param_hash();
    const std::string h3 = sm.encoder_param_hash(), h4 = sm.classifier_param_hash();
    pretrain_source(fm, sm, cohort, cfg);
    REQUIRE(fm.encoder_param_hash() == h1);
    REQUIRE(fm.classifier_param_hash() == h2);
    REQUIRE(sm.encoder_param_hash() == h3);
    REQUIRE(sm.classifier_param_hash() == h4);
}

TEST_CASE("pretrain_source: fixed seed reproduces identical checkpoints; empty source rejected") {
    CohortDataset cohort = engine_cohort();
    AdaptationConfig cfg = engine_cfg();
    cfg.pretrain_epochs = 8;
    std::string hashes[2];
    for (int rep = 0; rep < 2; ++rep) {
        Branch fm = make_fm_branch(cfg, cohort.C, cohort.T, cohort.K, derive_seed(cfg.seed, 300));
        Branch sm = make_sm_branch(cfg, cohort.C, cohort.T, cohort.K, derive_seed(cfg.seed, 301));
        pretrain_source(fm, sm, cohort, cfg);
        hashes[rep] = hash_string_hex(serialize_branch(fm)) + hash_string_hex(serialize_branch(sm));
    }
    REQUIRE(hashes[0] == hashes[1]);

    CohortDataset empty;
    empty.C = cohort.C;
    empty.T = cohort.T;
    empty.K = cohort.K;
    Branch fm = make_fm_branch(cfg, cohort.C, cohort.T, cohort.K, 25);
    Branch sm = make_sm_branch(cfg, cohort.C, cohort.T, cohort.K, 26);
    REQUIRE_THROWS_WITH(pretrain_source(fm, sm, empty, cfg), Catch::Matchers::ContainsSubstring("empty"));
}

// ---------------------------------------------------------------------------
// adaptation
// ---------------------------------------------------------------------------

TEST_CASE("adapt_target: frozen groups are byte-stable across a full run") {
    CohortDataset cohort = engine_cohort();
    AdaptationConfig cfg = engine_cfg();
    Pretrained p = pretrain_fixture(cfg, cohort);
    const std::string fm_enc = p.fm.encoder_param_hash();
    const std::string sm_clf = p.sm.classifier_param_hash();
    RunReport rep = adapt_target(p.fm, p.sm, p.bfm, p.bsm, p.target, cfg);
    REQUIRE(p.fm.encoder_param_hash() == fm_enc);
    REQUIRE(p.sm.classifier_param_hash() == sm_clf);
    REQUIRE(rep.final_accuracy >= 0.0);
    REQUIRE(rep.final_accuracy <= 1.0);
    REQUIRE(rep.epochs.size() == static_cast<size_t>(cfg.epochs));
}

TEST_CASE("adapt_target: identical seeds give byte-identical run reports") {
    CohortDataset cohort = engine_cohort();
    AdaptationConfig cfg = engine_cfg();
    cfg.epochs = 6;
    std::string texts[2];
    for (int rep = 0; rep < 2; ++rep) {
        Pretrained p = pretrain_fixture(cfg, cohort);
        RunReport r = adapt_target(p.fm, p.sm, p.bfm, p.bsm, p.target, cfg);
        texts[rep] = run_report_text(r);
    }
    REQUIRE(texts[0] == texts[1]);
}

TEST_CASE("adapt_target: stage order is forward, EMA, refine, FM step, SM step") {
    CohortDataset cohort = engine_cohort();
    AdaptationConfig cfg = engine_cfg();
    cfg.epochs = 2;
    Pretrained p = pretrain_fixture(cfg, cohort);
    std::vector<Stage> log;
    std::vector<std::pair<int, int>> coords;
    adapt_target(p.fm, p.sm, p.bfm, p.bsm, p.target, cfg, [&](Stage s, int e, int b) {
        log.push_back(s);
        coords.emplace_back(e, b);
    });
    REQUIRE(log.size() % 5 == 0);
    REQUIRE(!log.empty());
    for (size_t i = 0; i < log.size(); i += 5) {
        REQUIRE(log[i] == Stage::Forward);
        REQUIRE(log[i + 1] == Stage::EmaUpdate);
        REQUIRE(log[i + 2] == Stage::Refine);
        REQUIRE(log[i + 3] == Stage::FmStep);
        REQUIRE(log[i + 4] == Stage::SmStep);
        for (size_t j = 1; j < 5; ++j) REQUIRE(coords[i + j] == coords[i]);
    }
}

TEST_CASE("adapt_target: all losses off leaves accuracy exactly at source-only, no drift") {
    CohortDataset cohort = engine_cohort();
    AdaptationConfig cfg = engine_cfg();
    cfg.use_mi = cfg.use_kd = cfg.use_ce = cfg.use_div = false;
    cfg.epochs = 4;
    Pretrained p = pretrain_fixture(cfg, cohort);
    SourceOnlyEval so = evaluate_source_only(p.fm, p.sm, p.bfm, p.bsm, p.target);
    const std::string fm_h = hash_string_hex(serialize_branch(p.fm));
    const std::string sm_h = hash_string_hex(serialize_branch(p.sm));
    RunReport rep = adapt_target(p.fm, p.sm, p.bfm, p.bsm, p.target, cfg);
    REQUIRE(rep.final_accuracy == so.accuracy);
    REQUIRE(hash_string_hex(serialize_branch(p.fm)) == fm_h);
    REQUIRE(hash_string_hex(serialize_branch(p.sm)) == sm_h);
}

TEST_CASE("adapt_target: empty target rejected; non-finite loss aborts with coordinates") {
    CohortDataset cohort = engine_cohort();
    AdaptationConfig cfg = engine_cfg();
    Pretrained p = pretrain_fixture(cfg, cohort);
    CohortDataset empty;
    empty.C = cohort.C;
    empty.T = cohort.T;
    empty.K = cohort.K;
    REQUIRE_THROWS_WITH(adapt_target(p.fm, p.sm, p.bfm, p.bsm, empty, cfg),
                        Catch::Matchers::ContainsSubstring("empty"));

    p.fm.classifier().bias().w[0] = std::numeric_limits<double>::infinity();
    REQUIRE_THROWS_WITH(adapt_target(p.fm, p.sm, p.bfm, p.bsm, p.target, cfg),
                        Catch::Matchers::ContainsSubstring("epoch 0") &&
                            Catch::Matchers::ContainsSubstring("batch 0"));
}

TEST_CASE("adapt_target: CE-only with oracle labels tracks a supervised fine-tuning baseline") {
    CohortDataset cohort = engine_cohort();
    AdaptationConfig cfg = engine_cfg();
    cfg.epochs = 15;
    cfg.use_mi = cfg.use_kd = cfg.use_div = false;
    cfg.use_consensus_mask = false;  // all toggles off except use_ce
    cfg.inject_oracle_labels = true;
    Pretrained p = pretrain_fixture(cfg, cohort);

    // independent supervised oracle: plain Adam on the SM encoder with true
    // labels, classifier frozen, same schedule
    Branch sm_ref = p.sm;
    {
        const Mat X = cohort_to_matrix(p.target);
        std::vector<int> y(p.target.labels.begin(), p.target.labels.end());
        sm_ref.encoder_trainable = true;
        sm_ref.classifier_trainable = false;
        Adam opt(sm_ref.trainable_params());
        Rng rng(777);
        const int nb = (X.rows + cfg.batch_size - 1) / cfg.batch_size;
        const long total = static_cast<long>(cfg.epochs) * nb;
        long step = 0;
        for (int e = 0; e < cfg.epochs; ++e) {
            std::vector<int> idx(X.rows);
            std::iota(idx.begin(), idx.end(), 0);
            rng.shuffle(idx);
            for (size_t s = 0; s < idx.size(); s += cfg.batch_size) {
                std::vector<int> b(idx.begin() + s,
                                   idx.begin() + std::min(s + cfg.batch_size, idx.size()));
                Mat Xb = rows_of(X, b);
                std::vector<int> yb(b.size());
                for (size_t i = 0; i < b.size(); ++i) yb[i] = y[b[i]];
                Mat feats = sm_ref.encode(Xb, true);
                ProbBatch pb = sm_ref.linear_view(feats, true);
                Mat dp = source_ce_grad(pb, yb);
                Mat dl = softmax_backward(pb.values, dp);
                sm_ref.zero_grads();
                Mat df = sm_ref.classifier().backward(dl);
                sm_ref.encoder().backward(df);
                opt.step(lr_at(step++, total, cfg.effective_sm_lr0(), cfg.decay_power, cfg.lr_schedule));
            }
        }
    }
    const Mat Xt = cohort_to_matrix(p.target);
    const double supervised = evaluate_accuracy(sm_ref, Xt, p.target.labels);

    RunReport rep = adapt_target(p.fm, p.sm, p.bfm, p.bsm, p.target, cfg);
    REQUIRE(rep.final_accuracy >= supervised - 0.02);
}

TEST_CASE("adapt_target: open-question toggles run and stay sane") {
    CohortDataset cohort = engine_cohort();
    AdaptationConfig cfg = engine_cfg();
    cfg.epochs = 3;

    SECTION("epoch-cadence EMA") {
        cfg.ema_cadence = EmaCadence::Epoch;
        Pretrained p = pretrain_fixture(cfg, cohort);
        RunReport r = adapt_target(p.fm, p.sm, p.bfm, p.bsm, p.target, cfg);
        REQUIRE(r.final_accuracy >= 0.0);
        REQUIRE(r.final_accuracy <= 1.0);
    }
    SECTION("frozen FM prototypes") {
        cfg.ema_update_fm_during_adapt = false;
        Pretrained p = pretrain_fixture(cfg, cohort);
        const std::vector<double> before = p.bfm.centroids.v;
        adapt_target(p.fm, p.sm, p.bfm, p.bsm, p.target, cfg);
        REQUIRE(p.bfm.centroids.v == before);
    }
    SECTION("full-dataset MI estimation") {
        cfg.mi_scope = MiScope::Dataset;
        Pretrained p = pretrain_fixture(cfg, cohort);
        RunReport r = adapt_target(p.fm, p.sm, p.bfm, p.bsm, p.target, cfg);
        REQUIRE(r.epochs.back().l_mi <= 1e-9);  // negative MI estimate recorded
    }
    SECTION("attached distillation teacher") {
        cfg.kd_detach_teacher = false;
        Pretrained p = pretrain_fixture(cfg, cohort);
        RunReport r = adapt_target(p.fm, p.sm, p.bfm, p.bsm, p.target, cfg);
        REQUIRE(r.final_accuracy >= 0.0);
    }
    SECTION("pseudo-label variants select the advertised view") {
        cfg.pseudo_label_variant = PseudoLabelVariant::SmLinear;
        Pretrained p = pretrain_fixture(cfg, cohort);
        RunReport r = adapt_target(p.fm, p.sm, p.bfm, p.bsm, p.target, cfg);
        REQUIRE(r.final_accuracy >= 0.0);
    }
}

TEST_CASE("run report: serialization round-trips through the parser") {
    CohortDataset cohort = engine_cohort();
    AdaptationConfig cfg = engine_cfg();
    cfg.epochs = 3;
    Pretrained p = pretrain_fixture(cfg, cohort);
    RunReport r = adapt_target(p.fm, p.sm, p.bfm, p.bsm, p.target, cfg);
    RunReport back = parse_run_report_text(run_report_text(r));
    REQUIRE(back.config_hash == r.config_hash);
    REQUIRE(back.final_accuracy == r.final_accuracy);
    REQUIRE(back.final_mask_rate == r.final_mask_rate);
    REQUIRE(back.epochs.size() == r.epochs.size());
    REQUIRE(back.epochs[1].l_kd == r.epochs[1].l_kd);
    REQUIRE(back.fm_checkpoint_hash == r.fm_checkpoint_hash);
    // canonical text never contains wall-clock
    REQUIRE(run_report_text(r).find("wall") == std::string::npos);
}

TEST_CASE("bank serialization: round-trip preserves centroids bitwise") {
    PrototypeBank bank;
    Rng rng(33);
    Mat c(4, 6);
    for (auto& x : c.v) x = rng.gaussian();
    bank.centroids = l2_normalize_rows(c);
    bank.momentum = 0.85;
    bank.margin_threshold = 0.55;
    bank.temperature = 12.0;
    bank.owner_role = Role::SM;
    PrototypeBank back = deserialize_bank(serialize_bank(bank));
    REQUIRE(back.centroids.v == bank.centroids.v);
    REQUIRE(back.momentum == bank.momentum);
    REQUIRE(back.margin_threshold == bank.margin_threshold);
    REQUIRE(back.temperature == bank.temperature);
    REQUIRE(back.owner_role == Role::SM);
}
