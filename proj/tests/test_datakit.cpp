#include <catch2/catch_amalgamated.hpp>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "fused/fused.hpp"
#include "test_support.hpp"

using namespace fused;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
    return (fs::temp_directory_path() / ("fused_test_" + name)).string();
}

CohortDataset small_cohort(double severity, double noise, uint64_t seed = 5) {
    ShiftSpec spec{severity, 0.1, noise, seed};
    return generate_cohort(3, 4, 4, 64, 2, spec, 64.0f);
}

}  // namespace

// ---------------------------------------------------------------------------
// generator
// ---------------------------------------------------------------------------

TEST_CASE("generate_cohort: identity mixing and zero noise make subjects identical") {
    ShiftSpec spec{0.0, 0.0, 0.0, 99};
    CohortDataset d = generate_cohort(3, 2, 4, 32, 2, spec, 64.0f);
    // trial t of class k must be bit-identical across subjects
    const size_t stride = d.sample_stride();
    for (int k = 0; k < 2; ++k)
        for (int trial = 0; trial < 2; ++trial) {
            const int base = k * 2 + trial;  // subject 0 block layout
            for (int s = 1; s < 3; ++s) {
                const int other = s * 4 + k * 2 + trial;
                REQUIRE(std::memcmp(d.sample(base), d.sample(other), stride * sizeof(float)) == 0);
            }
        }
}

TEST_CASE("generate_cohort: identical specs give byte-identical datasets") {
    ShiftSpec spec{0.5, 0.1, 1.0, 1234};
    CohortDataset a = generate_cohort(4, 3, 4, 48, 3, spec, 64.0f);
    CohortDataset b = generate_cohort(4, 3, 4, 48, 3, spec, 64.0f);
    REQUIRE(a.samples == b.samples);
    REQUIRE(a.labels == b.labels);
    REQUIRE(a.subjects == b.subjects);
}

TEST_CASE("generate_cohort: different seeds move the data, invalid dims rejected") {
    ShiftSpec a{0.5, 0.1, 1.0, 1};
    ShiftSpec b{0.5, 0.1, 1.0, 2};
    CohortDataset da = generate_cohort(2, 2, 3, 32, 2, a, 64.0f);
    CohortDataset db = generate_cohort(2, 2, 3, 32, 2, b, 64.0f);
    REQUIRE(da.samples != db.samples);
    REQUIRE_THROWS(generate_cohort(0, 2, 3, 32, 2, a));
    REQUIRE_THROWS(generate_cohort(2, 2, 3, 32, 1, a));
    REQUIRE_THROWS(generate_cohort(2, 0, 3, 32, 2, a));
}

TEST_CASE("generate_cohort: every subject has at least one sample per class") {
    ShiftSpec spec{0.3, 0.1, 0.5, 7};
    CohortDataset d = generate_cohort(5, 2, 3, 32, 4, spec, 64.0f);
    for (int32_t s : d.subject_ids())
        for (int k = 0; k < d.K; ++k) {
            int count = 0;
            for (int i = 0; i < d.num_samples(); ++i)
                if (d.subjects[i] == s && d.labels[i] == k) ++count;
            REQUIRE(count >= 1);
        }
    validate_cohort(d);
}

TEST_CASE("generator: linear probe separates classes within-subject at severity 0") {
    // the standard-cohort noise level must keep the within-subject probe >= 99%
    ShiftSpec spec{0.0, 0.1, 1.0, 7};
    CohortDataset d = generate_cohort(4, 24, 8, 256, 4, spec, 128.0f);
    Mat X = cohort_to_matrix(d);
    double acc = 0.0;
    for (int subj = 0; subj < 4; ++subj) {
        std::vector<int> tr, te;
        for (int i = 0; i < d.num_samples(); ++i) {
            if (d.subjects[i] != subj) continue;
            (i % 2 == 0 ? tr : te).push_back(i);
        }
        Mat Xtr = rows_of(X, tr), Xte = rows_of(X, te);
        std::vector<int> ytr, yte;
        for (int i : tr) ytr.push_back(d.labels[i]);
        for (int i : te) yte.push_back(d.labels[i]);
        oracle::RidgeProbe probe;
        probe.fit(Xtr, ytr, d.K, 1e-2);
        acc += probe.accuracy(Xte, yte);
    }
    REQUIRE(acc / 4 >= 0.99);
}

TEST_CASE("generator: severity 0.5 drops cross-subject probe accuracy >= 10 points below within") {
    ShiftSpec spec{0.5, 0.1, 1.0, 7};
    CohortDataset d = generate_cohort(8, 24, 8, 256, 4, spec, 128.0f);
    Mat X = cohort_to_matrix(d);
    double within = 0.0, cross = 0.0;
    const int folds = 4;
    for (int subj = 0; subj < folds; ++subj) {
        std::vector<int> tr, te, wtr, wte;
        for (int i = 0; i < d.num_samples(); ++i) {
            if (d.subjects[i] == subj) {
                te.push_back(i);
                (i % 2 == 0 ? wtr : wte).push_back(i);
            } else {
                tr.push_back(i);
            }
        }
        std::vector<int> ytr, yte, ywtr, ywte;
        for (int i : tr) ytr.push_back(d.labels[i]);
        for (int i : te) yte.push_back(d.labels[i]);
        for (int i : wtr) ywtr.push_back(d.labels[i]);
        for (int i : wte) ywte.push_back(d.labels[i]);
        oracle::RidgeProbe cp, wp;
        cp.fit(rows_of(X, tr), ytr, d.K, 1e-2);
        cross += cp.accuracy(rows_of(X, te), yte);
        wp.fit(rows_of(X, wtr), ywtr, d.K, 1e-2);
        within += wp.accuracy(rows_of(X, wte), ywte);
    }
    within /= folds;
    cross /= folds;
    REQUIRE(within - cross >= 0.10);
}

// ---------------------------------------------------------------------------
// dataset file format
// ---------------------------------------------------------------------------

TEST_CASE("save/load: round-trip is byte-exact") {
    CohortDataset d = small_cohort(0.4, 0.8);
    const std::string path = tmp_path("roundtrip.fusd");
    save_dataset(d, path);
    CohortDataset back = load_dataset(path);
    REQUIRE(back.samples == d.samples);
    REQUIRE(back.labels == d.labels);
    REQUIRE(back.subjects == d.subjects);
    REQUIRE(back.C == d.C);
    REQUIRE(back.T == d.T);
    REQUIRE(back.K == d.K);
    REQUIRE(back.sampling_rate == d.sampling_rate);
    REQUIRE(back.provenance == Provenance::Imported);
    fs::remove(path);
}

TEST_CASE("save/load: empty dataset is a valid file") {
    CohortDataset d;
    d.C = 4;
    d.T = 16;
    d.K = 2;
    d.sampling_rate = 100.0f;
    const std::string path = tmp_path("empty.fusd");
    save_dataset(d, path);
    CohortDataset back = load_dataset(path);
    REQUIRE(back.num_samples() == 0);
    REQUIRE(back.C == 4);
    fs::remove(path);
}

TEST_CASE("load: bad magic, truncation, and trailing bytes are structured errors") {
    CohortDataset d = small_cohort(0.2, 0.5);
    const std::string path = tmp_path("corrupt.fusd");
    save_dataset(d, path);
    std::string blob;
    {
        std::ifstream f(path, std::ios::binary);
        blob.assign((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    }

    auto write_blob = [&](const std::string& b) {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f.write(b.data(), static_cast<std::streamsize>(b.size()));
    };

    std::string bad = blob;
    bad[0] = 'X';
    write_blob(bad);
    REQUIRE_THROWS_WITH(load_dataset(path), Catch::Matchers::ContainsSubstring("bad magic"));

    write_blob(blob.substr(0, 30));  // inside the samples section
    REQUIRE_THROWS_WITH(load_dataset(path), Catch::Matchers::ContainsSubstring("truncated while reading"));

    write_blob(blob.substr(0, blob.size() - 2));  // chops the subject ids
    REQUIRE_THROWS_WITH(load_dataset(path), Catch::Matchers::ContainsSubstring("subject ids"));

    write_blob(blob + "zz");
    REQUIRE_THROWS_WITH(load_dataset(path), Catch::Matchers::ContainsSubstring("trailing"));
    fs::remove(path);
}

// ---------------------------------------------------------------------------
// split planning
// ---------------------------------------------------------------------------

TEST_CASE("loso_splits: one fold per subject, each source set is the complement") {
    ShiftSpec spec{0.1, 0.0, 0.2, 3};
    CohortDataset d = generate_cohort(9, 1, 2, 16, 2, spec, 64.0f);
    SplitPlan plan = loso_splits(d);
    REQUIRE(plan.folds.size() == 9);
    for (const auto& f : plan.folds) {
        REQUIRE(f.target_subjects.size() == 1);
        REQUIRE(f.source_subjects.size() == 8);
    }
    validate_split_plan(plan, d);
}

TEST_CASE("logo_splits: 20 subjects in groups of 10 give two folds") {
    ShiftSpec spec{0.1, 0.0, 0.2, 4};
    CohortDataset d = generate_cohort(20, 1, 2, 16, 2, spec, 64.0f);
    SplitPlan plan = logo_splits(d, 10);
    REQUIRE(plan.folds.size() == 2);
    REQUIRE(plan.folds[0].target_subjects.size() == 10);
    REQUIRE(plan.folds[1].target_subjects.size() == 10);
    validate_split_plan(plan, d);
}

TEST_CASE("logo_splits: 123 subjects in groups of 10 leave a remainder fold of 3") {
    ShiftSpec spec{0.0, 0.0, 0.1, 5};
    CohortDataset d = generate_cohort(123, 1, 1, 8, 2, spec, 64.0f);
    SplitPlan plan = logo_splits(d, 10);
    REQUIRE(plan.folds.size() == 13);
    REQUIRE(plan.folds.back().target_subjects.size() == 3);
    validate_split_plan(plan, d);
}

TEST_CASE("splits: error paths and manifest") {
    ShiftSpec spec{0.0, 0.0, 0.1, 6};
    CohortDataset one = generate_cohort(1, 1, 2, 8, 2, spec, 64.0f);
    REQUIRE_THROWS(loso_splits(one));
    CohortDataset five = generate_cohort(5, 1, 2, 8, 2, spec, 64.0f);
    REQUIRE_THROWS(logo_splits(five, 5));  // no source subjects would remain
    REQUIRE_THROWS(logo_splits(five, 0));

    SplitPlan plan = logo_splits(five, 2);
    const std::string path = tmp_path("manifest.txt");
    write_split_manifest(plan, path);
    std::ifstream f(path);
    std::string first;
    std::getline(f, first);
    REQUIRE(first == "scheme=logo");
    fs::remove(path);
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

TEST_CASE("window: two non-overlapping 2 s windows from 4 s trials, labels duplicated") {
    ShiftSpec spec{0.2, 0.1, 0.4, 8};
    CohortDataset d = generate_cohort(2, 3, 3, 256, 2, spec, 64.0f);  // 4 s at 64 Hz
    CohortDataset w = preprocess(d, parse_pipeline("window(2,2)"));
    REQUIRE(w.num_samples() == d.num_samples() * 2);
    REQUIRE(w.T == 128);
    for (int i = 0; i < d.num_samples(); ++i) {
        REQUIRE(w.labels[2 * i] == d.labels[i]);
        REQUIRE(w.labels[2 * i + 1] == d.labels[i]);
        REQUIRE(w.subjects[2 * i] == d.subjects[i]);
        // first window is the first half of the original trial
        for (int c = 0; c < d.C; ++c)
            REQUIRE(std::memcmp(w.sample(2 * i) + c * 128, d.sample(i) + c * 256, 128 * sizeof(float)) ==
                    0);
    }
}

TEST_CASE("window: overlapping stride expands further; window longer than trial rejected") {
    ShiftSpec spec{0.0, 0.0, 0.3, 9};
    CohortDataset d = generate_cohort(2, 2, 2, 128, 2, spec, 64.0f);  // 2 s trials
    CohortDataset w = preprocess(d, parse_pipeline("window(1,0.5)"));
    REQUIRE(w.num_samples() == d.num_samples() * 3);  // starts at 0, 0.5, 1.0 s
    REQUIRE_THROWS_WITH(preprocess(d, parse_pipeline("window(3,1)")),
                        Catch::Matchers::ContainsSubstring("longer than trial"));
}

TEST_CASE("resample: 250 to 200 Hz keeps a 10 Hz sinusoid's dominant bin at 10 Hz") {
    CohortDataset d;
    d.C = 1;
    d.T = 1000;
    d.K = 2;
    d.sampling_rate = 250.0f;
    d.labels = {0};
    d.subjects = {0};
    d.samples.resize(1000);
    for (int t = 0; t < 1000; ++t)
        d.samples[t] = static_cast<float>(std::sin(2.0 * M_PI * 10.0 * t / 250.0));
    CohortDataset r = preprocess(d, parse_pipeline("resample(200)"));
    REQUIRE(r.sampling_rate == 200.0f);
    REQUIRE(r.T == 800);
    std::vector<double> y(r.T);
    for (int t = 0; t < r.T; ++t) y[t] = r.samples[t];
    auto mag = oracle::dft_magnitude(y);
    size_t peak = 1;
    for (size_t b = 1; b + 1 < mag.size(); ++b)
        if (mag[b] > mag[peak]) peak = b;
    const double peak_hz = static_cast<double>(peak) * 200.0 / r.T;
    const double bin_hz = 200.0 / r.T;
    REQUIRE(std::abs(peak_hz - 10.0) <= bin_hz + 1e-9);
}

TEST_CASE("resample: amplitude is preserved through the polyphase filter") {
    std::vector<double> x(500);
    for (size_t t = 0; t < x.size(); ++t) x[t] = std::sin(2.0 * M_PI * 8.0 * t / 250.0);
    auto y = dsp::resample_poly(x, 4, 5);
    double peak = 0.0;
    for (size_t t = 100; t + 100 < y.size(); ++t) peak = std::max(peak, std::abs(y[t]));
    REQUIRE(peak > 0.9);
    REQUIRE(peak < 1.1);
}

TEST_CASE("channel_select: 9 of 64 channels, order respected, bad index rejected") {
    ShiftSpec spec{0.0, 0.0, 0.2, 10};
    CohortDataset d = generate_cohort(2, 1, 64, 32, 2, spec, 64.0f);
    CohortDataset s = preprocess(d, parse_pipeline("channel_select(46,52,53,54,55,56,59,60,61)"));
    REQUIRE(s.C == 9);
    REQUIRE(s.num_samples() == d.num_samples());
    for (int i = 0; i < s.num_samples(); ++i)
        REQUIRE(std::memcmp(s.sample(i), d.sample(i) + 46 * 32, 32 * sizeof(float)) == 0);
    REQUIRE_THROWS_WITH(preprocess(d, parse_pipeline("channel_select(64)")),
                        Catch::Matchers::ContainsSubstring("out of range"));
}

TEST_CASE("zscore: per-channel mean 0 and unit variance per trial") {
    CohortDataset d = small_cohort(0.3, 1.0);
    CohortDataset z = preprocess(d, parse_pipeline("zscore"));
    for (int i = 0; i < z.num_samples(); ++i)
        for (int c = 0; c < z.C; ++c) {
            const float* ch = z.sample(i) + c * z.T;
            double mean = 0.0, var = 0.0;
            for (int t = 0; t < z.T; ++t) mean += ch[t];
            mean /= z.T;
            for (int t = 0; t < z.T; ++t) var += (ch[t] - mean) * (ch[t] - mean);
            var /= z.T;
            REQUIRE(std::abs(mean) < 1e-5);
            REQUIRE(std::abs(var - 1.0) < 1e-3);
        }
}

TEST_CASE("bandpass: passband preserved, stopband attenuated, zero phase") {
    const int T = 512;
    const double fs = 128.0;
    CohortDataset d;
    d.C = 1;
    d.T = T;
    d.K = 2;
    d.sampling_rate = static_cast<float>(fs);
    d.labels = {0};
    d.subjects = {0};
    d.samples.resize(T);

    SECTION("10 Hz tone survives a 6-20 Hz bandpass at unit gain and zero lag") {
        for (int t = 0; t < T; ++t)
            d.samples[t] = static_cast<float>(std::sin(2.0 * M_PI * 10.0 * t / fs));
        CohortDataset f = preprocess(d, parse_pipeline("bandpass(6,20)"));
        double num = 0.0, den = 0.0;
        for (int t = 100; t < T - 100; ++t) {
            num += f.samples[t] * d.samples[t];
            den += d.samples[t] * d.samples[t];
        }
        const double gain = num / den;
        REQUIRE(gain > 0.95);
        REQUIRE(gain < 1.05);
        double best = -1e9;
        int best_lag = -7;
        for (int lag = -6; lag <= 6; ++lag) {
            double c = 0.0;
            for (int t = 100; t < T - 100; ++t) c += f.samples[t + lag] * d.samples[t];
            if (c > best) {
                best = c;
                best_lag = lag;
            }
        }
        REQUIRE(best_lag == 0);
    }

    SECTION("45 Hz tone is crushed by a 6-20 Hz bandpass") {
        for (int t = 0; t < T; ++t)
            d.samples[t] = static_cast<float>(std::sin(2.0 * M_PI * 45.0 * t / fs));
        CohortDataset f = preprocess(d, parse_pipeline("bandpass(6,20)"));
        double peak = 0.0;
        for (int t = 100; t < T - 100; ++t)
            peak = std::max(peak, std::abs(static_cast<double>(f.samples[t])));
        REQUIRE(peak < 0.05);
    }

    SECTION("edges at or above Nyquist are rejected") {
        REQUIRE_THROWS_WITH(preprocess(d, parse_pipeline("bandpass(6,64)")),
                            Catch::Matchers::ContainsSubstring("Nyquist"));
        REQUIRE_THROWS(preprocess(d, parse_pipeline("bandpass(0,20)")));
        REQUIRE_THROWS(preprocess(d, parse_pipeline("bandpass(20,10)")));
    }
}

TEST_CASE("preprocess: ops apply in listed order and preserve alignment") {
    ShiftSpec spec{0.2, 0.1, 0.5, 11};
    CohortDataset d = generate_cohort(3, 2, 4, 256, 2, spec, 64.0f);
    CohortDataset out =
        preprocess(d, parse_pipeline("bandpass(4,20)|window(2,2)|channel_select(0,2)|zscore"));
    REQUIRE(out.C == 2);
    REQUIRE(out.T == 128);
    REQUIRE(out.num_samples() == d.num_samples() * 2);
    REQUIRE(out.labels.size() == out.subjects.size());
    validate_cohort(out);
}

TEST_CASE("parse_pipeline: rejects malformed specs") {
    REQUIRE_THROWS(parse_pipeline("bandpass(1)"));
    REQUIRE_THROWS(parse_pipeline("resample()"));
    REQUIRE_THROWS(parse_pipeline("window(2,2"));
    REQUIRE_THROWS(parse_pipeline("mystery(1,2)"));
    REQUIRE_THROWS(parse_pipeline("channel_select(1.5)"));
    REQUIRE_THROWS(parse_pipeline("zscore(3)"));
    REQUIRE(parse_pipeline("").empty());
    // round-trip through the printer
    auto ops = parse_pipeline("bandpass(4,20)|resample(200)|window(2,1)|channel_select(0,3)|zscore");
    REQUIRE(pipeline_to_string(ops) == "bandpass(4,20)|resample(200)|window(2,1)|channel_select(0,3)|zscore");
}

TEST_CASE("subset_by_subjects keeps arrays aligned") {
    CohortDataset d = small_cohort(0.3, 0.5);
    CohortDataset s = subset_by_subjects(d, {1});
    REQUIRE(s.num_samples() == 8);  // 4 trials x 2 classes
    for (int i = 0; i < s.num_samples(); ++i) REQUIRE(s.subjects[i] == 1);
    validate_cohort(s);
}
