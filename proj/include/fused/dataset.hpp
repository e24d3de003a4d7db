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
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "fused/common.hpp"
#include "fused/rng.hpp"

namespace fused {

enum class Provenance : uint8_t { Synthetic = 0, Imported = 1 };

// Multi-subject labeled sample store. Samples are N x C x T row-major float32.
struct CohortDataset {
    int C = 0, T = 0, K = 0;
    float sampling_rate = 0.0f;
    std::vector<float> samples;
    std::vector<int32_t> labels;
    std::vector<int32_t> subjects;
    Provenance provenance = Provenance::Synthetic;

    int num_samples() const { return static_cast<int>(labels.size()); }
    size_t sample_stride() const { return static_cast<size_t>(C) * T; }
    const float* sample(int i) const { return samples.data() + sample_stride() * i; }
    float* sample(int i) { return samples.data() + sample_stride() * i; }

    std::vector<int32_t> subject_ids() const {
        std::set<int32_t> s(subjects.begin(), subjects.end());
        return {s.begin(), s.end()};
    }
};

inline void validate_cohort(const CohortDataset& d) {
    if (d.samples.size() != d.sample_stride() * d.labels.size() || d.labels.size() != d.subjects.size())
        throw std::runtime_error("cohort: array lengths disagree");
    for (float x : d.samples)
        if (!std::isfinite(x)) throw std::runtime_error("cohort: non-finite sample value");
    for (int32_t y : d.labels)
        if (y < 0 || y >= d.K) throw std::runtime_error("cohort: label out of range");
}

// Controls the synthetic inter-subject shift.
struct ShiftSpec {
    double mixing_severity = 0.0;  // off-diagonal mass of the channel-mixing matrix
    double amplitude_jitter = 0.0;
    double noise_sigma = 0.0;
    uint64_t seed = 0;
};

// Class templates are fixed spatial-spectral patterns over a small rhythm
// bank; they depend only on (K, C) and an internal constant seed, never on
// ShiftSpec, so severity 0 / noise 0 reproduces identical trials everywhere.
// All classes share one base topography and differ by small deviations around
// it: separable within a subject, but close enough that per-subject channel
// mixing genuinely moves decision boundaries.
namespace detail {
inline constexpr uint64_t kTemplateSeed = 0x7e3a11c5u;
inline constexpr int kNumRhythms = 3;
inline const double kRhythmHz[kNumRhythms] = {5.0, 9.0, 13.0};
inline constexpr double kClassDeviation = 0.4;
inline constexpr double kMixSpread = 4.0;  // scale of R_s entries relative to severity
}  // namespace detail

// Subject s mixes channels with (I + severity * R_s); each trial adds a
// per-trial amplitude jitter and white Gaussian noise.
inline CohortDataset generate_cohort(int n_subjects, int trials_per_class, int C, int T, int K,
                                     const ShiftSpec& spec, float sampling_rate = 128.0f) {
    if (n_subjects < 1 || trials_per_class < 1 || C < 1 || T < 1 || K < 2)
        throw std::invalid_argument("generate_cohort: invalid dims (need subjects, trials, C, T >= 1 and K >= 2)");
    if (!(sampling_rate > 0.0f)) throw std::invalid_argument("generate_cohort: sampling_rate must be positive");

    using detail::kNumRhythms;
    using detail::kRhythmHz;

    // shared base topography, then per-class deviations around it
    Rng trng(detail::kTemplateSeed);
    std::vector<double> base_amp(static_cast<size_t>(C) * kNumRhythms);
    std::vector<double> base_phase(base_amp.size());
    for (size_t i = 0; i < base_amp.size(); ++i) {
        base_amp[i] = trng.uniform(0.4, 1.0);
        base_phase[i] = trng.uniform(0.0, 2.0 * M_PI);
    }
    std::vector<double> amp(static_cast<size_t>(K) * C * kNumRhythms);
    std::vector<double> phase(amp.size());
    for (int k = 0; k < K; ++k)
        for (size_t i = 0; i < base_amp.size(); ++i) {
            const size_t idx = static_cast<size_t>(k) * base_amp.size() + i;
            amp[idx] = base_amp[i] * (1.0 + detail::kClassDeviation * trng.gaussian());
            phase[idx] = base_phase[i] + detail::kClassDeviation * trng.gaussian();
        }
    // class template waveforms, C x T each
    std::vector<double> templates(static_cast<size_t>(K) * C * T);
    for (int k = 0; k < K; ++k)
        for (int c = 0; c < C; ++c) {
            double* row = templates.data() + (static_cast<size_t>(k) * C + c) * T;
            for (int r = 0; r < kNumRhythms; ++r) {
                const size_t idx = (static_cast<size_t>(k) * C + c) * kNumRhythms + r;
                const double w = 2.0 * M_PI * kRhythmHz[r] / sampling_rate;
                for (int t = 0; t < T; ++t) row[t] += amp[idx] * std::sin(w * t + phase[idx]);
            }
        }

    CohortDataset d;
    d.C = C;
    d.T = T;
    d.K = K;
    d.sampling_rate = sampling_rate;
    d.provenance = Provenance::Synthetic;
    const int N = n_subjects * K * trials_per_class;
    d.samples.resize(static_cast<size_t>(N) * C * T);
    d.labels.resize(N);
    d.subjects.resize(N);

    std::vector<double> mix(static_cast<size_t>(C) * C);
    std::vector<double> mixed(static_cast<size_t>(C) * T);
    int n = 0;
    for (int s = 0; s < n_subjects; ++s) {
        Rng srng(derive_seed(spec.seed, 1000 + static_cast<uint64_t>(s)));
        // R_s: zero diagonal, rows normalized so that every subject carries
        // exactly the requested off-diagonal mass (direction random, size not)
        for (int i = 0; i < C; ++i) {
            double norm = 0.0;
            for (int j = 0; j < C; ++j) {
                const double g = (i == j || C == 1) ? 0.0 : srng.gaussian();
                mix[static_cast<size_t>(i) * C + j] = g;
                norm += g * g;
            }
            norm = std::sqrt(norm);
            const double scale = norm > 1e-12 ? detail::kMixSpread * spec.mixing_severity / norm : 0.0;
            for (int j = 0; j < C; ++j) {
                double& m = mix[static_cast<size_t>(i) * C + j];
                m = (i == j ? 1.0 : 0.0) + m * scale;
            }
        }
        for (int k = 0; k < K; ++k) {
            const double* tmpl = templates.data() + static_cast<size_t>(k) * C * T;
            for (int trial = 0; trial < trials_per_class; ++trial, ++n) {
                for (int i = 0; i < C; ++i) {
                    double* mrow = mixed.data() + static_cast<size_t>(i) * T;
                    std::fill(mrow, mrow + T, 0.0);
                    for (int j = 0; j < C; ++j) {
                        const double m = mix[static_cast<size_t>(i) * C + j];
                        if (m == 0.0) continue;
                        const double* trow = tmpl + static_cast<size_t>(j) * T;
                        for (int t = 0; t < T; ++t) mrow[t] += m * trow[t];
                    }
                }
                const double scale = 1.0 + spec.amplitude_jitter * srng.uniform(-1.0, 1.0);
                float* out = d.sample(n);
                for (int i = 0; i < C * T; ++i) {
                    double x = scale * mixed[i];
                    if (spec.noise_sigma > 0.0) x += spec.noise_sigma * srng.gaussian();
                    out[i] = static_cast<float>(x);
                }
                d.labels[n] = k;
                d.subjects[n] = s;
            }
        }
    }
    return d;
}

// -------------------------------------------------------------------------
// File format (little-endian): magic "FUSD", u32 version=1, u32 N, u32 C,
// u32 T, u32 K, f32 sampling_rate, N*C*T f32 samples row-major, N i32
// labels, N i32 subject ids.
// -------------------------------------------------------------------------
inline void save_dataset(const CohortDataset& d, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_dataset: cannot open " + path);
    auto put = [&f](const void* p, size_t n) { f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); };
    put("FUSD", 4);
    const uint32_t version = 1, N = static_cast<uint32_t>(d.num_samples()), C = d.C, T = d.T, K = d.K;
    put(&version, 4);
    put(&N, 4);
    put(&C, 4);
    put(&T, 4);
    put(&K, 4);
    put(&d.sampling_rate, 4);
    if (!d.samples.empty()) put(d.samples.data(), d.samples.size() * sizeof(float));
    if (!d.labels.empty()) put(d.labels.data(), d.labels.size() * sizeof(int32_t));
    if (!d.subjects.empty()) put(d.subjects.data(), d.subjects.size() * sizeof(int32_t));
    if (!f) throw std::runtime_error("save_dataset: write failed for " + path);
}

inline CohortDataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_dataset: cannot open " + path);
    auto need = [&f, &path](void* p, size_t n, const char* section) {
        f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<size_t>(f.gcount()) != n)
            throw std::runtime_error("load_dataset: " + path + " truncated while reading " + section);
    };
    char magic[4];
    need(magic, 4, "magic");
    if (std::memcmp(magic, "FUSD", 4) != 0) throw std::runtime_error("load_dataset: bad magic in " + path);
    uint32_t version = 0, N = 0, C = 0, T = 0, K = 0;
    need(&version, 4, "version");
    if (version != 1) throw std::runtime_error("load_dataset: unsupported version in " + path);
    need(&N, 4, "header");
    need(&C, 4, "header");
    need(&T, 4, "header");
    need(&K, 4, "header");
    CohortDataset d;
    d.C = static_cast<int>(C);
    d.T = static_cast<int>(T);
    d.K = static_cast<int>(K);
    need(&d.sampling_rate, 4, "header");
    d.provenance = Provenance::Imported;
    d.samples.resize(static_cast<size_t>(N) * C * T);
    d.labels.resize(N);
    d.subjects.resize(N);
    if (N > 0) {
        need(d.samples.data(), d.samples.size() * sizeof(float), "samples");
        need(d.labels.data(), d.labels.size() * sizeof(int32_t), "labels");
        need(d.subjects.data(), d.subjects.size() * sizeof(int32_t), "subject ids");
    }
    // trailing garbage is also a malformed file
    char extra;
    f.read(&extra, 1);
    if (f.gcount() != 0) throw std::runtime_error("load_dataset: trailing bytes after subject ids in " + path);
    validate_cohort(d);
    return d;
}

inline CohortDataset subset_by_subjects(const CohortDataset& d, const std::vector<int32_t>& ids) {
    std::set<int32_t> keep(ids.begin(), ids.end());
    CohortDataset out;
    out.C = d.C;
    out.T = d.T;
    out.K = d.K;
    out.sampling_rate = d.sampling_rate;
    out.provenance = d.provenance;
    for (int i = 0; i < d.num_samples(); ++i) {
        if (!keep.count(d.subjects[i])) continue;
        const float* s = d.sample(i);
        out.samples.insert(out.samples.end(), s, s + d.sample_stride());
        out.labels.push_back(d.labels[i]);
        out.subjects.push_back(d.subjects[i]);
    }
    return out;
}

// Model input: N x (C*T) doubles.
inline Mat cohort_to_matrix(const CohortDataset& d) {
    Mat m(d.num_samples(), static_cast<int>(d.sample_stride()));
    for (size_t i = 0; i < m.v.size(); ++i) m.v[i] = static_cast<double>(d.samples[i]);
    return m;
}

inline Mat rows_of(const Mat& m, const std::vector<int>& idx) {
    Mat out(static_cast<int>(idx.size()), m.cols);
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy(m.row(idx[i]), m.row(idx[i]) + m.cols, out.row(static_cast<int>(i)));
    return out;
}

}  // namespace fused
