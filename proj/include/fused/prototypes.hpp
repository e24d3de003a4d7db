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
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fused/branch.hpp"
#include "fused/common.hpp"

namespace fused {

// Per-branch class centroids with EMA state. Centroid rows stay unit-norm.
struct PrototypeBank {
    Mat centroids;                 // K x D
    double momentum = 0.9;         // mu
    double margin_threshold = 0.6; // eta
    double temperature = 10.0;     // tau
    Role owner_role = Role::FM;

    int num_classes() const { return centroids.rows; }
    int feature_dim() const { return centroids.cols; }
};

// Centroids start as the l2-normalized classifier weight rows; bias ignored.
inline PrototypeBank init_from_classifier(const Branch& branch, double momentum = 0.9,
                                          double margin_threshold = 0.6, double temperature = 10.0) {
    const auto& W = branch.classifier().weights();
    const int K = branch.num_classes();
    const int D = branch.feature_dim();
    PrototypeBank bank;
    bank.centroids = Mat(K, D);
    bank.momentum = momentum;
    bank.margin_threshold = margin_threshold;
    bank.temperature = temperature;
    bank.owner_role = branch.role();
    for (int k = 0; k < K; ++k) {
        const double* wr = W.w.data() + static_cast<size_t>(k) * D;
        const double n = l2_norm(wr, D);
        if (n < 1e-12)
            throw std::runtime_error("init_from_classifier: degenerate classifier, zero-norm weight row " +
                                     std::to_string(k));
        double* cr = bank.centroids.row(k);
        for (int d = 0; d < D; ++d) cr[d] = wr[d] / n;
    }
    return bank;
}

// Gap between the top-1 and top-2 probabilities of each row.
inline std::vector<double> margin(const ProbBatch& p) {
    if (p.values.cols < 2) throw std::invalid_argument("margin: needs K >= 2");
    std::vector<double> out(p.values.rows);
    for (int i = 0; i < p.values.rows; ++i) {
        const double* r = p.values.row(i);
        double top1 = -1.0, top2 = -1.0;
        for (int j = 0; j < p.values.cols; ++j) {
            if (r[j] > top1) {
                top2 = top1;
                top1 = r[j];
            } else if (r[j] > top2) {
                top2 = r[j];
            }
        }
        out[i] = top1 - top2;
    }
    return out;
}

// Rows normalized to unit l2 norm. Zero-norm rows raise with the row index.
inline Mat l2_normalize_rows(const Mat& features, const char* who = "l2_normalize_rows") {
    Mat out(features.rows, features.cols);
    for (int i = 0; i < features.rows; ++i) {
        const double* fr = features.row(i);
        const double n = l2_norm(fr, features.cols);
        if (n < 1e-12)
            throw std::runtime_error(std::string(who) + ": zero-norm feature row " + std::to_string(i));
        double* orow = out.row(i);
        for (int d = 0; d < features.cols; ++d) orow[d] = fr[d] / n;
    }
    return out;
}

// EMA refinement. Features arrive raw and are l2-normalized here; labels and
// margins come from the owning branch's own linear view. Only classes with at
// least one sample whose margin exceeds eta move; moved rows are renormalized.
// Returns the number of samples that contributed.
inline size_t ema_update(PrototypeBank& bank, const Mat& features, const std::vector<int>& labels,
                         const std::vector<double>& margins) {
    const int K = bank.num_classes();
    const int D = bank.feature_dim();
    if (features.cols != D) throw std::invalid_argument("ema_update: feature dim mismatch");
    if (labels.size() != static_cast<size_t>(features.rows) || margins.size() != labels.size())
        throw std::invalid_argument("ema_update: length mismatch");

    Mat zbar = l2_normalize_rows(features, "ema_update");
    std::vector<double> sum(static_cast<size_t>(K) * D, 0.0);
    std::vector<int> count(K, 0);
    size_t contributed = 0;
    for (int i = 0; i < features.rows; ++i) {
        if (!(margins[i] > bank.margin_threshold)) continue;
        const int k = labels[i];
        if (k < 0 || k >= K) throw std::invalid_argument("ema_update: label out of range");
        const double* zr = zbar.row(i);
        double* sr = sum.data() + static_cast<size_t>(k) * D;
        for (int d = 0; d < D; ++d) sr[d] += zr[d];
        ++count[k];
        ++contributed;
    }
    const double mu = bank.momentum;
    for (int k = 0; k < K; ++k) {
        if (count[k] == 0) continue;  // defined no-op for this class
        double* cr = bank.centroids.row(k);
        const double* sr = sum.data() + static_cast<size_t>(k) * D;
        for (int d = 0; d < D; ++d) cr[d] = mu * cr[d] + (1.0 - mu) * (sr[d] / count[k]);
        const double n = l2_norm(cr, D);
        if (n < 1e-12) continue;  // cancelling update; keep the stale direction
        for (int d = 0; d < D; ++d) cr[d] /= n;
    }
    return contributed;
}

// Cosine similarity of each normalized feature row against every centroid.
// Centroids are unit-norm, so this is a plain inner product after row norm.
inline Mat cosine_similarities(const PrototypeBank& bank, const Mat& features) {
    if (features.cols != bank.feature_dim())
        throw std::invalid_argument("cosine_similarities: feature dim mismatch");
    Mat zbar = l2_normalize_rows(features, "prototype_view");
    return matmul_tB(zbar, bank.centroids);
}

// Softmax over tau-scaled cosine similarities.
inline ProbBatch prototype_view(const PrototypeBank& bank, const Mat& features) {
    Mat sims = cosine_similarities(bank, features);
    for (auto& x : sims.v) x *= bank.temperature;
    ProbBatch out;
    out.view = View::Prototype;
    out.branch_role = bank.owner_role;
    out.values = softmax_rows(sims);
    return out;
}

inline void write_centroids_csv(const PrototypeBank& bank, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_centroids_csv: cannot open " + path);
    f << "class";
    for (int d = 0; d < bank.feature_dim(); ++d) f << ",c" << d;
    f << "\n";
    for (int k = 0; k < bank.num_classes(); ++k) {
        f << k;
        for (int d = 0; d < bank.feature_dim(); ++d) f << "," << fmt_double(bank.centroids(k, d));
        f << "\n";
    }
}

// Bank blob appended next to branch checkpoints.
inline std::string serialize_bank(const PrototypeBank& bank) {
    std::string buf;
    buf.append("FUSP");
    detail::put_pod<uint32_t>(buf, 1u);
    detail::put_pod<uint8_t>(buf, static_cast<uint8_t>(bank.owner_role));
    detail::put_pod<uint32_t>(buf, static_cast<uint32_t>(bank.num_classes()));
    detail::put_pod<uint32_t>(buf, static_cast<uint32_t>(bank.feature_dim()));
    detail::put_pod<double>(buf, bank.momentum);
    detail::put_pod<double>(buf, bank.margin_threshold);
    detail::put_pod<double>(buf, bank.temperature);
    buf.append(reinterpret_cast<const char*>(bank.centroids.v.data()),
               bank.centroids.v.size() * sizeof(double));
    return buf;
}

inline PrototypeBank deserialize_bank(const std::string& buf) {
    if (buf.size() < 4 || buf.compare(0, 4, "FUSP") != 0) throw std::runtime_error("bank: bad magic");
    size_t off = 4;
    const auto version = detail::get_pod<uint32_t>(buf, off, "version");
    if (version != 1u) throw std::runtime_error("bank: unsupported version");
    PrototypeBank bank;
    bank.owner_role = static_cast<Role>(detail::get_pod<uint8_t>(buf, off, "role"));
    const auto K = detail::get_pod<uint32_t>(buf, off, "K");
    const auto D = detail::get_pod<uint32_t>(buf, off, "D");
    bank.momentum = detail::get_pod<double>(buf, off, "momentum");
    bank.margin_threshold = detail::get_pod<double>(buf, off, "margin threshold");
    bank.temperature = detail::get_pod<double>(buf, off, "temperature");
    bank.centroids = Mat(static_cast<int>(K), static_cast<int>(D));
    const size_t bytes = bank.centroids.v.size() * sizeof(double);
    if (off + bytes > buf.size()) throw std::runtime_error("bank: truncated while reading centroids");
    std::memcpy(bank.centroids.v.data(), buf.data() + off, bytes);
    return bank;
}

inline std::string save_bank(const PrototypeBank& bank, const std::string& path) {
    const std::string blob = serialize_bank(bank);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("bank: cannot open " + path + " for writing");
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    return hash_string_hex(blob);
}

inline PrototypeBank load_bank(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("bank: cannot open " + path);
    std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_bank(blob);
}

}  // namespace fused
