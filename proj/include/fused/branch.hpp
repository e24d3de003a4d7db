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
#include <cstdint>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "fused/common.hpp"
#include "fused/hash.hpp"
#include "fused/nn.hpp"

namespace fused {

enum class Role : uint8_t { FM = 0, SM = 1 };
enum class View : uint8_t { Linear = 0, Prototype = 1 };
enum class Phase : uint8_t { Pretrain = 0, Adapt = 1 };

inline const char* role_name(Role r) { return r == Role::FM ? "fm" : "sm"; }

// Row-stochastic per-sample class probabilities for one view of one branch.
struct ProbBatch {
    Mat values;
    View view = View::Linear;
    Role branch_role = Role::FM;

    int num_samples() const { return values.rows; }
    int num_classes() const { return values.cols; }
};

// Checks the row-stochastic invariant; used by tests and debug paths.
inline bool probbatch_valid(const ProbBatch& p, double tol = 1e-6) {
    for (int i = 0; i < p.values.rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < p.values.cols; ++j) {
            const double x = p.values(i, j);
            if (!(x >= 0.0)) return false;
            s += x;
        }
        if (std::abs(s - 1.0) > tol) return false;
    }
    return true;
}

// One model arm: encoder + single affine classifier + trainability flags.
class Branch {
  public:
    Branch() = default;
    Branch(Role role, std::unique_ptr<Encoder> enc, int num_classes, Rng& rng)
        : role_(role), encoder_(std::move(enc)) {
        if (num_classes < 2) throw std::invalid_argument("Branch: num_classes must be >= 2");
        classifier_ = LinearClassifier(encoder_->feature_dim(), num_classes, rng);
    }

    Branch(const Branch& o)
        : role_(o.role_), encoder_(o.encoder_ ? o.encoder_->clone() : nullptr),
          classifier_(o.classifier_), encoder_trainable(o.encoder_trainable),
          classifier_trainable(o.classifier_trainable) {}
    Branch& operator=(const Branch& o) {
        if (this != &o) {
            role_ = o.role_;
            encoder_ = o.encoder_ ? o.encoder_->clone() : nullptr;
            classifier_ = o.classifier_;
            encoder_trainable = o.encoder_trainable;
            classifier_trainable = o.classifier_trainable;
        }
        return *this;
    }
    Branch(Branch&&) = default;
    Branch& operator=(Branch&&) = default;

    Role role() const { return role_; }
    int feature_dim() const { return encoder_->feature_dim(); }
    int num_classes() const { return classifier_.num_classes(); }
    int input_channels() const { return encoder_->input_channels(); }
    int input_timepoints() const { return encoder_->input_timepoints(); }
    Encoder& encoder() { return *encoder_; }
    const Encoder& encoder() const { return *encoder_; }
    LinearClassifier& classifier() { return classifier_; }
    const LinearClassifier& classifier() const { return classifier_; }

    bool encoder_trainable = true;
    bool classifier_trainable = true;

    // Batch is N x (C*T). cache=true retains activations for a backward pass.
    Mat encode(const Mat& batch, bool cache = false) {
        const int expect = encoder_->input_channels() * encoder_->input_timepoints();
        if (batch.cols != expect)
            throw std::invalid_argument(
                "encode: shape mismatch, expected C*T=" + std::to_string(expect) + " (C=" +
                std::to_string(encoder_->input_channels()) + ", T=" +
                std::to_string(encoder_->input_timepoints()) + "), got " + std::to_string(batch.cols));
        return encoder_->forward(batch, cache);
    }

    ProbBatch linear_view(const Mat& features, bool cache = false) {
        for (int i = 0; i < features.rows; ++i) {
            const double* fr = features.row(i);
            for (int j = 0; j < features.cols; ++j)
                if (!std::isfinite(fr[j]))
                    throw std::runtime_error("linear_view: non-finite feature in row " + std::to_string(i));
        }
        ProbBatch out;
        out.view = View::Linear;
        out.branch_role = role_;
        out.values = softmax_rows(classifier_.forward(features, cache));
        return out;
    }

    std::vector<ParamTensor*> encoder_params() { return encoder_->params(); }
    std::vector<ParamTensor*> classifier_params() { return classifier_.params(); }
    std::vector<ParamTensor*> trainable_params() {
        std::vector<ParamTensor*> out;
        if (encoder_trainable)
            for (auto* p : encoder_->params()) out.push_back(p);
        if (classifier_trainable)
            for (auto* p : classifier_.params()) out.push_back(p);
        return out;
    }
    std::vector<ParamTensor*> all_params() {
        std::vector<ParamTensor*> out = encoder_->params();
        for (auto* p : classifier_.params()) out.push_back(p);
        return out;
    }

    void zero_grads() {
        for (auto* p : all_params()) p->zero_grad();
    }

    std::string encoder_param_hash() const {
        Fnv1a h;
        for (auto* p : const_cast<Branch*>(this)->encoder_->params()) h.update_doubles(p->w);
        return h.hex();
    }
    std::string classifier_param_hash() const {
        Fnv1a h;
        h.update_doubles(classifier_.weights().w);
        h.update_doubles(classifier_.bias().w);
        return h.hex();
    }

  private:
    Role role_ = Role::FM;
    std::unique_ptr<Encoder> encoder_;
    LinearClassifier classifier_;
};

// Per-row argmax, ties broken by the lowest class index.
inline std::vector<int> predicted_label(const ProbBatch& p) {
    std::vector<int> out(p.values.rows);
    for (int i = 0; i < p.values.rows; ++i) out[i] = argmax_row(p.values.row(i), p.values.cols);
    return out;
}

// Pretrain: everything trainable. Adapt: only the FM classifier and the SM
// encoder update; the FM encoder and SM classifier stay frozen.
inline void set_phase_freezing(Branch& fm, Branch& sm, Phase phase) {
    if (phase == Phase::Pretrain) {
        fm.encoder_trainable = true;
        fm.classifier_trainable = true;
        sm.encoder_trainable = true;
        sm.classifier_trainable = true;
    } else {
        fm.encoder_trainable = false;
        fm.classifier_trainable = true;
        sm.encoder_trainable = true;
        sm.classifier_trainable = false;
    }
}

// -------------------------------------------------------------------------
// Checkpoints: single binary blob per branch with a version header.
// Layout (little-endian):
//   magic "FUSB", u32 version, u8 role, u8 encoder kind, u8 n_arch_dims,
//   arch dims (u32 each), u32 num_classes, u64 param count, f64 params
//   in canonical order (encoder params then classifier W, b).
// Trainability flags are phase state, not checkpoint content; loading leaves
// both groups trainable until set_phase_freezing is applied.
// -------------------------------------------------------------------------
namespace detail {

template <typename T>
void put_pod(std::string& buf, const T& x) {
    buf.append(reinterpret_cast<const char*>(&x), sizeof(T));
}

template <typename T>
T get_pod(const std::string& buf, size_t& off, const char* section) {
    if (off + sizeof(T) > buf.size())
        throw std::runtime_error(std::string("checkpoint: truncated while reading ") + section);
    T x;
    std::memcpy(&x, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return x;
}

}  // namespace detail

inline std::string serialize_branch(const Branch& br) {
    std::string buf;
    buf.append("FUSB");
    detail::put_pod<uint32_t>(buf, 1u);
    auto& b = const_cast<Branch&>(br);
    detail::put_pod<uint8_t>(buf, static_cast<uint8_t>(br.role()));
    detail::put_pod<uint8_t>(buf, static_cast<uint8_t>(b.encoder().kind()));
    auto dims = b.encoder().arch_dims();
    detail::put_pod<uint8_t>(buf, static_cast<uint8_t>(dims.size()));
    for (uint32_t d : dims) detail::put_pod<uint32_t>(buf, d);
    detail::put_pod<uint32_t>(buf, static_cast<uint32_t>(br.num_classes()));
    uint64_t count = 0;
    for (auto* p : b.all_params()) count += p->size();
    detail::put_pod<uint64_t>(buf, count);
    for (auto* p : b.all_params())
        buf.append(reinterpret_cast<const char*>(p->w.data()), p->w.size() * sizeof(double));
    return buf;
}

inline Branch deserialize_branch(const std::string& buf) {
    size_t off = 0;
    if (buf.size() < 4 || buf.compare(0, 4, "FUSB") != 0)
        throw std::runtime_error("checkpoint: bad magic");
    off = 4;
    const auto version = detail::get_pod<uint32_t>(buf, off, "version");
    if (version != 1u) throw std::runtime_error("checkpoint: unsupported version");
    const auto role = static_cast<Role>(detail::get_pod<uint8_t>(buf, off, "role"));
    const auto kind = detail::get_pod<uint8_t>(buf, off, "encoder kind");
    const auto ndims = detail::get_pod<uint8_t>(buf, off, "arch dims");
    std::vector<uint32_t> dims(ndims);
    for (auto& d : dims) d = detail::get_pod<uint32_t>(buf, off, "arch dims");
    const auto num_classes = detail::get_pod<uint32_t>(buf, off, "num_classes");

    Rng scratch(0);  // parameters are overwritten below
    std::unique_ptr<Encoder> enc;
    if (kind == 0) {
        if (dims.size() != 5) throw std::runtime_error("checkpoint: bad mlp arch dims");
        enc = std::make_unique<MlpEncoder>(dims[0], dims[1], dims[2], dims[3], dims[4], scratch);
    } else if (kind == 1) {
        if (dims.size() != 6) throw std::runtime_error("checkpoint: bad conv arch dims");
        enc = std::make_unique<ConvEncoder>(dims[0], dims[1], dims[2], dims[3], dims[4], dims[5], scratch);
    } else {
        throw std::runtime_error("checkpoint: unknown encoder kind");
    }
    Branch br(role, std::move(enc), static_cast<int>(num_classes), scratch);

    const auto count = detail::get_pod<uint64_t>(buf, off, "param count");
    uint64_t expect = 0;
    for (auto* p : br.all_params()) expect += p->size();
    if (count != expect) throw std::runtime_error("checkpoint: parameter count mismatch");
    for (auto* p : br.all_params()) {
        const size_t bytes = p->size() * sizeof(double);
        if (off + bytes > buf.size()) throw std::runtime_error("checkpoint: truncated while reading parameters");
        std::memcpy(p->w.data(), buf.data() + off, bytes);
        off += bytes;
    }
    return br;
}

inline std::string save_branch_checkpoint(const Branch& br, const std::string& path) {
    const std::string blob = serialize_branch(br);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
    return hash_string_hex(blob);
}

inline Branch load_branch_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_branch(blob);
}

}  // namespace fused
