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
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "fused/common.hpp"
#include "fused/rng.hpp"

namespace fused {

// One named parameter block with its gradient accumulator.
struct ParamTensor {
    std::string name;
    std::vector<double> w;
    std::vector<double> g;

    ParamTensor() = default;
    ParamTensor(std::string n, size_t count) : name(std::move(n)), w(count, 0.0), g(count, 0.0) {}
    size_t size() const { return w.size(); }
    void zero_grad() { std::fill(g.begin(), g.end(), 0.0); }
};

inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
// Derivative recovered from the activation value: elu' = 1 for x>0, elu+1 otherwise.
inline double elu_grad_from_value(double a) { return a > 0.0 ? 1.0 : a + 1.0; }

inline void init_uniform(ParamTensor& p, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : p.w) x = rng.uniform(-bound, bound);
}

// -------------------------------------------------------------------------
// Encoder interface. forward() takes a batch of flattened C*T samples and
// yields N x D features; backward() consumes dL/dfeatures and accumulates
// parameter gradients from the cached activations of the last forward.
// -------------------------------------------------------------------------
class Encoder {
  public:
    virtual ~Encoder() = default;
    virtual int input_channels() const = 0;
    virtual int input_timepoints() const = 0;
    virtual int feature_dim() const = 0;
    virtual Mat forward(const Mat& x, bool cache) = 0;
    virtual void backward(const Mat& dfeat) = 0;
    virtual std::vector<ParamTensor*> params() = 0;
    virtual std::unique_ptr<Encoder> clone() const = 0;
    virtual uint32_t kind() const = 0;
    virtual std::vector<uint32_t> arch_dims() const = 0;
};

// -------------------------------------------------------------------------
// Wide multi-layer encoder: flatten -> dense -> ELU -> dense -> ELU ->
// linear projection head. Stands in for a large pretrained backbone.
// -------------------------------------------------------------------------
class MlpEncoder : public Encoder {
  public:
    MlpEncoder(int C, int T, int hidden1, int hidden2, int out_dim, Rng& rng)
        : C_(C), T_(T), h1_(hidden1), h2_(hidden2), d_(out_dim),
          W1_("enc.W1", static_cast<size_t>(hidden1) * C * T), b1_("enc.b1", hidden1),
          W2_("enc.W2", static_cast<size_t>(hidden2) * hidden1), b2_("enc.b2", hidden2),
          W3_("enc.W3", static_cast<size_t>(out_dim) * hidden2), b3_("enc.b3", out_dim) {
        if (C < 1 || T < 1 || hidden1 < 1 || hidden2 < 1 || out_dim < 1)
            throw std::invalid_argument("MlpEncoder: dims must be positive");
        init_uniform(W1_, C * T, rng);
        init_uniform(W2_, hidden1, rng);
        init_uniform(W3_, hidden2, rng);
    }

    int input_channels() const override { return C_; }
    int input_timepoints() const override { return T_; }
    int feature_dim() const override { return d_; }

    Mat forward(const Mat& x, bool cache) override {
        Mat a1 = affine(x, W1_, b1_, h1_);
        elu_inplace(a1);
        Mat a2 = affine(a1, W2_, b2_, h2_);
        elu_inplace(a2);
        Mat f = affine(a2, W3_, b3_, d_);
        if (cache) {
            x_ = x;
            a1_ = a1;
            a2_ = a2;
        }
        return f;
    }

    void backward(const Mat& dfeat) override {
        // projection head
        accumulate_affine(a2_, dfeat, W3_, b3_);
        Mat da2 = matmul_reshaped(dfeat, W3_, d_, h2_);
        elu_backward_inplace(da2, a2_);
        accumulate_affine(a1_, da2, W2_, b2_);
        Mat da1 = matmul_reshaped(da2, W2_, h2_, h1_);
        elu_backward_inplace(da1, a1_);
        accumulate_affine(x_, da1, W1_, b1_);
    }

    std::vector<ParamTensor*> params() override { return {&W1_, &b1_, &W2_, &b2_, &W3_, &b3_}; }

    std::unique_ptr<Encoder> clone() const override { return std::make_unique<MlpEncoder>(*this); }
    uint32_t kind() const override { return 0; }
    std::vector<uint32_t> arch_dims() const override {
        return {static_cast<uint32_t>(C_), static_cast<uint32_t>(T_), static_cast<uint32_t>(h1_),
                static_cast<uint32_t>(h2_), static_cast<uint32_t>(d_)};
    }

  private:
    // y = x * W^T + b where W is out x in (flattened).
    static Mat affine(const Mat& x, const ParamTensor& W, const ParamTensor& b, int out) {
        const int in = x.cols;
        Mat y(x.rows, out);
        for (int i = 0; i < x.rows; ++i) {
            const double* xr = x.row(i);
            double* yr = y.row(i);
            for (int o = 0; o < out; ++o) {
                const double* wr = W.w.data() + static_cast<size_t>(o) * in;
                double s = b.w[o];
                for (int k = 0; k < in; ++k) s += wr[k] * xr[k];
                yr[o] = s;
            }
        }
        return y;
    }

    static void accumulate_affine(const Mat& x, const Mat& dy, ParamTensor& W, ParamTensor& b) {
        const int in = x.cols, out = dy.cols;
        for (int i = 0; i < x.rows; ++i) {
            const double* xr = x.row(i);
            const double* dr = dy.row(i);
            for (int o = 0; o < out; ++o) {
                const double d = dr[o];
                if (d == 0.0) continue;
                double* wg = W.g.data() + static_cast<size_t>(o) * in;
                for (int k = 0; k < in; ++k) wg[k] += d * xr[k];
                b.g[o] += d;
            }
        }
    }

    // dx = dy * W with W viewed as out x in.
    static Mat matmul_reshaped(const Mat& dy, const ParamTensor& W, int out, int in) {
        Mat dx(dy.rows, in);
        for (int i = 0; i < dy.rows; ++i) {
            const double* dr = dy.row(i);
            double* xr = dx.row(i);
            for (int o = 0; o < out; ++o) {
                const double d = dr[o];
                if (d == 0.0) continue;
                const double* wr = W.w.data() + static_cast<size_t>(o) * in;
                for (int k = 0; k < in; ++k) xr[k] += d * wr[k];
            }
        }
        return dx;
    }

    static void elu_inplace(Mat& m) {
        for (auto& x : m.v) x = elu(x);
    }
    static void elu_backward_inplace(Mat& grad, const Mat& act) {
        for (size_t i = 0; i < grad.v.size(); ++i) grad.v[i] *= elu_grad_from_value(act.v[i]);
    }

    int C_, T_, h1_, h2_, d_;
    ParamTensor W1_, b1_, W2_, b2_, W3_, b3_;
    Mat x_, a1_, a2_;
};

// -------------------------------------------------------------------------
// Compact temporal-then-spatial convolutional encoder. A shared bank of
// temporal kernels filters each channel, a per-filter channel mix collapses
// the spatial axis, then ELU, mean pooling, and a dense head.
// -------------------------------------------------------------------------
class ConvEncoder : public Encoder {
  public:
    ConvEncoder(int C, int T, int filters, int kernel, int pool, int out_dim, Rng& rng)
        : C_(C), T_(T), f1_(filters), kt_(kernel), pool_(pool), d_(out_dim),
          Wt_("enc.Wt", static_cast<size_t>(filters) * kernel), bt_("enc.bt", filters),
          Ws_("enc.Ws", static_cast<size_t>(filters) * C), bs_("enc.bs", filters) {
        if (C < 1 || T < 1 || filters < 1 || kernel < 1 || pool < 1 || out_dim < 1)
            throw std::invalid_argument("ConvEncoder: dims must be positive");
        if (kernel > T) throw std::invalid_argument("ConvEncoder: kernel longer than input");
        t1_ = T - kernel + 1;
        t2_ = t1_ / pool;
        if (t2_ < 1) throw std::invalid_argument("ConvEncoder: pooling leaves no timepoints");
        flat_ = f1_ * t2_;
        Wd_ = ParamTensor("enc.Wd", static_cast<size_t>(out_dim) * flat_);
        bd_ = ParamTensor("enc.bd", out_dim);
        init_uniform(Wt_, kernel, rng);
        init_uniform(Ws_, C, rng);
        init_uniform(Wd_, flat_, rng);
    }

    int input_channels() const override { return C_; }
    int input_timepoints() const override { return T_; }
    int feature_dim() const override { return d_; }

    Mat forward(const Mat& x, bool cache) override {
        const int N = x.rows;
        Mat h1(N, f1_ * C_ * t1_);
        Mat act(N, f1_ * t1_);
        Mat pooled(N, flat_);
        for (int n = 0; n < N; ++n) {
            const double* xr = x.row(n);
            double* h1r = h1.row(n);
            double* ar = act.row(n);
            double* pr = pooled.row(n);
            for (int f = 0; f < f1_; ++f) {
                const double* wt = Wt_.w.data() + static_cast<size_t>(f) * kt_;
                const double* ws = Ws_.w.data() + static_cast<size_t>(f) * C_;
                double* hf = h1r + static_cast<size_t>(f) * C_ * t1_;
                for (int c = 0; c < C_; ++c) {
                    const double* xc = xr + static_cast<size_t>(c) * T_;
                    double* hc = hf + static_cast<size_t>(c) * t1_;
                    for (int t = 0; t < t1_; ++t) {
                        double s = bt_.w[f];
                        for (int u = 0; u < kt_; ++u) s += wt[u] * xc[t + u];
                        hc[t] = s;
                    }
                }
                double* af = ar + static_cast<size_t>(f) * t1_;
                for (int t = 0; t < t1_; ++t) {
                    double s = bs_.w[f];
                    for (int c = 0; c < C_; ++c) s += ws[c] * hf[static_cast<size_t>(c) * t1_ + t];
                    af[t] = elu(s);
                }
                double* pf = pr + static_cast<size_t>(f) * t2_;
                for (int t2 = 0; t2 < t2_; ++t2) {
                    double s = 0.0;
                    for (int j = 0; j < pool_; ++j) s += af[t2 * pool_ + j];
                    pf[t2] = s / pool_;
                }
            }
        }
        Mat feat(N, d_);
        for (int n = 0; n < N; ++n) {
            const double* pr = pooled.row(n);
            double* fr = feat.row(n);
            for (int o = 0; o < d_; ++o) {
                const double* wr = Wd_.w.data() + static_cast<size_t>(o) * flat_;
                double s = bd_.w[o];
                for (int k = 0; k < flat_; ++k) s += wr[k] * pr[k];
                fr[o] = s;
            }
        }
        if (cache) {
            x_ = x;
            h1_ = std::move(h1);
            act_ = std::move(act);
            pooled_ = std::move(pooled);
        }
        return feat;
    }

    void backward(const Mat& dfeat) override {
        const int N = dfeat.rows;
        Mat dpooled(N, flat_);
        for (int n = 0; n < N; ++n) {
            const double* dr = dfeat.row(n);
            const double* pr = pooled_.row(n);
            double* dp = dpooled.row(n);
            for (int o = 0; o < d_; ++o) {
                const double d = dr[o];
                if (d == 0.0) continue;
                double* wg = Wd_.g.data() + static_cast<size_t>(o) * flat_;
                const double* wr = Wd_.w.data() + static_cast<size_t>(o) * flat_;
                for (int k = 0; k < flat_; ++k) {
                    wg[k] += d * pr[k];
                    dp[k] += d * wr[k];
                }
                bd_.g[o] += d;
            }
        }
        const double inv_pool = 1.0 / pool_;
        for (int n = 0; n < N; ++n) {
            const double* dp = dpooled.row(n);
            const double* ar = act_.row(n);
            const double* h1r = h1_.row(n);
            const double* xr = x_.row(n);
            for (int f = 0; f < f1_; ++f) {
                const double* af = ar + static_cast<size_t>(f) * t1_;
                const double* hf = h1r + static_cast<size_t>(f) * C_ * t1_;
                const double* ws = Ws_.w.data() + static_cast<size_t>(f) * C_;
                double* wsg = Ws_.g.data() + static_cast<size_t>(f) * C_;
                double* wtg = Wt_.g.data() + static_cast<size_t>(f) * kt_;
                for (int t2 = 0; t2 < t2_; ++t2) {
                    const double dpv = dp[static_cast<size_t>(f) * t2_ + t2] * inv_pool;
                    if (dpv == 0.0) continue;
                    for (int j = 0; j < pool_; ++j) {
                        const int t = t2 * pool_ + j;
                        const double ds = dpv * elu_grad_from_value(af[t]);
                        bs_.g[f] += ds;
                        for (int c = 0; c < C_; ++c) {
                            wsg[c] += ds * hf[static_cast<size_t>(c) * t1_ + t];
                            const double dh = ds * ws[c];
                            bt_.g[f] += dh;
                            const double* xc = xr + static_cast<size_t>(c) * T_;
                            for (int u = 0; u < kt_; ++u) wtg[u] += dh * xc[t + u];
                        }
                    }
                }
            }
        }
    }

    std::vector<ParamTensor*> params() override { return {&Wt_, &bt_, &Ws_, &bs_, &Wd_, &bd_}; }

    std::unique_ptr<Encoder> clone() const override { return std::make_unique<ConvEncoder>(*this); }
    uint32_t kind() const override { return 1; }
    std::vector<uint32_t> arch_dims() const override {
        return {static_cast<uint32_t>(C_),  static_cast<uint32_t>(T_),    static_cast<uint32_t>(f1_),
                static_cast<uint32_t>(kt_), static_cast<uint32_t>(pool_), static_cast<uint32_t>(d_)};
    }

  private:
    int C_, T_, f1_, kt_, pool_, d_;
    int t1_ = 0, t2_ = 0, flat_ = 0;
    ParamTensor Wt_, bt_, Ws_, bs_, Wd_, bd_;
    Mat x_, h1_, act_, pooled_;
};

// Single affine classifier head: logits = feat * W^T + b, W is K x D.
class LinearClassifier {
  public:
    LinearClassifier() = default;
    LinearClassifier(int in_dim, int num_classes, Rng& rng)
        : in_(in_dim), out_(num_classes),
          W_("clf.W", static_cast<size_t>(num_classes) * in_dim), b_("clf.b", num_classes) {
        init_uniform(W_, in_dim, rng);
    }

    int in_dim() const { return in_; }
    int num_classes() const { return out_; }

    Mat forward(const Mat& feats, bool cache) {
        if (feats.cols != in_) throw std::invalid_argument("classifier: feature dim mismatch");
        Mat logits(feats.rows, out_);
        for (int i = 0; i < feats.rows; ++i) {
            const double* fr = feats.row(i);
            double* lr = logits.row(i);
            for (int k = 0; k < out_; ++k) {
                const double* wr = W_.w.data() + static_cast<size_t>(k) * in_;
                double s = b_.w[k];
                for (int dd = 0; dd < in_; ++dd) s += wr[dd] * fr[dd];
                lr[k] = s;
            }
        }
        if (cache) x_ = feats;
        return logits;
    }

    // Accumulates dW/db and returns dL/dfeatures.
    Mat backward(const Mat& dlogits) {
        Mat dx(dlogits.rows, in_);
        for (int i = 0; i < dlogits.rows; ++i) {
            const double* dr = dlogits.row(i);
            const double* fr = x_.row(i);
            double* xr = dx.row(i);
            for (int k = 0; k < out_; ++k) {
                const double d = dr[k];
                if (d == 0.0) continue;
                double* wg = W_.g.data() + static_cast<size_t>(k) * in_;
                const double* wr = W_.w.data() + static_cast<size_t>(k) * in_;
                for (int dd = 0; dd < in_; ++dd) {
                    wg[dd] += d * fr[dd];
                    xr[dd] += d * wr[dd];
                }
                b_.g[k] += d;
            }
        }
        return dx;
    }

    ParamTensor& weights() { return W_; }
    const ParamTensor& weights() const { return W_; }
    ParamTensor& bias() { return b_; }
    const ParamTensor& bias() const { return b_; }
    std::vector<ParamTensor*> params() { return {&W_, &b_}; }

  private:
    int in_ = 0, out_ = 0;
    ParamTensor W_, b_;
    Mat x_;
};

}  // namespace fused
