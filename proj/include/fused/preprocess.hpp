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

#include <cctype>
#include <cmath>
#include <complex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "fused/dataset.hpp"

namespace fused {

// ---------------------------------------------------------------------------
// Butterworth bandpass as second-order sections, applied forward-backward for
// zero phase. Design path: analog prototype -> prewarp -> lowpass-to-bandpass
// -> bilinear transform -> conjugate-pair sections.
// ---------------------------------------------------------------------------
struct Biquad {
    double b0, b1, b2;  // numerator
    double a1, a2;      // denominator (a0 == 1)
};

namespace dsp {

inline std::vector<Biquad> butter_bandpass_sos(double lo_hz, double hi_hz, double fs, int order = 4) {
    if (!(lo_hz > 0.0)) throw std::invalid_argument("bandpass: low edge must be positive");
    if (!(hi_hz > lo_hz)) throw std::invalid_argument("bandpass: high edge must exceed low edge");
    if (hi_hz >= fs / 2.0) throw std::invalid_argument("bandpass: high edge must be below Nyquist");

    using cplx = std::complex<double>;
    const int n = order;
    // analog Butterworth prototype poles (unit cutoff, no zeros, gain 1)
    std::vector<cplx> proto(n);
    for (int k = 1; k <= n; ++k) {
        const double theta = M_PI * (2.0 * k + n - 1.0) / (2.0 * n);
        proto[k - 1] = cplx(std::cos(theta), std::sin(theta));
    }
    // prewarped edges in the normalized fs=2 convention
    const double fs2 = 2.0;
    const double w1 = 2.0 * fs2 * std::tan(M_PI * (lo_hz / (fs / 2.0)) / fs2);
    const double w2 = 2.0 * fs2 * std::tan(M_PI * (hi_hz / (fs / 2.0)) / fs2);
    const double bw = w2 - w1;
    const double wo = std::sqrt(w1 * w2);

    // lowpass -> bandpass: each pole splits into two, zeros appear at s=0
    std::vector<cplx> poles;
    poles.reserve(2 * n);
    for (const auto& p : proto) {
        const cplx ps = p * (bw / 2.0);
        const cplx root = std::sqrt(ps * ps - wo * wo);
        poles.push_back(ps + root);
        poles.push_back(ps - root);
    }
    double gain = std::pow(bw, n);

    // bilinear transform at fs=2
    const double fs4 = 2.0 * fs2;
    std::vector<cplx> zpoles;
    cplx num(1.0, 0.0), den(1.0, 0.0);
    zpoles.reserve(poles.size());
    for (const auto& s : poles) {
        zpoles.push_back((cplx(fs4, 0.0) + s) / (cplx(fs4, 0.0) - s));
        den *= (cplx(fs4, 0.0) - s);
    }
    for (int i = 0; i < n; ++i) num *= cplx(fs4, 0.0);  // analog zeros at s=0
    gain *= (num / den).real();

    // digital zeros: n at +1 (from s=0) and n at -1 (degree deficit)
    // pair conjugate poles, one (+1,-1) zero pair per section
    std::vector<cplx> upper;
    for (const auto& p : zpoles)
        if (p.imag() > 1e-12) upper.push_back(p);
    if (static_cast<int>(upper.size()) != n)
        throw std::runtime_error("bandpass: degenerate pole configuration for this band");
    std::vector<Biquad> sos(n);
    for (int i = 0; i < n; ++i) {
        const cplx p = upper[i];
        sos[i].b0 = (i == 0) ? gain : 1.0;
        sos[i].b1 = 0.0;
        sos[i].b2 = (i == 0) ? -gain : -1.0;
        sos[i].a1 = -2.0 * p.real();
        sos[i].a2 = std::norm(p);
    }
    return sos;
}

// Steady-state state of one section for a unit-step input (transposed DF2).
inline void biquad_step_state(const Biquad& q, double& s1, double& s2) {
    const double denom = 1.0 + q.a1 + q.a2;
    const double yss = std::abs(denom) > 1e-12 ? (q.b0 + q.b1 + q.b2) / denom : 0.0;
    s2 = q.b2 - q.a2 * yss;
    s1 = q.b1 + s2 - q.a1 * yss;
}

inline void sosfilt_inplace(const std::vector<Biquad>& sos, std::vector<double>& x) {
    double scale = x.empty() ? 0.0 : x.front();
    for (const auto& q : sos) {
        double s1, s2;
        biquad_step_state(q, s1, s2);
        s1 *= scale;
        s2 *= scale;
        for (auto& v : x) {
            const double in = v;
            const double y = q.b0 * in + s1;
            s1 = q.b1 * in - q.a1 * y + s2;
            s2 = q.b2 * in - q.a2 * y;
            v = y;
        }
        const double denom = 1.0 + q.a1 + q.a2;
        scale *= std::abs(denom) > 1e-12 ? (q.b0 + q.b1 + q.b2) / denom : 0.0;
    }
}

// Forward-backward filtering with odd-symmetric edge extension.
inline std::vector<double> sosfiltfilt(const std::vector<Biquad>& sos, const std::vector<double>& x) {
    const int T = static_cast<int>(x.size());
    if (T < 2) return x;
    const int padlen = std::min(T - 1, 12 * (2 * static_cast<int>(sos.size()) + 1));
    std::vector<double> ext;
    ext.reserve(x.size() + 2 * padlen);
    for (int i = padlen; i >= 1; --i) ext.push_back(2.0 * x.front() - x[i]);
    ext.insert(ext.end(), x.begin(), x.end());
    for (int i = 1; i <= padlen; ++i) ext.push_back(2.0 * x.back() - x[T - 1 - i]);

    sosfilt_inplace(sos, ext);
    std::reverse(ext.begin(), ext.end());
    sosfilt_inplace(sos, ext);
    std::reverse(ext.begin(), ext.end());
    return {ext.begin() + padlen, ext.begin() + padlen + T};
}

// Polyphase rational resampling by up/down with a Hamming-windowed sinc.
inline std::vector<double> resample_poly(const std::vector<double>& x, int up, int down) {
    if (up < 1 || down < 1) throw std::invalid_argument("resample: factors must be positive");
    const int g = std::gcd(up, down);
    const int L = up / g, M = down / g;
    if (L == 1 && M == 1) return x;
    const int half = 10 * std::max(L, M);
    const int taps = 2 * half + 1;
    const double cutoff = 1.0 / std::max(L, M);
    std::vector<double> h(taps);
    for (int i = 0; i < taps; ++i) {
        const double t = i - half;
        const double arg = cutoff * t;
        const double sinc = arg == 0.0 ? 1.0 : std::sin(M_PI * arg) / (M_PI * arg);
        const double win = 0.54 - 0.46 * std::cos(2.0 * M_PI * i / (taps - 1));
        h[i] = L * cutoff * sinc * win;
    }
    const int T = static_cast<int>(x.size());
    const int out_len = (T * L + M - 1) / M;
    std::vector<double> y(out_len, 0.0);
    for (int j = 0; j < out_len; ++j) {
        const long pos = static_cast<long>(j) * M + half;  // center-aligned tap position
        // contributions from input samples n with k = pos - n*L in [0, taps)
        long n_lo = (pos - (taps - 1) + L - 1) / L;
        long n_hi = pos / L;
        if (n_lo < 0) n_lo = 0;
        if (n_hi > T - 1) n_hi = T - 1;
        double s = 0.0;
        for (long n = n_lo; n <= n_hi; ++n) s += h[pos - n * L] * x[n];
        y[j] = s;
    }
    return y;
}

}  // namespace dsp

// ---------------------------------------------------------------------------
// Pipeline ops, applied in listed order.
// ---------------------------------------------------------------------------
struct BandpassOp {
    double lo_hz, hi_hz;
};
struct ResampleOp {
    double rate_hz;
};
struct WindowOp {
    double length_s, stride_s;
};
struct ChannelSelectOp {
    std::vector<int> indices;
};
struct ZscoreOp {};

using PipelineOp = std::variant<BandpassOp, ResampleOp, WindowOp, ChannelSelectOp, ZscoreOp>;

// "bandpass(0.3,50)|resample(200)|window(2,2)|channel_select(0,1,2)|zscore"
inline std::vector<PipelineOp> parse_pipeline(const std::string& text) {
    std::vector<PipelineOp> ops;
    std::stringstream ss(text);
    std::string item;
    auto args_of = [](const std::string& s, const std::string& name) {
        std::vector<double> out;
        const auto open = s.find('(');
        if (open == std::string::npos) {
            if (s != name) throw std::invalid_argument("pipeline: malformed op '" + s + "'");
            return out;
        }
        if (s.back() != ')') throw std::invalid_argument("pipeline: missing ')' in '" + s + "'");
        std::string inner = s.substr(open + 1, s.size() - open - 2);
        std::stringstream as(inner);
        std::string a;
        while (std::getline(as, a, ',')) {
            size_t used = 0;
            double v = std::stod(a, &used);
            if (used != a.size()) throw std::invalid_argument("pipeline: bad number '" + a + "' in '" + s + "'");
            out.push_back(v);
        }
        return out;
    };
    while (std::getline(ss, item, '|')) {
        // trim
        while (!item.empty() && std::isspace(static_cast<unsigned char>(item.front()))) item.erase(item.begin());
        while (!item.empty() && std::isspace(static_cast<unsigned char>(item.back()))) item.pop_back();
        if (item.empty()) continue;
        const std::string name = item.substr(0, item.find('('));
        if (name == "bandpass") {
            auto a = args_of(item, name);
            if (a.size() != 2) throw std::invalid_argument("pipeline: bandpass expects (lo,hi)");
            ops.push_back(BandpassOp{a[0], a[1]});
        } else if (name == "resample") {
            auto a = args_of(item, name);
            if (a.size() != 1) throw std::invalid_argument("pipeline: resample expects (rate)");
            ops.push_back(ResampleOp{a[0]});
        } else if (name == "window") {
            auto a = args_of(item, name);
            if (a.size() != 2) throw std::invalid_argument("pipeline: window expects (length_s,stride_s)");
            ops.push_back(WindowOp{a[0], a[1]});
        } else if (name == "channel_select") {
            auto a = args_of(item, name);
            if (a.empty()) throw std::invalid_argument("pipeline: channel_select expects indices");
            ChannelSelectOp op;
            for (double v : a) {
                if (v != std::floor(v)) throw std::invalid_argument("pipeline: channel indices must be integers");
                op.indices.push_back(static_cast<int>(v));
            }
            ops.push_back(op);
        } else if (name == "zscore" || name == "zscore_per_channel") {
            auto a = args_of(item, name);
            if (!a.empty()) throw std::invalid_argument("pipeline: zscore takes no arguments");
            ops.push_back(ZscoreOp{});
        } else {
            throw std::invalid_argument("pipeline: unknown op '" + name + "'");
        }
    }
    return ops;
}

inline std::string pipeline_to_string(const std::vector<PipelineOp>& ops) {
    std::string out;
    for (const auto& op : ops) {
        if (!out.empty()) out += "|";
        if (std::holds_alternative<BandpassOp>(op)) {
            const auto& o = std::get<BandpassOp>(op);
            out += "bandpass(" + fmt_double_short(o.lo_hz) + "," + fmt_double_short(o.hi_hz) + ")";
        } else if (std::holds_alternative<ResampleOp>(op)) {
            out += "resample(" + fmt_double_short(std::get<ResampleOp>(op).rate_hz) + ")";
        } else if (std::holds_alternative<WindowOp>(op)) {
            const auto& o = std::get<WindowOp>(op);
            out += "window(" + fmt_double_short(o.length_s) + "," + fmt_double_short(o.stride_s) + ")";
        } else if (std::holds_alternative<ChannelSelectOp>(op)) {
            out += "channel_select(";
            const auto& idx = std::get<ChannelSelectOp>(op).indices;
            for (size_t i = 0; i < idx.size(); ++i) out += (i ? "," : "") + std::to_string(idx[i]);
            out += ")";
        } else {
            out += "zscore";
        }
    }
    return out;
}

namespace detail {

inline CohortDataset apply_bandpass(const CohortDataset& d, const BandpassOp& op) {
    auto sos = dsp::butter_bandpass_sos(op.lo_hz, op.hi_hz, d.sampling_rate);
    CohortDataset out = d;
    std::vector<double> ch(d.T);
    for (int i = 0; i < d.num_samples(); ++i)
        for (int c = 0; c < d.C; ++c) {
            const float* src = d.sample(i) + static_cast<size_t>(c) * d.T;
            for (int t = 0; t < d.T; ++t) ch[t] = src[t];
            auto filtered = dsp::sosfiltfilt(sos, ch);
            float* dst = out.sample(i) + static_cast<size_t>(c) * d.T;
            for (int t = 0; t < d.T; ++t) dst[t] = static_cast<float>(filtered[t]);
        }
    return out;
}

inline CohortDataset apply_resample(const CohortDataset& d, const ResampleOp& op) {
    const double old_rate = d.sampling_rate;
    const double new_rate = op.rate_hz;
    if (!(new_rate > 0.0)) throw std::invalid_argument("resample: rate must be positive");
    const long oi = std::lround(old_rate), ni = std::lround(new_rate);
    if (std::abs(old_rate - oi) > 1e-6 || std::abs(new_rate - ni) > 1e-6)
        throw std::invalid_argument("resample: rates must be integral");
    const int T_new = static_cast<int>((static_cast<long>(d.T) * ni + oi - 1) / oi);
    CohortDataset out;
    out.C = d.C;
    out.T = T_new;
    out.K = d.K;
    out.sampling_rate = static_cast<float>(new_rate);
    out.provenance = d.provenance;
    out.labels = d.labels;
    out.subjects = d.subjects;
    out.samples.resize(static_cast<size_t>(d.num_samples()) * d.C * T_new);
    std::vector<double> ch(d.T);
    for (int i = 0; i < d.num_samples(); ++i)
        for (int c = 0; c < d.C; ++c) {
            const float* src = d.sample(i) + static_cast<size_t>(c) * d.T;
            for (int t = 0; t < d.T; ++t) ch[t] = src[t];
            auto y = dsp::resample_poly(ch, static_cast<int>(ni), static_cast<int>(oi));
            float* dst = out.sample(i) + static_cast<size_t>(c) * T_new;
            for (int t = 0; t < T_new; ++t) dst[t] = static_cast<float>(y[t]);
        }
    return out;
}

inline CohortDataset apply_window(const CohortDataset& d, const WindowOp& op) {
    const int len = static_cast<int>(std::lround(op.length_s * d.sampling_rate));
    const int stride = static_cast<int>(std::lround(op.stride_s * d.sampling_rate));
    if (len < 1 || stride < 1) throw std::invalid_argument("window: length and stride must be positive");
    if (len > d.T)
        throw std::invalid_argument("window: window of " + std::to_string(len) +
                                    " samples longer than trial of " + std::to_string(d.T));
    std::vector<int> starts;
    for (int s = 0; s + len <= d.T; s += stride) starts.push_back(s);
    CohortDataset out;
    out.C = d.C;
    out.T = len;
    out.K = d.K;
    out.sampling_rate = d.sampling_rate;
    out.provenance = d.provenance;
    out.samples.reserve(static_cast<size_t>(d.num_samples()) * starts.size() * d.C * len);
    for (int i = 0; i < d.num_samples(); ++i)
        for (int s : starts) {
            for (int c = 0; c < d.C; ++c) {
                const float* src = d.sample(i) + static_cast<size_t>(c) * d.T + s;
                out.samples.insert(out.samples.end(), src, src + len);
            }
            out.labels.push_back(d.labels[i]);
            out.subjects.push_back(d.subjects[i]);
        }
    return out;
}

inline CohortDataset apply_channel_select(const CohortDataset& d, const ChannelSelectOp& op) {
    for (int idx : op.indices)
        if (idx < 0 || idx >= d.C)
            throw std::invalid_argument("channel_select: index " + std::to_string(idx) + " out of range [0," +
                                        std::to_string(d.C) + ")");
    CohortDataset out;
    out.C = static_cast<int>(op.indices.size());
    out.T = d.T;
    out.K = d.K;
    out.sampling_rate = d.sampling_rate;
    out.provenance = d.provenance;
    out.labels = d.labels;
    out.subjects = d.subjects;
    out.samples.reserve(static_cast<size_t>(d.num_samples()) * out.C * d.T);
    for (int i = 0; i < d.num_samples(); ++i)
        for (int idx : op.indices) {
            const float* src = d.sample(i) + static_cast<size_t>(idx) * d.T;
            out.samples.insert(out.samples.end(), src, src + d.T);
        }
    return out;
}

inline CohortDataset apply_zscore(const CohortDataset& d) {
    CohortDataset out = d;
    for (int i = 0; i < d.num_samples(); ++i)
        for (int c = 0; c < d.C; ++c) {
            float* ch = out.sample(i) + static_cast<size_t>(c) * d.T;
            double mean = 0.0;
            for (int t = 0; t < d.T; ++t) mean += ch[t];
            mean /= d.T;
            double var = 0.0;
            for (int t = 0; t < d.T; ++t) var += (ch[t] - mean) * (ch[t] - mean);
            const double sd = std::sqrt(var / d.T) + 1e-8;
            for (int t = 0; t < d.T; ++t) ch[t] = static_cast<float>((ch[t] - mean) / sd);
        }
    return out;
}

}  // namespace detail

inline CohortDataset preprocess(const CohortDataset& raw, const std::vector<PipelineOp>& ops) {
    CohortDataset d = raw;
    for (const auto& op : ops) {
        if (std::holds_alternative<BandpassOp>(op))
            d = detail::apply_bandpass(d, std::get<BandpassOp>(op));
        else if (std::holds_alternative<ResampleOp>(op))
            d = detail::apply_resample(d, std::get<ResampleOp>(op));
        else if (std::holds_alternative<WindowOp>(op))
            d = detail::apply_window(d, std::get<WindowOp>(op));
        else if (std::holds_alternative<ChannelSelectOp>(op))
            d = detail::apply_channel_select(d, std::get<ChannelSelectOp>(op));
        else
            d = detail::apply_zscore(d);
    }
    return d;
}

}  // namespace fused
