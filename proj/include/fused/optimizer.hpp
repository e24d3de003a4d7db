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
#include <stdexcept>
#include <vector>

#include "fused/nn.hpp"

namespace fused {

enum class LrSchedule { InvPower, Exponential };

// Inverse-power decay lr0 * (1 + 10 p)^(-power); the exponential alternative
// shares its endpoints and interpolates along an exponential path.
inline double lr_at(long step, long total_steps, double lr0, double power = 0.75,
                    LrSchedule schedule = LrSchedule::InvPower) {
    if (step < 0 || (total_steps > 0 && step > total_steps))
        throw std::invalid_argument("lr_at: step out of range");
    if (total_steps <= 0) return lr0;
    const double p = static_cast<double>(step) / static_cast<double>(total_steps);
    if (schedule == LrSchedule::InvPower) return lr0 * std::pow(1.0 + 10.0 * p, -power);
    return lr0 * std::pow(11.0, -power * p);
}

// Adam with bias correction over an explicit set of parameter tensors.
// Frozen tensors are simply never bound, so they cannot drift.
class Adam {
  public:
    explicit Adam(std::vector<ParamTensor*> params, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i]->size(), 0.0);
            v_[i].assign(params_[i]->size(), 0.0);
        }
    }

    size_t num_scalars() const {
        size_t n = 0;
        for (auto* p : params_) n += p->size();
        return n;
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& w = params_[i]->w;
            auto& g = params_[i]->g;
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < w.size(); ++j) {
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                w[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

  private:
    std::vector<ParamTensor*> params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_, beta2_, eps_;
    long t_ = 0;
};

}  // namespace fused
