// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "elder/core/tape.hpp"

namespace elder {

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Bias-corrected Adam over a fixed parameter set. Moment buffers are keyed by
// registration order, so the same parameter list must be passed every step.
template <class S>
class AdamState {
public:
    AdamState(std::vector<Parameter<S>*> params, AdamConfig cfg)
        : params_(std::move(params)),
          cfg_(cfg),
          lr_scale_(params_.size(), 1.0),
          warm_(params_.size(), false) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const Parameter<S>* p : params_) {
            m_.push_back(MatX<S>::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(MatX<S>::Zero(p->value.rows(), p->value.cols()));
        }
    }

    // Per-parameter learning-rate multiplier (e.g. faster routers, slower
    // adapters). Indexed by registration order.
    void set_lr_scale(std::size_t i, double s) {
        if (i >= lr_scale_.size() || s <= 0) throw ContractError("adam: bad lr scale");
        lr_scale_[i] = s;
    }

    std::uint64_t step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

    // Applies one update from the accumulated grads, then clears them.
    // Aborts with a diagnostic if any parameter turns non-finite.
    void step() {
        ++t_;
        const S b1 = S(cfg_.beta1), b2 = S(cfg_.beta2);
        const S corr1 = S(1) - std::pow(b1, S(t_));
        const S corr2 = S(1) - std::pow(b2, S(t_));
        const S eps = S(cfg_.epsilon);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const S lr = S(cfg_.learning_rate * lr_scale_[i]);
            Parameter<S>& p = *params_[i];
            // A parameter with no gradient this step and all-zero moments has
            // an exactly zero update; skipping it keeps large mostly-idle
            // parameter pools (the LoRA bank) cheap.
            if (!p.grad_active && !warm_[i]) continue;
            p.grad_active = false;
            warm_[i] = true;
            if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols())
                throw ContractError("adam_step: missing grad for parameter '" + p.name + "'");
            m_[i] = b1 * m_[i] + (S(1) - b1) * p.grad;
            v_[i] = b2 * v_[i] + (S(1) - b2) * p.grad.cwiseProduct(p.grad);
            MatX<S> mhat = m_[i] / corr1;
            MatX<S> vhat = v_[i] / corr2;
            p.value.array() -= lr * mhat.array() / (vhat.array().sqrt() + eps);
            if (!p.value.allFinite())
                throw NumericError("adam_step produced non-finite values in parameter '" + p.name +
                                   "' at step " + std::to_string(t_));
            p.grad.setZero();
        }
    }

private:
    std::vector<Parameter<S>*> params_;
    AdamConfig cfg_;
    std::vector<double> lr_scale_;
    std::vector<bool> warm_;
    std::vector<MatX<S>> m_;
    std::vector<MatX<S>> v_;
    std::uint64_t t_ = 0;
};

} // namespace elder
