// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include "elder/core/tape.hpp"

namespace elder {

// Central finite differences over a parameter set, against the analytic grads
// a loss closure produces. The closure must rebuild the graph from the current
// parameter values on every call and return the scalar loss value.
//
// Returns the max elementwise relative error, with a denominator floor so
// near-zero gradients do not blow the ratio up.
template <class S>
struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    Eigen::Index worst_row = 0, worst_col = 0;
};

template <class S>
GradCheckResult<S> finite_difference_check(const std::vector<Parameter<S>*>& params,
                                           const std::function<S()>& loss_value,
                                           const std::function<void()>& loss_backward,
                                           S h = S(1e-5), double denom_floor = 1e-3) {
    for (Parameter<S>* p : params) p->zero_grad();
    loss_backward();
    std::vector<MatX<S>> analytic;
    analytic.reserve(params.size());
    for (Parameter<S>* p : params) analytic.push_back(p->grad);

    GradCheckResult<S> res;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter<S>& p = *params[k];
        for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
            for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
                const S orig = p.value(r, c);
                p.value(r, c) = orig + h;
                const double fp = double(loss_value());
                p.value(r, c) = orig - h;
                const double fm = double(loss_value());
                p.value(r, c) = orig;
                const double fd = (fp - fm) / (2.0 * double(h));
                const double an = double(analytic[k](r, c));
                const double rel =
                    std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), denom_floor});
                if (rel > res.max_rel_error) {
                    res.max_rel_error = rel;
                    res.worst_param = p.name;
                    res.worst_row = r;
                    res.worst_col = c;
                }
            }
        }
    }
    for (Parameter<S>* p : params) p->zero_grad();
    return res;
}

} // namespace elder
