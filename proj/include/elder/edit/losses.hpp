// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "elder/edit/allocation.hpp"
#include "elder/moe/lora_moe.hpp"

namespace elder {

// Sum over the assigned (layer, lora) pairs of -log(score). Differentiable
// into every router; LoRA factors receive nothing from it. Scores numerically
// at zero are clamped at 1e-12 (tape warning counter), not an abort.
template <class S>
Var guided_loss(Tape<S>& tape, const RoutingContext<S>& ctx, const Allocation& target) {
    if (ctx.layers.size() != target.per_layer.size())
        throw ContractError("guided_loss: context does not cover all mixture layers");
    Var acc{-1};
    for (std::size_t l = 0; l < ctx.layers.size(); ++l) {
        for (int j : target.per_layer[l]) {
            Var term = neg_log_pick(tape, ctx.layers[l].scores, 0, j, S(1e-12));
            acc = acc.valid() ? add(tape, acc, term) : term;
        }
    }
    return acc;
}

// Switch-style load balancing, used only in the ablation mode: per layer
// N * sum_i f_i * P_i where f_i is the batch fraction of sequences whose
// top-1 is i and P_i the mean score of i; averaged over mixture layers.
// Gradient flows through P (f is a discrete count).
template <class S>
Var balancing_loss(Tape<S>& tape, const std::vector<const RoutingContext<S>*>& batch) {
    if (batch.empty()) throw DegenerateInputError("balancing_loss: empty batch");
    const std::size_t L = batch.front()->layers.size();
    if (L == 0) throw ContractError("balancing_loss: no mixture layers");
    const std::size_t B = batch.size();
    const int N = static_cast<int>(batch.front()->layers.front().score_values.size());
    Var acc{-1};
    for (std::size_t l = 0; l < L; ++l) {
        // top-1 usage fractions for this layer
        std::vector<S> f(std::size_t(N), S(0));
        for (const RoutingContext<S>* ctx : batch) {
            const auto& sv = ctx->layers[l].score_values;
            int best = 0;
            for (int i = 1; i < N; ++i)
                if (sv[std::size_t(i)] > sv[std::size_t(best)]) best = i;
            f[std::size_t(best)] += S(1) / S(B);
        }
        // N * sum_i f_i * mean_b s_b_i  ==  sum_b <s_b, N*f/B>
        MatX<S> w(1, N);
        for (int i = 0; i < N; ++i) w(0, i) = S(N) * f[std::size_t(i)] / S(B);
        for (const RoutingContext<S>* ctx : batch) {
            Var term = dot_const(tape, ctx->layers[l].scores, w);
            acc = acc.valid() ? add(tape, acc, term) : term;
        }
    }
    return scale(tape, acc, S(1) / S(L));
}

} // namespace elder
