// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "elder/core/init.hpp"
#include "elder/core/tape.hpp"

namespace elder {

// One low-rank update dW = B * A attached to a host linear layer.
// B starts at zero so a freshly injected mixture leaves the model untouched;
// A ~ Gaussian(0, 1/rank). No extra alpha/rank scaling: the router score
// already scales the update.
template <class S>
struct LoRAPair {
    Parameter<S> up;   // B: d_in x rank
    Parameter<S> down; // A: rank x d_out
    int rank = 0;

    LoRAPair() = default;
    LoRAPair(const std::string& prefix, int d_in, int d_out, int r, std::mt19937_64& rng)
        : up(prefix + ".B", MatX<S>::Zero(d_in, r)),
          down(prefix + ".A", gaussian<S>(r, d_out, 1.0 / double(r), rng)),
          rank(r) {
        if (r < 1 || r > std::min(d_in, d_out)) throw ConfigError("lora rank out of range");
    }
};

// N LoRAPairs plus a router matrix wrapped around one frozen FC layer.
// The host weight/bias are owned by the transformer block; the mixture only
// borrows them and never marks them trainable.
template <class S>
struct MixtureLayer {
    Parameter<S>* host_weight = nullptr; // d_in x d_out, frozen
    Parameter<S>* host_bias = nullptr;   // 1 x d_out, frozen
    std::vector<LoRAPair<S>> loras;
    Parameter<S> router; // N x d_model
    int k_top = 0;

    MixtureLayer() = default;
    MixtureLayer(const std::string& prefix, Parameter<S>* w0, Parameter<S>* b0, int n_loras,
                 int rank, int k, int d_model, std::mt19937_64& rng)
        : host_weight(w0), host_bias(b0), router(prefix + ".router", gaussian<S>(n_loras, d_model, 0.02, rng)),
          k_top(k) {
        loras.reserve(std::size_t(n_loras));
        for (int i = 0; i < n_loras; ++i)
            loras.emplace_back(prefix + ".lora" + std::to_string(i),
                               int(w0->value.rows()), int(w0->value.cols()), rank, rng);
    }

    int n_loras() const { return static_cast<int>(loras.size()); }
    int d_in() const { return int(host_weight->value.rows()); }
    int d_out() const { return int(host_weight->value.cols()); }
};

// Per-layer routing state for one sequence: full softmax scores (on tape for
// gradient flow into the router) plus the selected index set.
template <class S>
struct LayerRouting {
    Var scores;                 // 1 x N on the tape
    std::vector<S> score_values;
    std::vector<int> selected;  // k_top indices, ascending
};

// Per-sequence routing decision across all mixture layers.
// flag: -1 unset, 0 deferred/base-only, 1 edit path.
// detach_scores: treat the mixing weights as constants so the model loss does
// not backpropagate into the router; router training then comes only from the
// guidance objective. Inference values are unaffected.
template <class S>
struct RoutingContext {
    std::vector<LayerRouting<S>> layers;
    int flag = -1;
    bool detach_scores = false;
};

// Top-k by score, ties broken by lower index (total order on (score, -index)).
template <class S>
std::vector<int> topk_indices(const std::vector<S>& scores, int k) {
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[std::size_t(a)] != scores[std::size_t(b)])
            return scores[std::size_t(a)] > scores[std::size_t(b)];
        return a < b;
    });
    order.resize(std::size_t(k));
    std::sort(order.begin(), order.end());
    return order;
}

// Router scores for one layer: softmax(W_r * q), with q a 1 x d query row.
template <class S>
LayerRouting<S> route_layer(Tape<S>& tape, MixtureLayer<S>& layer, Var query_row) {
    Var wr = tape.param(layer.router);
    Var logits = matmul(tape, query_row, transpose(tape, wr)); // 1 x N
    Var scores = softmax_rows(tape, logits);
    LayerRouting<S> out;
    out.scores = scores;
    const auto& sv = tape.value(scores);
    out.score_values.assign(sv.data(), sv.data() + sv.size());
    out.selected = topk_indices(out.score_values, layer.k_top);
    return out;
}

// dW = sum_{i in selected} s_i * B_i * A_i, using the un-renormalized
// full-softmax scores. Only selected pairs touch the tape, so non-selected
// LoRAs receive exactly zero gradient.
template <class S>
Var combine_delta(Tape<S>& tape, MixtureLayer<S>& layer, const LayerRouting<S>& routing,
                  bool renormalize = false, bool detach_scores = false) {
    if (routing.selected.empty()) throw ContractError("combine_delta: empty selection");
    S norm = S(1);
    if (renormalize) {
        S tot = S(0);
        for (int i : routing.selected) tot += routing.score_values[std::size_t(i)];
        norm = S(1) / tot;
    }
    Var acc{-1};
    for (int i : routing.selected) {
        LoRAPair<S>& lp = layer.loras[std::size_t(i)];
        Var prod = matmul(tape, tape.param(lp.up), tape.param(lp.down));
        Var term;
        if (detach_scores) {
            term = scale(tape, prod, routing.score_values[std::size_t(i)] * norm);
        } else {
            Var s = pick(tape, routing.scores, 0, i);
            if (renormalize) s = scale(tape, s, norm);
            term = scale_by(tape, prod, s);
        }
        acc = acc.valid() ? add(tape, acc, term) : term;
    }
    return acc;
}

// Modified FC forward: y = v W0 + b when deferred, y = v W0 + v dW + b on the
// edit path. Applied to every row (token position) of v with the same dW.
template <class S>
Var moe_forward(Tape<S>& tape, MixtureLayer<S>& layer, Var v, const LayerRouting<S>* routing,
                bool edit_path, bool renormalize = false, bool detach_scores = false) {
    Var w0 = tape.param(*layer.host_weight);
    Var b0 = tape.param(*layer.host_bias);
    Var y = add_rowvec(tape, matmul(tape, v, w0), b0);
    if (!edit_path) return y;
    if (routing == nullptr) throw ContractError("moe_forward: edit path requires routing");
    Var dw = combine_delta(tape, layer, *routing, renormalize, detach_scores);
    return add(tape, y, matmul(tape, v, dw));
}

} // namespace elder
