// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "elder/core/checkpoint.hpp"
#include "elder/core/init.hpp"
#include "elder/core/rng.hpp"
#include "elder/core/tape.hpp"
#include "elder/model/config.hpp"
#include "elder/moe/lora_moe.hpp"

namespace elder {

// Token ids with an optional trailing pad region. prompt_len marks where the
// target span begins; the routing query is taken at the last prompt token.
struct TokenSequence {
    std::vector<int> ids;
    int prompt_len = 1;

    int length() const { return static_cast<int>(ids.size()); }

    // Index of the last non-pad position.
    int last_real(int pad_id) const {
        int i = length() - 1;
        while (i > 0 && ids[std::size_t(i)] == pad_id) --i;
        return i;
    }

    int real_length(int pad_id) const { return last_real(pad_id) + 1; }
};

// Residual-stream activation after some prefix of blocks, reusable by a later
// forward pass on the same tape (routing computes blocks [1, moe_first) that
// the full pass would otherwise redo).
struct BlockPrefix {
    Var x{-1};
    int upto = 0;
};

template <class S>
struct TransformerBlock {
    Parameter<S> ln1_g, ln1_b;
    Parameter<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Parameter<S> ln2_g, ln2_b;
    Parameter<S> w_up, b_up;     // d_model -> d_ffn
    Parameter<S> w_down, b_down; // d_ffn -> d_model, host of the mixture on moe blocks
};

// Small causal decoder-only LM with pre-norm blocks. The FFN down-projection
// of each mixture block hosts a MixtureLayer.
template <class S>
class TransformerModel {
public:
    static constexpr int kPadId = 0;

    TransformerModel(ModelConfig cfg, const SeedStream& seeds) : cfg_(cfg) {
        cfg_.validate();
        const int d = cfg_.d_model, V = cfg_.vocab_size, f = cfg_.d_ffn;
        auto emb_rng = seeds.stream("embeddings");
        tok_emb_ = Parameter<S>("tok_emb", gaussian<S>(V, d, 0.02, emb_rng));
        pos_emb_ = Parameter<S>("pos_emb", gaussian<S>(cfg_.max_seq_len, d, 0.02, emb_rng));
        blocks_.resize(std::size_t(cfg_.n_layers));
        for (int l = 1; l <= cfg_.n_layers; ++l) {
            auto rng = seeds.stream("block", std::uint64_t(l));
            TransformerBlock<S>& b = blocks_[std::size_t(l - 1)];
            const std::string p = "block" + std::to_string(l) + ".";
            b.ln1_g = Parameter<S>(p + "ln1_g", MatX<S>::Ones(1, d));
            b.ln1_b = Parameter<S>(p + "ln1_b", MatX<S>::Zero(1, d));
            b.wq = Parameter<S>(p + "wq", xavier_uniform<S>(d, d, rng));
            b.bq = Parameter<S>(p + "bq", MatX<S>::Zero(1, d));
            b.wk = Parameter<S>(p + "wk", xavier_uniform<S>(d, d, rng));
            b.bk = Parameter<S>(p + "bk", MatX<S>::Zero(1, d));
            b.wv = Parameter<S>(p + "wv", xavier_uniform<S>(d, d, rng));
            b.bv = Parameter<S>(p + "bv", MatX<S>::Zero(1, d));
            b.wo = Parameter<S>(p + "wo", xavier_uniform<S>(d, d, rng));
            b.bo = Parameter<S>(p + "bo", MatX<S>::Zero(1, d));
            b.ln2_g = Parameter<S>(p + "ln2_g", MatX<S>::Ones(1, d));
            b.ln2_b = Parameter<S>(p + "ln2_b", MatX<S>::Zero(1, d));
            b.w_up = Parameter<S>(p + "w_up", xavier_uniform<S>(d, f, rng));
            b.b_up = Parameter<S>(p + "b_up", MatX<S>::Zero(1, f));
            b.w_down = Parameter<S>(p + "w_down", xavier_uniform<S>(f, d, rng));
            b.b_down = Parameter<S>(p + "b_down", MatX<S>::Zero(1, d));
        }
        lnf_g_ = Parameter<S>("lnf_g", MatX<S>::Ones(1, d));
        lnf_b_ = Parameter<S>("lnf_b", MatX<S>::Zero(1, d));
        auto out_rng = seeds.stream("unembed");
        w_out_ = Parameter<S>("w_out", xavier_uniform<S>(d, V, out_rng));
        b_out_ = Parameter<S>("b_out", MatX<S>::Zero(1, V));

        mixtures_.reserve(std::size_t(cfg_.moe_layer_count()));
        for (int l = cfg_.moe_first; l <= cfg_.moe_last; ++l) {
            auto rng = seeds.stream("mixture", std::uint64_t(l));
            TransformerBlock<S>& b = blocks_[std::size_t(l - 1)];
            mixtures_.emplace_back("mix" + std::to_string(l), &b.w_down, &b.b_down, cfg_.n_loras,
                                   cfg_.lora_rank, cfg_.k_top, cfg_.d_model, rng);
        }
    }

    TransformerModel(const TransformerModel&) = delete;
    TransformerModel& operator=(const TransformerModel&) = delete;

    const ModelConfig& config() const { return cfg_; }
    std::vector<MixtureLayer<S>>& mixtures() { return mixtures_; }
    const std::vector<MixtureLayer<S>>& mixtures() const { return mixtures_; }

    std::vector<Parameter<S>*> base_params() {
        std::vector<Parameter<S>*> out = {&tok_emb_, &pos_emb_};
        for (TransformerBlock<S>& b : blocks_) {
            for (Parameter<S>* p : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv,
                                    &b.wo, &b.bo, &b.ln2_g, &b.ln2_b, &b.w_up, &b.b_up, &b.w_down,
                                    &b.b_down})
                out.push_back(p);
        }
        out.push_back(&lnf_g_);
        out.push_back(&lnf_b_);
        out.push_back(&w_out_);
        out.push_back(&b_out_);
        return out;
    }

    std::vector<Parameter<S>*> adapter_params() {
        std::vector<Parameter<S>*> out;
        for (MixtureLayer<S>& m : mixtures_) {
            out.push_back(&m.router);
            for (LoRAPair<S>& lp : m.loras) {
                out.push_back(&lp.up);
                out.push_back(&lp.down);
            }
        }
        return out;
    }

    std::vector<Parameter<S>*> all_params() {
        auto out = base_params();
        auto extra = adapter_params();
        out.insert(out.end(), extra.begin(), extra.end());
        return out;
    }

    void set_base_trainable(bool v) {
        for (Parameter<S>* p : base_params()) p->trainable = v;
    }
    void set_adapters_trainable(bool v) {
        for (Parameter<S>* p : adapter_params()) p->trainable = v;
    }

    // FNV-1a over the raw bytes of every base parameter; the frozen-base
    // invariant says this never changes across an edit stream.
    std::uint64_t base_checksum() {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (Parameter<S>* p : base_params()) {
            const unsigned char* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
            for (std::size_t i = 0; i < sizeof(S) * std::size_t(p->value.size()); ++i) {
                h ^= bytes[i];
                h *= 0x100000001b3ULL;
            }
        }
        return h;
    }

    // Trainable mixture parameters; constant in the number of edits performed.
    long long learnable_param_count() const {
        long long total = 0;
        for (const MixtureLayer<S>& m : mixtures_) {
            const long long n = m.n_loras();
            total += n * (static_cast<long long>(m.d_in()) * cfg_.lora_rank +
                          static_cast<long long>(cfg_.lora_rank) * m.d_out());
            total += n * cfg_.d_model;
        }
        return total;
    }

    // Full forward pass; ctx == nullptr or ctx->flag != 1 runs the frozen base
    // path bit-identically to the pre-edit model.
    Var forward(Tape<S>& tape, const TokenSequence& seq, const RoutingContext<S>* ctx,
                bool renormalize_topk = false, const BlockPrefix* prefix = nullptr) {
        Var x = run_blocks(tape, seq, cfg_.n_layers, ctx, renormalize_topk, prefix);
        Var h = layer_norm(tape, x, tape.param(lnf_g_), tape.param(lnf_b_));
        return add_rowvec(tape, matmul(tape, h, tape.param(w_out_)), tape.param(b_out_));
    }

    // Forward that computes its own routing when mixture layers exist.
    Var forward_routed(Tape<S>& tape, const TokenSequence& seq, RoutingContext<S>* ctx_out = nullptr,
                       bool renormalize_topk = false) {
        BlockPrefix prefix;
        RoutingContext<S> ctx = route_sequence(tape, seq, &prefix);
        ctx.flag = 1;
        Var y = forward(tape, seq, &ctx, renormalize_topk, &prefix);
        if (ctx_out != nullptr) *ctx_out = std::move(ctx);
        return y;
    }

    // Residual-stream output of block `layer` at `pos` (default: last non-pad).
    // Layers before the first mixture block never depend on adapter state.
    Var hidden_at_layer(Tape<S>& tape, const TokenSequence& seq, int layer, int pos = -1,
                        const RoutingContext<S>* ctx = nullptr) {
        if (layer < 1 || layer > cfg_.n_layers) throw IndexError("hidden_at_layer: layer out of range");
        Var x = run_blocks(tape, seq, layer, ctx, false);
        if (pos < 0) pos = seq.last_real(kPadId);
        return row_at(tape, x, pos);
    }

    // Shared-query routing: one query vector per sequence, taken at the output
    // of the last block before the first mixture layer, feeds every router.
    // The shared routing query; constant across an edit stream because every
    // block before the first mixture layer is frozen.
    Var routing_query(Tape<S>& tape, const TokenSequence& seq) {
        const int qpos = std::min(seq.prompt_len, seq.real_length(kPadId)) - 1;
        return hidden_at_layer(tape, seq, cfg_.moe_first - 1, qpos);
    }

    // Routing from a cached residual-stream value (the blocks producing it are
    // frozen, so the value is reusable across tapes). The prefix enters the
    // tape as a constant: backward passes stop at the first mixture block.
    RoutingContext<S> route_from_prefix(Tape<S>& tape, const MatX<S>& prefix_value,
                                        const TokenSequence& seq, BlockPrefix* prefix_out) {
        if (mixtures_.empty()) throw ContractError("route_from_prefix: model has no mixture layers");
        const int qpos = std::min(seq.prompt_len, seq.real_length(kPadId)) - 1;
        Var x = tape.constant(prefix_value);
        prefix_out->x = x;
        prefix_out->upto = cfg_.moe_first - 1;
        Var q = row_at(tape, x, qpos);
        RoutingContext<S> ctx;
        ctx.layers.reserve(mixtures_.size());
        for (MixtureLayer<S>& m : mixtures_) ctx.layers.push_back(route_layer(tape, m, q));
        return ctx;
    }

    RoutingContext<S> route_sequence(Tape<S>& tape, const TokenSequence& seq,
                                     BlockPrefix* prefix_out = nullptr) {
        if (mixtures_.empty()) throw ContractError("route_sequence: model has no mixture layers");
        const int qpos = std::min(seq.prompt_len, seq.real_length(kPadId)) - 1;
        Var x = run_blocks(tape, seq, cfg_.moe_first - 1, nullptr, false);
        if (prefix_out != nullptr) {
            prefix_out->x = x;
            prefix_out->upto = cfg_.moe_first - 1;
        }
        Var q = row_at(tape, x, qpos);
        RoutingContext<S> ctx;
        ctx.layers.reserve(mixtures_.size());
        for (MixtureLayer<S>& m : mixtures_) ctx.layers.push_back(route_layer(tape, m, q));
        return ctx;
    }

    // Teacher-forced exact match over the target span.
    bool greedy_decode_target(const MatX<S>& logits, const TokenSequence& seq) const {
        const int n = seq.last_real(kPadId) + 1;
        if (seq.prompt_len < 1 || seq.prompt_len >= n)
            throw DegenerateInputError("greedy_decode_target: empty target span");
        for (int p = seq.prompt_len - 1; p < n - 1; ++p) {
            Eigen::Index best = 0;
            logits.row(p).maxCoeff(&best);
            if (int(best) != seq.ids[std::size_t(p + 1)]) return false;
        }
        return true;
    }

    // Loss mask: predict token p+1 from position p over the target span.
    void lm_targets(const TokenSequence& seq, std::vector<int>& targets,
                    std::vector<bool>& mask) const {
        const int T = seq.length();
        const int n = seq.last_real(kPadId) + 1;
        targets.assign(std::size_t(T), 0);
        mask.assign(std::size_t(T), false);
        for (int p = 0; p + 1 < n; ++p) {
            targets[std::size_t(p)] = seq.ids[std::size_t(p + 1)];
            mask[std::size_t(p)] = (p + 1 >= seq.prompt_len);
        }
    }

private:
    Var run_blocks(Tape<S>& tape, const TokenSequence& seq, int upto, const RoutingContext<S>* ctx,
                   bool renormalize_topk, const BlockPrefix* prefix = nullptr) {
        const int T = seq.length();
        if (T > cfg_.max_seq_len) throw DimensionError("sequence longer than max_seq_len");
        if (T == 0) throw DimensionError("empty sequence");
        Var x;
        int start = 0;
        if (prefix != nullptr && prefix->x.valid()) {
            if (prefix->upto > upto) throw ContractError("block prefix extends past the requested layer");
            x = prefix->x;
            start = prefix->upto;
        } else {
            std::vector<int> positions(static_cast<std::size_t>(T));
            for (int i = 0; i < T; ++i) positions[std::size_t(i)] = i;
            x = add(tape, embedding(tape, tape.param(tok_emb_), seq.ids),
                    embedding(tape, tape.param(pos_emb_), positions));
        }
        const MatX<S> mask = causal_mask(T);
        const bool edit_path = ctx != nullptr && ctx->flag == 1;
        for (int l = start + 1; l <= upto; ++l) {
            TransformerBlock<S>& b = blocks_[std::size_t(l - 1)];
            Var h = layer_norm(tape, x, tape.param(b.ln1_g), tape.param(b.ln1_b));
            x = add(tape, x, attention(tape, b, h, mask));
            Var h2 = layer_norm(tape, x, tape.param(b.ln2_g), tape.param(b.ln2_b));
            Var u = gelu(tape, add_rowvec(tape, matmul(tape, h2, tape.param(b.w_up)), tape.param(b.b_up)));
            Var down;
            if (cfg_.is_moe_block(l)) {
                const int mi = l - cfg_.moe_first;
                const LayerRouting<S>* routing = nullptr;
                if (edit_path) {
                    if (ctx->layers.size() != mixtures_.size())
                        throw ContractError("routing context does not cover all mixture layers");
                    routing = &ctx->layers[std::size_t(mi)];
                }
                down = moe_forward(tape, mixtures_[std::size_t(mi)], u, routing, edit_path,
                                   renormalize_topk, ctx != nullptr && ctx->detach_scores);
            } else {
                down = add_rowvec(tape, matmul(tape, u, tape.param(b.w_down)), tape.param(b.b_down));
            }
            x = add(tape, x, down);
        }
        return x;
    }

    Var attention(Tape<S>& tape, TransformerBlock<S>& b, Var h, const MatX<S>& mask) {
        const int d = cfg_.d_model;
        const int hd = d / cfg_.n_heads;
        Var q = add_rowvec(tape, matmul(tape, h, tape.param(b.wq)), tape.param(b.bq));
        Var k = add_rowvec(tape, matmul(tape, h, tape.param(b.wk)), tape.param(b.bk));
        Var v = add_rowvec(tape, matmul(tape, h, tape.param(b.wv)), tape.param(b.bv));
        std::vector<Var> heads;
        heads.reserve(std::size_t(cfg_.n_heads));
        const S inv_sqrt = S(1) / std::sqrt(S(hd));
        for (int hh = 0; hh < cfg_.n_heads; ++hh) {
            Var qh = slice_cols(tape, q, hh * hd, hd);
            Var kh = slice_cols(tape, k, hh * hd, hd);
            Var vh = slice_cols(tape, v, hh * hd, hd);
            Var att = scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt);
            att = softmax_rows(tape, add_const(tape, att, mask));
            heads.push_back(matmul(tape, att, vh));
        }
        Var cat = concat_cols(tape, heads);
        return add_rowvec(tape, matmul(tape, cat, tape.param(b.wo)), tape.param(b.bo));
    }

    // -1e9 additive mask above the diagonal; exp underflows to exact zero, so
    // causality holds bitwise.
    static MatX<S> causal_mask(int T) {
        MatX<S> m = MatX<S>::Zero(T, T);
        for (int i = 0; i < T; ++i)
            for (int j = i + 1; j < T; ++j) m(i, j) = S(-1e9);
        return m;
    }

    ModelConfig cfg_;
    Parameter<S> tok_emb_, pos_emb_;
    std::vector<TransformerBlock<S>> blocks_;
    Parameter<S> lnf_g_, lnf_b_, w_out_, b_out_;
    std::vector<MixtureLayer<S>> mixtures_;
};

} // namespace elder
