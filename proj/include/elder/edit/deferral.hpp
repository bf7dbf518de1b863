// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "elder/core/checkpoint.hpp"
#include "elder/core/errors.hpp"
#include "elder/edit/allocation.hpp"
#include "elder/model/config.hpp"
#include "elder/model/transformer.hpp"
#include "elder/moe/lora_moe.hpp"

namespace elder {

// Boolean routing fingerprint of one input: bit i*N + j set iff LoRA j is
// selected at mixture layer i. Always exactly L*k_top ones.
class AllocationCode {
public:
    AllocationCode() = default;
    AllocationCode(int moe_layers, int n_loras)
        : bits_(std::size_t(moe_layers) * std::size_t(n_loras), false), n_(n_loras) {}

    int length() const { return static_cast<int>(bits_.size()); }
    int n_loras() const { return n_; }
    bool test(int i) const { return bits_[std::size_t(i)]; }
    void set(int layer, int lora) { bits_[std::size_t(layer * n_ + lora)] = true; }

    int popcount() const {
        int c = 0;
        for (bool b : bits_) c += b ? 1 : 0;
        return c;
    }

    // Packed 64-bit words, little-endian bit order within a word.
    std::vector<std::uint64_t> packed() const {
        std::vector<std::uint64_t> w((bits_.size() + 63) / 64, 0);
        for (std::size_t i = 0; i < bits_.size(); ++i)
            if (bits_[i]) w[i / 64] |= (std::uint64_t(1) << (i % 64));
        return w;
    }

    static AllocationCode from_packed(const std::vector<std::uint64_t>& w, int moe_layers,
                                      int n_loras) {
        AllocationCode c(moe_layers, n_loras);
        for (std::size_t i = 0; i < c.bits_.size(); ++i)
            c.bits_[i] = (w[i / 64] >> (i % 64)) & 1;
        return c;
    }

    bool operator==(const AllocationCode& o) const { return bits_ == o.bits_; }

private:
    std::vector<bool> bits_;
    int n_ = 0;
};

template <class S>
AllocationCode code_of(const RoutingContext<S>& ctx, int n_loras) {
    if (ctx.layers.empty()) throw ContractError("code_of: routing context has no layers");
    AllocationCode c(static_cast<int>(ctx.layers.size()), n_loras);
    for (std::size_t l = 0; l < ctx.layers.size(); ++l) {
        if (ctx.layers[l].selected.empty()) throw ContractError("code_of: incomplete context");
        for (int j : ctx.layers[l].selected) c.set(static_cast<int>(l), j);
    }
    return c;
}

inline AllocationCode code_of(const Allocation& a, int n_loras) {
    AllocationCode c(static_cast<int>(a.per_layer.size()), n_loras);
    for (std::size_t l = 0; l < a.per_layer.size(); ++l)
        for (int j : a.per_layer[l]) c.set(static_cast<int>(l), j);
    return c;
}

// Popcount-based Hamming distance over packed words.
inline int hamming(const AllocationCode& a, const AllocationCode& b) {
    if (a.length() != b.length()) throw DimensionError("hamming: code lengths differ");
    const auto wa = a.packed();
    const auto wb = b.packed();
    int d = 0;
    for (std::size_t i = 0; i < wa.size(); ++i) d += std::popcount(wa[i] ^ wb[i]);
    return d;
}

// Append-only (edit id, code) store backing the deferral gate. One writer,
// many readers; readers only ever observe a prefix of appends.
class EditCodeStore {
public:
    struct Entry {
        std::string id;
        AllocationCode code;
    };

    EditCodeStore() = default;
    EditCodeStore(int moe_layers, int n_loras, int k_top)
        : moe_layers_(moe_layers), n_loras_(n_loras), k_top_(k_top) {}

    int moe_layers() const { return moe_layers_; }
    int n_loras() const { return n_loras_; }
    int k_top() const { return k_top_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const Entry& at(std::size_t i) const { return entries_[i]; }

    void append(std::string id, AllocationCode code) {
        if (code.length() != moe_layers_ * n_loras_)
            throw DimensionError("edit code store: wrong code length");
        if (code.popcount() != moe_layers_ * k_top_)
            throw ContractError("edit code store: code cardinality must be L*k_top");
        for (const Entry& e : entries_)
            if (e.id == id) throw ContractError("edit code store: duplicate id '" + id + "'");
        entries_.push_back(Entry{std::move(id), std::move(code)});
    }

    // Minimum Hamming distance over all stored codes; first minimizer in
    // append order. Empty store: distance is +infinity (every input defers).
    std::pair<int, std::string> nearest(const AllocationCode& c) const {
        if (entries_.empty()) return {std::numeric_limits<int>::max(), ""};
        int best = std::numeric_limits<int>::max();
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            int d = hamming(entries_[i].code, c);
            if (d < best) {
                best = d;
                best_i = i;
            }
        }
        return {best, entries_[best_i].id};
    }

    // Binary persistence: magic header, L, N, k_top, fixed-width bitset records.
    void save(const std::string& path) const {
        namespace fs = std::filesystem;
        const fs::path tmp = path + ".tmp";
        {
            std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
            if (!os) throw IoError("cannot write code store '" + path + "'");
            os.write("ELDRCODE", 8);
            ckpt::write_pod<std::uint32_t>(os, 1);
            ckpt::write_pod<std::uint32_t>(os, std::uint32_t(moe_layers_));
            ckpt::write_pod<std::uint32_t>(os, std::uint32_t(n_loras_));
            ckpt::write_pod<std::uint32_t>(os, std::uint32_t(k_top_));
            ckpt::write_pod<std::uint64_t>(os, entries_.size());
            for (const Entry& e : entries_) {
                ckpt::write_pod<std::uint32_t>(os, std::uint32_t(e.id.size()));
                os.write(e.id.data(), std::streamsize(e.id.size()));
                for (std::uint64_t w : e.code.packed()) ckpt::write_pod<std::uint64_t>(os, w);
            }
        }
        fs::rename(tmp, path);
    }

    static EditCodeStore load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("cannot open code store '" + path + "'");
        char magic[8];
        is.read(magic, 8);
        if (!is || std::string(magic, 8) != "ELDRCODE") throw IoError("bad code store magic");
        if (ckpt::read_pod<std::uint32_t>(is) != 1) throw IoError("unsupported code store version");
        const int L = int(ckpt::read_pod<std::uint32_t>(is));
        const int N = int(ckpt::read_pod<std::uint32_t>(is));
        const int k = int(ckpt::read_pod<std::uint32_t>(is));
        EditCodeStore store(L, N, k);
        const auto count = ckpt::read_pod<std::uint64_t>(is);
        const std::size_t words = (std::size_t(L) * std::size_t(N) + 63) / 64;
        for (std::uint64_t i = 0; i < count; ++i) {
            const auto id_len = ckpt::read_pod<std::uint32_t>(is);
            std::string id(id_len, '\0');
            is.read(id.data(), id_len);
            if (!is) throw IoError("code store truncated");
            std::vector<std::uint64_t> w(words);
            for (std::size_t j = 0; j < words; ++j) w[j] = ckpt::read_pod<std::uint64_t>(is);
            store.append(std::move(id), AllocationCode::from_packed(w, L, N));
        }
        return store;
    }

    // CSV of 0/1 columns for external visualization.
    void dump_csv(std::ostream& os) const {
        os << "edit_id";
        for (int i = 0; i < moe_layers_ * n_loras_; ++i) os << ",c" << i;
        os << "\n";
        for (const Entry& e : entries_) {
            os << e.id;
            for (int i = 0; i < e.code.length(); ++i) os << ',' << (e.code.test(i) ? 1 : 0);
            os << "\n";
        }
    }

private:
    int moe_layers_ = 0, n_loras_ = 0, k_top_ = 0;
    std::vector<Entry> entries_;
};

struct DeferralDecision {
    int distance = std::numeric_limits<int>::max();
    std::string matched_id;
    int flag = 0;
};

// Inference path of the deferral gate: route once at the shared query layer,
// compare the code against the store, then run the rest of the network with
// the mixture active only when a stored edit is close enough (dist < epsilon).
template <class S>
std::pair<MatX<S>, DeferralDecision> infer_with_deferral(TransformerModel<S>& model,
                                                         const TokenSequence& seq,
                                                         const EditCodeStore& store,
                                                         const DeferralConfig& cfg,
                                                         bool renormalize_topk = false) {
    Tape<S> tape(/*grad_enabled=*/false);
    BlockPrefix prefix;
    RoutingContext<S> ctx = model.route_sequence(tape, seq, &prefix);
    const AllocationCode code = code_of(ctx, model.config().n_loras);
    DeferralDecision dec;
    if (!store.empty()) {
        auto [d, id] = store.nearest(code);
        dec.distance = d;
        dec.matched_id = id;
    }
    const int eps = cfg.resolve_epsilon(model.config().moe_layer_count(), model.config().k_top);
    dec.flag = (!store.empty() && dec.distance < eps) ? 1 : 0;
    ctx.flag = dec.flag;
    Var logits = model.forward(tape, seq, &ctx, renormalize_topk, &prefix);
    return {tape.value(logits), dec};
}

} // namespace elder
