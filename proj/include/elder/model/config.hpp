// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "elder/core/errors.hpp"

namespace elder {

enum class Precision { f64, f32 };

enum class AuxLossMode { guided, none, balancing };

inline std::string to_string(AuxLossMode m) {
    switch (m) {
        case AuxLossMode::guided: return "guided";
        case AuxLossMode::none: return "none";
        case AuxLossMode::balancing: return "balancing";
    }
    return "?";
}

inline AuxLossMode aux_mode_from_string(const std::string& s) {
    if (s == "guided") return AuxLossMode::guided;
    if (s == "none") return AuxLossMode::none;
    if (s == "balancing") return AuxLossMode::balancing;
    throw ConfigError("unknown aux loss mode '" + s + "'");
}

struct ModelConfig {
    int vocab_size = 0; // filled from the tokenizer
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 8;
    int d_ffn = 128;
    int max_seq_len = 32;
    // Contiguous block range [moe_first, moe_last], 1-based, hosting mixture-of-LoRA.
    int moe_first = 5;
    int moe_last = 8;
    // Mixture shape.
    int n_loras = 128;
    int lora_rank = 8;
    int k_top = 2;
    Precision precision = Precision::f64;
    std::uint64_t seed = 1234;

    int moe_layer_count() const { return moe_last - moe_first + 1; }
    bool is_moe_block(int layer_1based) const {
        return layer_1based >= moe_first && layer_1based <= moe_last;
    }

    void validate() const {
        if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
        if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
        if (moe_first < 1 || moe_last > n_layers || moe_first > moe_last)
            throw ConfigError("moe layer range must lie inside [1, n_layers]");
        if (moe_first < 2)
            throw ConfigError("at least one frozen block is required before the first mixture layer");
        if (k_top < 1 || k_top > n_loras) throw ConfigError("k_top must be in [1, n_loras]");
        if (lora_rank < 1) throw ConfigError("lora rank must be >= 1");
        if (max_seq_len < 2) throw ConfigError("max_seq_len too small");
    }
};

struct TrainSchedule {
    int steps_per_edit = 50;
    int batch_size = 4;
    double learning_rate = 1e-4;
    double lambda = 1e-2;
    AuxLossMode aux_mode = AuxLossMode::guided;
    // When false, top-k mixing uses raw full-softmax scores (the default);
    // when true the selected scores are renormalized to sum to 1.
    bool renormalize_topk = false;
    // Rehearsal across edits: cache query vectors of earlier edits for router
    // refinement and revisit earlier pools during adapter training. Queries
    // are constant because the blocks producing them are frozen.
    bool replay = true;
    // Batch slots per step spent revisiting earlier edits (LoRA maintenance).
    int replay_slots = 1;
    // Learning-rate multiplier for the router-only refinement phase. Building
    // a full logit margin within the refinement budget needs larger steps than
    // adapter training, and Adam's per-step movement is bounded by the
    // learning rate.
    double router_lr_scale = 3.0;
    // Router refinement: after each edit's adapter training, this many
    // router-only optimizer steps over batches of cached queries. A router
    // matvec costs a tiny fraction of a transformer pass, so large batches
    // keep the allocation map converged across the whole stream.
    int router_steps = 50;
    int router_batch = 128;
    // Weight of the background regularizer during router refinement (0
    // disables it).
    double background_weight = 1.0;
    // Routing sink: this many low-index adapters per layer are withheld from
    // edit allocations, and background queries are trained to select them.
    // A sunk input's code is maximally distant from every stored edit code,
    // so it always defers to the frozen base.
    int sink_experts = 2;
    // Logit margin the refinement hinge enforces between every assigned
    // adapter and its strongest competitor.
    double router_margin = 4.0;
    // L2 weight decay on the routers during refinement; bounds the logit
    // scale over long edit streams.
    double router_weight_decay = 1e-3;
    // Relative std-dev of Gaussian noise added to rehearsed queries. Widens the
    // router's decision margin around each cached query so nearby inputs (e.g.
    // unseen rephrasings) still route to the same LoRAs.
    double replay_noise = 0.1;
    int checkpoint_interval = 50;

    void validate() const {
        if (steps_per_edit < 0 || batch_size < 1 || learning_rate <= 0 || lambda < 0 ||
            checkpoint_interval < 1 || replay_noise < 0 ||
            replay_slots < 0 || router_lr_scale <= 0 || router_steps < 0 || router_batch < 1 ||
            background_weight < 0 || router_margin < 0 || sink_experts < 0 ||
            router_weight_decay < 0)
            throw ConfigError("invalid training schedule");
    }
};

struct DeferralConfig {
    // Hamming threshold; dist < epsilon selects the edit path. Negative means
    // "use the default L * k_top for the current model".
    int epsilon = -1;

    int resolve_epsilon(int moe_layers, int k_top) const {
        return epsilon >= 0 ? epsilon : moe_layers * k_top;
    }
};

// Flat key=value config file; '#' starts a comment, keys are dotted paths.
class KvConfig {
public:
    static KvConfig from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot open config file '" + path + "'");
        KvConfig kv;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            auto trim = [](std::string s) {
                auto b = s.find_first_not_of(" \t\r");
                auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("malformed config line " + std::to_string(lineno) + ": '" + line + "'");
            kv.values_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
        return kv;
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& dflt) const {
        auto it = values_.find(key);
        return it == values_.end() ? dflt : it->second;
    }

    long long get_int(const std::string& key, long long dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        try {
            return std::stoll(it->second);
        } catch (...) {
            throw ConfigError("key '" + key + "' is not an integer: '" + it->second + "'");
        }
    }

    double get_double(const std::string& key, double dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        try {
            return std::stod(it->second);
        } catch (...) {
            throw ConfigError("key '" + key + "' is not a number: '" + it->second + "'");
        }
    }

    bool get_bool(const std::string& key, bool dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw ConfigError("key '" + key + "' is not a boolean: '" + it->second + "'");
    }

    const std::map<std::string, std::string>& raw() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

} // namespace elder
