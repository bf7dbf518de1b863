// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "elder/core/errors.hpp"

namespace elder {

// Pre-assigned LoRA allocation: one set of k_top indices per mixture layer.
struct Allocation {
    std::vector<std::vector<int>> per_layer; // each sorted ascending, k_top entries

    bool operator==(const Allocation& o) const { return per_layer == o.per_layer; }
    bool operator<(const Allocation& o) const { return per_layer < o.per_layer; }
};

inline unsigned long long binomial(int n, int k) {
    if (k < 0 || k > n) return 0;
    unsigned long long r = 1;
    for (int i = 1; i <= k; ++i) r = r * (unsigned long long)(n - k + i) / (unsigned long long)i;
    return r;
}

// Group label -> Allocation; identical labels share one allocation, distinct
// labels never collide.
class AllocationRegistry {
public:
    // The first `reserved` LoRA indices are never assigned to any edit; they
    // stay free for uses outside the registry (e.g. a routing sink for
    // unrelated inputs).
    AllocationRegistry(int moe_layers, int n_loras, int k_top, int reserved = 0)
        : layers_(moe_layers), n_(n_loras), k_(k_top), reserved_(reserved) {
        if (reserved_ < 0 || n_ - reserved_ < k_)
            throw ConfigError("allocation registry: reserved experts leave fewer than k_top free");
        const unsigned long long per_layer = binomial(n_ - reserved_, k_);
        capacity_ = 1;
        for (int i = 0; i < layers_; ++i) {
            if (per_layer != 0 && capacity_ > (~0ULL) / per_layer) {
                capacity_ = ~0ULL; // saturate
                break;
            }
            capacity_ *= per_layer;
        }
    }

    unsigned long long capacity() const { return capacity_; }
    int reserved() const { return reserved_; }
    std::size_t size() const { return by_label_.size(); }

    bool has(const std::string& label) const { return by_label_.count(label) > 0; }

    const Allocation& get(const std::string& label) const {
        auto it = by_label_.find(label);
        if (it == by_label_.end()) throw ContractError("unknown allocation label '" + label + "'");
        return it->second;
    }

    // Returns the existing allocation for a known label; otherwise samples
    // k_top distinct indices per layer uniformly, resampling until the whole
    // allocation collides with no registered one.
    const Allocation& assign(const std::string& label, std::mt19937_64& rng) {
        auto it = by_label_.find(label);
        if (it != by_label_.end()) return it->second;
        if ((unsigned long long)used_.size() >= capacity_)
            throw CapacityError("allocation space exhausted: all C(" + std::to_string(n_ - reserved_) + "," +
                                std::to_string(k_) + ")^" + std::to_string(layers_) + " = " +
                                std::to_string(capacity_) + " allocations are in use");
        Allocation a;
        do {
            a = sample(rng);
        } while (used_.count(a) > 0);
        used_.insert(a);
        return by_label_.emplace(label, std::move(a)).first->second;
    }

    // Exhaustive injectivity check: distinct labels never share an allocation.
    bool injective() const {
        std::set<Allocation> seen;
        for (const auto& [label, a] : by_label_)
            if (!seen.insert(a).second) return false;
        return true;
    }

    const std::map<std::string, Allocation>& entries() const { return by_label_; }

private:
    Allocation sample(std::mt19937_64& rng) const {
        Allocation a;
        a.per_layer.resize(std::size_t(layers_));
        for (int l = 0; l < layers_; ++l) {
            // partial Fisher-Yates over [reserved, n)
            const int m = n_ - reserved_;
            std::vector<int> pool(static_cast<std::size_t>(m));
            for (int i = 0; i < m; ++i) pool[std::size_t(i)] = reserved_ + i;
            for (int i = 0; i < k_; ++i) {
                std::uniform_int_distribution<int> d(i, m - 1);
                std::swap(pool[std::size_t(i)], pool[std::size_t(d(rng))]);
            }
            std::vector<int> sel(pool.begin(), pool.begin() + k_);
            std::sort(sel.begin(), sel.end());
            a.per_layer[std::size_t(l)] = std::move(sel);
        }
        return a;
    }

    int layers_, n_, k_, reserved_ = 0;
    unsigned long long capacity_ = 0;
    std::map<std::string, Allocation> by_label_;
    std::set<Allocation> used_;
};

} // namespace elder
