// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace elder {

// splitmix64, used to derive stream seeds from the root seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Named-stream seed splitter: each module draws from its own stream so adding
// a module does not perturb the draws of the others.
class SeedStream {
public:
    explicit SeedStream(std::uint64_t root_seed) : root_(root_seed) {}

    std::uint64_t root() const { return root_; }

    std::mt19937_64 stream(std::string_view name) const {
        return std::mt19937_64(splitmix64(root_ ^ fnv1a64(name)));
    }

    std::mt19937_64 stream(std::string_view name, std::uint64_t index) const {
        return std::mt19937_64(splitmix64(splitmix64(root_ ^ fnv1a64(name)) + index));
    }

private:
    std::uint64_t root_;
};

} // namespace elder
