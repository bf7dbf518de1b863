// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <random>

#include "elder/core/tape.hpp"

namespace elder {

// Xavier-uniform over [-sqrt(6/(fan_in+fan_out)), +].
template <class S>
MatX<S> xavier_uniform(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / double(rows + cols));
    std::uniform_real_distribution<double> dist(-limit, limit);
    MatX<S> m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = S(dist(rng));
    return m;
}

template <class S>
MatX<S> gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    MatX<S> m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = S(dist(rng));
    return m;
}

} // namespace elder
