// Copyright 2026 The restkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace restkit {

// Named error conditions surfaced by the library. Everything else that can
// go wrong is a plain std::invalid_argument / std::runtime_error.
struct LengthMismatch : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct GroupTooSmall : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct StateSpaceTooLarge : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EmptySequence : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct MissingOldLogProbs : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct NonFiniteLogits : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline double clip(double x, double lo, double hi) {
    return std::min(std::max(x, lo), hi);
}

/// Compensated (Kahan) summation.
inline double kahan_sum(std::span<const double> xs) {
    double sum = 0.0, c = 0.0;
    for (double x : xs) {
        double y = x - c;
        double t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    return sum;
}

inline double mean_of(std::span<const double> xs) {
    if (xs.empty()) throw EmptySequence("mean_of: empty input");
    return kahan_sum(xs) / static_cast<double>(xs.size());
}

/// Population (divide by n) or sample (divide by n-1) variance.
inline double variance_of(std::span<const double> xs, bool population = true) {
    const std::size_t n = xs.size();
    if (n == 0) throw EmptySequence("variance_of: empty input");
    if (!population && n < 2) throw GroupTooSmall("variance_of: sample variance needs n >= 2");
    const double mu = mean_of(xs);
    double acc = 0.0, c = 0.0;
    for (double x : xs) {
        const double d = (x - mu) * (x - mu);
        double y = d - c;
        double t = acc + y;
        c = (t - acc) - y;
        acc = t;
    }
    return acc / static_cast<double>(population ? n : n - 1);
}

// ---------------------------------------------------------------------------
// Random streams. All sampling in the library is driven by explicitly seeded
// mt19937_64 engines; derived seeds are assigned per logical index (replicate,
// training step, worker) so results do not depend on scheduling.
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Seed for logical stream `index` under `base`. Streams for distinct indices
/// are independent for all practical purposes.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    return splitmix64(base ^ splitmix64(index + 1));
}

/// Uniform double in [0,1) with 53 random bits; engine-portable.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Inverse-CDF draw from a probability vector. Deterministic for a fixed
/// engine state (std::discrete_distribution is implementation-defined).
inline int sample_categorical(std::span<const double> probs, Rng& rng) {
    const double u = uniform01(rng);
    double acc = 0.0;
    for (std::size_t v = 0; v < probs.size(); ++v) {
        acc += probs[v];
        if (u < acc) return static_cast<int>(v);
    }
    return static_cast<int>(probs.size()) - 1;  // u landed in rounding slack
}

struct BootstrapCi {
    double lo = 0.0;
    double hi = 0.0;
};

/// Percentile bootstrap over item indices. `stat` receives a resampled index
/// multiset and returns the statistic of interest.
template <class Stat>
BootstrapCi bootstrap_ci(std::size_t n_items, Stat&& stat, int resamples, std::uint64_t seed,
                         double alpha = 0.05) {
    if (n_items == 0) throw EmptySequence("bootstrap_ci: no items");
    Rng rng(seed);
    std::vector<double> stats(static_cast<std::size_t>(resamples));
    std::vector<std::size_t> idx(n_items);
    for (int r = 0; r < resamples; ++r) {
        for (std::size_t i = 0; i < n_items; ++i)
            idx[i] = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n_items));
        stats[static_cast<std::size_t>(r)] = stat(std::span<const std::size_t>(idx));
    }
    std::sort(stats.begin(), stats.end());
    auto pick = [&](double q) {
        const double pos = q * static_cast<double>(stats.size() - 1);
        const auto i = static_cast<std::size_t>(pos);
        const double frac = pos - static_cast<double>(i);
        return i + 1 < stats.size() ? stats[i] * (1.0 - frac) + stats[i + 1] * frac : stats[i];
    };
    return {pick(alpha / 2.0), pick(1.0 - alpha / 2.0)};
}

/// Least-squares slope of y against x = 0,1,...,n-1.
inline double least_squares_slope(std::span<const double> ys) {
    const std::size_t n = ys.size();
    if (n < 2) throw GroupTooSmall("least_squares_slope: need >= 2 points");
    const double xbar = static_cast<double>(n - 1) / 2.0;
    const double ybar = mean_of(ys);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = static_cast<double>(i) - xbar;
        num += dx * (ys[i] - ybar);
        den += dx * dx;
    }
    return num / den;
}

}  // namespace restkit
