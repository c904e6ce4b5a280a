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

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "restkit/policy.hpp"
#include "restkit/region_tagger.hpp"
#include "restkit/util.hpp"

namespace restkit {

// ---------------------------------------------------------------------------
// Group-normalized advantages
// ---------------------------------------------------------------------------

/// A_i = (r_i - mean) / (population std + delta). Scale-invariant in the
/// rewards when delta = 0, which is what makes the dynamic reward scaling
/// factor drop out of the advantages.
inline std::vector<double> group_advantages(std::span<const double> rewards, double delta) {
    if (rewards.size() < 2) throw GroupTooSmall("group_advantages: need G >= 2");
    const double mu = mean_of(rewards);
    const double sd = std::sqrt(variance_of(rewards, /*population=*/true));
    std::vector<double> out(rewards.size());
    for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mu) / (sd + delta);
    return out;
}

struct TrajectoryGroup {
    std::vector<Trajectory> trajectories;
    std::vector<double> advantages;
    double delta = 1e-6;

    int size() const { return static_cast<int>(trajectories.size()); }
};

inline TrajectoryGroup sample_group(const SoftmaxPolicy& policy, const Environment& env, int group_size,
                                    double delta, Rng& rng, double nu = 0.0) {
    TrajectoryGroup g;
    g.delta = delta;
    std::vector<double> rewards;
    for (int i = 0; i < group_size; ++i) {
        g.trajectories.push_back(sample_trajectory(policy, env, rng, nu));
        rewards.push_back(g.trajectories.back().reward);
    }
    g.advantages = group_advantages(rewards, delta);
    return g;
}

// ---------------------------------------------------------------------------
// Per-step weights
// ---------------------------------------------------------------------------

/// Nonnegative per-step weights subject to sum w_t = T. Construct through
/// uniform() or feasible(); both enforce the constraint with compensated
/// summation.
struct WeightVector {
    std::vector<double> w;

    static WeightVector uniform(int horizon) {
        WeightVector out;
        out.w.assign(static_cast<std::size_t>(horizon), 1.0);
        return out;
    }
    /// Rescales arbitrary nonnegative raw weights onto the feasible set.
    static WeightVector feasible(std::vector<double> raw) {
        const double total = kahan_sum(raw);
        if (total <= 0.0) return uniform(static_cast<int>(raw.size()));
        const double scale = static_cast<double>(raw.size()) / total;
        for (double& x : raw) x *= scale;
        WeightVector out;
        out.w = std::move(raw);
        return out;
    }

    int horizon() const { return static_cast<int>(w.size()); }
    double sum() const { return kahan_sum(w); }
};

// ---------------------------------------------------------------------------
// Trajectory and mini-batch gradients
// ---------------------------------------------------------------------------

/// g_i = advantage * sum_t w_t J_t^T s_t, with w absent meaning uniform.
/// Scores are evaluated against the rollout-time distributions recorded in
/// the trajectory.
inline std::vector<double> trajectory_gradient(const SoftmaxPolicy& policy, const Trajectory& traj,
                                               double advantage,
                                               const WeightVector* weights = nullptr) {
    std::vector<double> grad(static_cast<std::size_t>(policy.param_count()), 0.0);
    if (weights != nullptr && weights->horizon() != traj.length())
        throw LengthMismatch("trajectory_gradient: weights vs trajectory length");
    std::vector<int> history;
    history.reserve(traj.steps.size());
    for (int t = 0; t < traj.length(); ++t) {
        const StepRecord& step = traj.steps[static_cast<std::size_t>(t)];
        const double w = weights != nullptr ? weights->w[static_cast<std::size_t>(t)] : 1.0;
        if (advantage != 0.0 && w != 0.0)
            accumulate_logprob_grad(policy, traj.context, history, t, step.probs, step.token,
                                    advantage * w, grad);
        history.push_back(step.token);
    }
    return grad;
}

inline std::vector<double> minibatch_gradient(const SoftmaxPolicy& policy, const TrajectoryGroup& group,
                                              const WeightVector* weights = nullptr) {
    std::vector<double> grad(static_cast<std::size_t>(policy.param_count()), 0.0);
    const double inv_g = 1.0 / static_cast<double>(group.size());
    for (int i = 0; i < group.size(); ++i) {
        const std::vector<double> gi = trajectory_gradient(policy, group.trajectories[static_cast<std::size_t>(i)],
                                                           group.advantages[static_cast<std::size_t>(i)], weights);
        for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += inv_g * gi[k];
    }
    return grad;
}

// ---------------------------------------------------------------------------
// beta profiles: per-step variance contributions
// ---------------------------------------------------------------------------

enum class BetaKind { exact_toy, monte_carlo, entropy_only };

struct BetaProfile {
    std::vector<double> beta;
    BetaKind kind = BetaKind::exact_toy;
    std::vector<double> std_error;  // populated for monte_carlo
    bool entropy_factor = true;

    int horizon() const { return static_cast<int>(beta.size()); }
};

struct BetaOptions {
    BetaKind kind = BetaKind::exact_toy;
    int n_samples = 1000;        // monte_carlo only
    std::uint64_t seed = 0;      // monte_carlo only
    // When false, beta_t = E[||J_t||_F^2] without the (1 - e^{-H_t}) factor;
    // both definitions keep the quadratic-in-weights structure.
    bool entropy_factor = true;
};

/// beta_t = E[||J_t||_F^2 (1 - e^{-H_t})], by full enumeration, Monte Carlo,
/// or the entropy-only surrogate that ignores Jacobian norms.
inline BetaProfile beta_estimate(const SoftmaxPolicy& policy, const Environment& env,
                                 const BetaOptions& opt = {}) {
    BetaProfile out;
    out.kind = opt.kind;
    out.entropy_factor = opt.entropy_factor;
    const int T = env.horizon;
    out.beta.assign(static_cast<std::size_t>(T), 0.0);

    auto step_value = [&](int ctx, std::span<const int> history, int t) {
        const StepDistribution dist = step_distribution(policy, ctx, history, t);
        double value = opt.kind == BetaKind::entropy_only
                           ? 1.0
                           : jacobian_frobenius_sq(policy, ctx, history, t);
        if (opt.entropy_factor || opt.kind == BetaKind::entropy_only)
            value *= 1.0 - std::exp(-dist.entropy);
        // surrogate profiles keep a strictly positive floor so near-saturated
        // steps do not absorb all the weight mass
        if (opt.kind == BetaKind::entropy_only) value = std::max(value, 1e-9);
        return value;
    };

    bool enumerable = true;
    try {
        require_enumerable(env);
    } catch (const StateSpaceTooLarge&) {
        enumerable = false;
    }
    // entropy-only profiles fall back to sampling when enumeration is out of
    // reach; exact_toy keeps the strict enumeration contract
    const bool sampled = opt.kind == BetaKind::monte_carlo ||
                         (opt.kind == BetaKind::entropy_only && !enumerable);

    if (sampled) {
        if (opt.n_samples < 1) throw GroupTooSmall("beta_estimate: n_samples >= 1 required");
        std::vector<std::vector<double>> samples(static_cast<std::size_t>(T));
        Rng rng(opt.seed);
        for (int n = 0; n < opt.n_samples; ++n) {
            const Trajectory traj = sample_trajectory(policy, env, rng);
            std::vector<int> history;
            for (int t = 0; t < traj.length(); ++t) {
                samples[static_cast<std::size_t>(t)].push_back(step_value(traj.context, history, t));
                history.push_back(traj.steps[static_cast<std::size_t>(t)].token);
            }
        }
        out.std_error.assign(static_cast<std::size_t>(T), 0.0);
        for (int t = 0; t < T; ++t) {
            const auto& xs = samples[static_cast<std::size_t>(t)];
            if (xs.empty()) continue;
            out.beta[static_cast<std::size_t>(t)] = mean_of(xs);
            if (xs.size() > 1)
                out.std_error[static_cast<std::size_t>(t)] =
                    std::sqrt(variance_of(xs, /*population=*/false) / static_cast<double>(xs.size()));
        }
        return out;
    }

    // exact_toy / entropy_only: expectation over prefixes by enumeration
    for (int t = 0; t < T; ++t) {
        double acc = 0.0;
        for_each_prefix(policy, env, t, [&](int ctx, std::span<const int> history, double prob) {
            acc += prob * step_value(ctx, history, t);
        });
        out.beta[static_cast<std::size_t>(t)] = acc;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimal weights and variance bounds
// ---------------------------------------------------------------------------

constexpr double kBetaZeroTol = 1e-12;

/// Closed-form minimizer of sum beta_t w_t^2 subject to sum w_t = T:
/// w*_t = (T / sum_u beta_u^{-1}) / beta_t. If any beta_t is zero the bound
/// is driven to zero by putting uniform mass on the zero set.
inline WeightVector optimal_weights(const BetaProfile& beta) {
    const int T = beta.horizon();
    std::vector<double> w(static_cast<std::size_t>(T), 0.0);
    std::size_t zeros = 0;
    for (double b : beta.beta)
        if (b <= kBetaZeroTol) ++zeros;
    if (zeros > 0) {
        const double mass = static_cast<double>(T) / static_cast<double>(zeros);
        for (int t = 0; t < T; ++t)
            if (beta.beta[static_cast<std::size_t>(t)] <= kBetaZeroTol) w[static_cast<std::size_t>(t)] = mass;
        WeightVector out;
        out.w = std::move(w);
        return out;
    }
    for (int t = 0; t < T; ++t) w[static_cast<std::size_t>(t)] = 1.0 / beta.beta[static_cast<std::size_t>(t)];
    return WeightVector::feasible(std::move(w));
}

/// sum_t beta_t w_t^2, times the exogenous E[A^2] factor (default 1).
inline double variance_bound(const BetaProfile& beta, const WeightVector& weights,
                             double adv_second_moment = 1.0) {
    if (beta.horizon() != weights.horizon())
        throw LengthMismatch("variance_bound: beta vs weights length");
    std::vector<double> terms(static_cast<std::size_t>(beta.horizon()));
    for (int t = 0; t < beta.horizon(); ++t) {
        const double w = weights.w[static_cast<std::size_t>(t)];
        terms[static_cast<std::size_t>(t)] = beta.beta[static_cast<std::size_t>(t)] * w * w;
    }
    return adv_second_moment * kahan_sum(terms);
}

/// T^2 / sum_t beta_t^{-1}; zero when any beta_t vanishes.
inline double minimized_bound(const BetaProfile& beta, double adv_second_moment = 1.0) {
    for (double b : beta.beta)
        if (b <= kBetaZeroTol) return 0.0;
    std::vector<double> inv(static_cast<std::size_t>(beta.horizon()));
    for (int t = 0; t < beta.horizon(); ++t) inv[static_cast<std::size_t>(t)] = 1.0 / beta.beta[static_cast<std::size_t>(t)];
    const double T = static_cast<double>(beta.horizon());
    return adv_second_moment * T * T / kahan_sum(inv);
}

// ---------------------------------------------------------------------------
// Entropy-only surrogate weights per region
// ---------------------------------------------------------------------------

enum class EntropyRule { inv_one_minus_exp, inv_entropy };

/// Raw per-region weights before curriculum and normalization: regions with
/// no tokens stay unset.
struct RegionWeights {
    std::array<std::optional<double>, kNumRegions> by_region;

    std::optional<double> of(RegionTag t) const { return by_region[static_cast<std::size_t>(t)]; }
};

/// w ~ 1 / (1 - e^{-H_avg}) or 1 / H_avg per region; low-entropy regions get
/// large weights. Vanishing entropy is clipped at w_max instead of diverging.
inline RegionWeights surrogate_weights(const RegionEntropy& stats, EntropyRule rule, double w_max) {
    RegionWeights out;
    for (std::size_t r = 0; r < kNumRegions; ++r) {
        const RegionStat& s = stats.by_region[r];
        if (!s.mean_entropy.has_value()) continue;
        const double h = std::max(*s.mean_entropy, 0.0);
        double w = 0.0;
        if (rule == EntropyRule::inv_one_minus_exp) {
            const double denom = 1.0 - std::exp(-h);
            w = denom > 0.0 ? 1.0 / denom : w_max;
        } else {
            w = h > 0.0 ? 1.0 / h : w_max;
        }
        out.by_region[r] = std::min(w, w_max);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Monte-Carlo variance measurement
// ---------------------------------------------------------------------------

enum class WeightsSource { uniform, surrogate, optimal };

inline std::string_view weights_source_name(WeightsSource s) {
    switch (s) {
        case WeightsSource::uniform: return "uniform";
        case WeightsSource::surrogate: return "surrogate";
        case WeightsSource::optimal: return "optimal";
    }
    return "uniform";
}

struct McVarianceResult {
    std::vector<double> per_coord_var;  // across replicate group estimators
    double trace = 0.0;
    double ci_low = 0.0;   // bootstrap 95% CI on the trace
    double ci_high = 0.0;
    double bound_value = 0.0;      // sum beta w^2 for the weights used
    double minimized_bound = 0.0;  // T^2 / sum beta^{-1}
    WeightVector weights;
    int n_groups = 0;
    int group_size = 0;
};

struct McVarianceOptions {
    int n_groups = 1000;
    int group_size = 8;
    std::uint64_t seed = 0;
    double delta = 1e-6;           // advantage stability constant
    int bootstrap_resamples = 1000;
    int beta_mc_samples = 20000;   // when the env is too large to enumerate
};

/// Empirical covariance trace of the (re)weighted mini-batch estimator over
/// seeded replicate groups. Replicate i always uses derive_seed(seed, i), so
/// results are independent of any parallel execution schedule.
inline McVarianceResult mc_variance(const SoftmaxPolicy& policy, const Environment& env,
                                    WeightsSource source, const McVarianceOptions& opt) {
    if (env.stop_token) throw StateSpaceTooLarge("mc_variance requires a fixed-horizon env");
    if (opt.n_groups < 2) throw GroupTooSmall("mc_variance: need n_groups >= 2");

    bool enumerable = true;
    try {
        require_enumerable(env);
    } catch (const StateSpaceTooLarge&) {
        enumerable = false;
    }

    auto make_beta = [&](BetaKind kind) {
        BetaOptions bopt;
        bopt.kind = kind;
        if (kind != BetaKind::entropy_only && !enumerable) {
            bopt.kind = BetaKind::monte_carlo;
            bopt.n_samples = opt.beta_mc_samples;
            bopt.seed = derive_seed(opt.seed, 0xBE7AULL);
        }
        return beta_estimate(policy, env, bopt);
    };

    const BetaProfile beta = make_beta(BetaKind::exact_toy);

    McVarianceResult out;
    out.n_groups = opt.n_groups;
    out.group_size = opt.group_size;
    switch (source) {
        case WeightsSource::uniform:
            out.weights = WeightVector::uniform(env.horizon);
            break;
        case WeightsSource::optimal:
            out.weights = optimal_weights(beta);
            break;
        case WeightsSource::surrogate: {
            // entropy-only surrogate: inverse 1 - e^{-H}, Jacobians ignored
            BetaOptions bopt;
            bopt.kind = BetaKind::entropy_only;
            bopt.n_samples = opt.beta_mc_samples;
            bopt.seed = derive_seed(opt.seed, 0xE47ULL);
            out.weights = optimal_weights(beta_estimate(policy, env, bopt));
            break;
        }
    }
    out.bound_value = variance_bound(beta, out.weights);
    out.minimized_bound = minimized_bound(beta);

    const std::size_t dim = static_cast<std::size_t>(policy.param_count());
    std::vector<std::vector<double>> estimates;
    estimates.reserve(static_cast<std::size_t>(opt.n_groups));
    for (int rep = 0; rep < opt.n_groups; ++rep) {
        Rng rng(derive_seed(opt.seed, static_cast<std::uint64_t>(rep)));
        const TrajectoryGroup group = sample_group(policy, env, opt.group_size, opt.delta, rng);
        estimates.push_back(minibatch_gradient(policy, group, &out.weights));
    }

    out.per_coord_var.assign(dim, 0.0);
    std::vector<double> column(estimates.size());
    for (std::size_t k = 0; k < dim; ++k) {
        for (std::size_t i = 0; i < estimates.size(); ++i) column[i] = estimates[i][k];
        out.per_coord_var[k] = variance_of(column, /*population=*/true);
    }
    out.trace = kahan_sum(out.per_coord_var);

    auto trace_of = [&](std::span<const std::size_t> idx) {
        double total = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
            double mean = 0.0;
            for (std::size_t i : idx) mean += estimates[i][k];
            mean /= static_cast<double>(idx.size());
            double var = 0.0;
            for (std::size_t i : idx) {
                const double d = estimates[i][k] - mean;
                var += d * d;
            }
            total += var / static_cast<double>(idx.size());
        }
        return total;
    };
    const BootstrapCi ci = bootstrap_ci(estimates.size(), trace_of, opt.bootstrap_resamples,
                                        derive_seed(opt.seed, 0xB007ULL));
    out.ci_low = ci.lo;
    out.ci_high = ci.hi;
    return out;
}

}  // namespace restkit
