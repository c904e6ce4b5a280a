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

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "restkit/reward.hpp"
#include "restkit/util.hpp"

namespace restkit {

// Probabilities are floored here before taking logs so that entropy and
// log-prob evaluations are total.
constexpr double kProbFloor = 1e-300;

/// Feature map phi(context, history, position) -> R^dim. Must be
/// deterministic; the policy is linear in these features.
using FeatureFn = std::function<std::vector<double>(int context, std::span<const int> history, int t)>;

/// Linear-softmax sequence policy: logits z = theta^T phi. Small enough that
/// Jacobians are exact and full trajectory enumeration is feasible, which is
/// what makes the estimator claims checkable.
struct SoftmaxPolicy {
    int vocab = 2;
    int dim = 1;
    std::vector<double> theta;  // dim x vocab, row-major: theta[j * vocab + v]
    FeatureFn feature_fn;

    static SoftmaxPolicy zeros(int dim, int vocab, FeatureFn features) {
        SoftmaxPolicy p;
        p.vocab = vocab;
        p.dim = dim;
        p.theta.assign(static_cast<std::size_t>(dim) * static_cast<std::size_t>(vocab), 0.0);
        p.feature_fn = std::move(features);
        return p;
    }

    int param_count() const { return dim * vocab; }
    double& theta_at(int j, int v) { return theta[static_cast<std::size_t>(j) * vocab + v]; }
    double theta_at(int j, int v) const { return theta[static_cast<std::size_t>(j) * vocab + v]; }
};

namespace features {

/// phi = (1); every step shares one distribution per context history length.
inline FeatureFn constant() {
    return [](int, std::span<const int>, int) { return std::vector<double>{1.0}; };
}

/// phi = one-hot(position), dim = horizon.
inline FeatureFn position(int horizon) {
    return [horizon](int, std::span<const int>, int t) {
        std::vector<double> phi(static_cast<std::size_t>(horizon), 0.0);
        if (t >= 0 && t < horizon) phi[static_cast<std::size_t>(t)] = 1.0;
        return phi;
    };
}

/// phi = one-hot(context * horizon + position), dim = contexts * horizon.
inline FeatureFn context_position(int num_contexts, int horizon) {
    return [num_contexts, horizon](int ctx, std::span<const int>, int t) {
        std::vector<double> phi(static_cast<std::size_t>(num_contexts) * horizon, 0.0);
        if (ctx >= 0 && ctx < num_contexts && t >= 0 && t < horizon)
            phi[static_cast<std::size_t>(ctx) * horizon + t] = 1.0;
        return phi;
    };
}

/// Position one-hot plus one-hot of the previous token; makes step
/// distributions genuinely history-dependent.
inline FeatureFn position_last_token(int horizon, int vocab) {
    return [horizon, vocab](int, std::span<const int> history, int t) {
        std::vector<double> phi(static_cast<std::size_t>(horizon + vocab), 0.0);
        if (t >= 0 && t < horizon) phi[static_cast<std::size_t>(t)] = 1.0;
        if (!history.empty()) {
            const int last = history.back();
            if (last >= 0 && last < vocab) phi[static_cast<std::size_t>(horizon + last)] = 1.0;
        }
        return phi;
    };
}

/// phi = scale[t] * one-hot(position); per-step feature magnitudes control
/// the per-step Jacobian norms (and with them beta_t).
inline FeatureFn scaled_position(std::vector<double> scales) {
    return [scales = std::move(scales)](int, std::span<const int>, int t) {
        std::vector<double> phi(scales.size(), 0.0);
        if (t >= 0 && t < static_cast<int>(scales.size()))
            phi[static_cast<std::size_t>(t)] = scales[static_cast<std::size_t>(t)];
        return phi;
    };
}

}  // namespace features

struct StepDistribution {
    std::vector<double> logits;
    std::vector<double> probs;
    double entropy = 0.0;  // Shannon, nats
};

/// One sampled step. logprob_old is frozen at rollout time; logprob_cur is
/// re-evaluated by the losses against the live policy.
struct StepRecord {
    std::vector<double> logits;
    std::vector<double> probs;
    int token = 0;
    double logprob_cur = 0.0;
    double logprob_old = std::numeric_limits<double>::quiet_NaN();
    double entropy = 0.0;
};

struct Trajectory {
    int context = 0;
    std::vector<StepRecord> steps;
    double reward = 0.0;

    int length() const { return static_cast<int>(steps.size()); }
    std::vector<int> tokens() const {
        std::vector<int> out;
        out.reserve(steps.size());
        for (const auto& s : steps) out.push_back(s.token);
        return out;
    }
};

namespace detail {

inline std::vector<double> softmax_stable(std::span<const double> logits) {
    double zmax = logits[0];
    for (double z : logits) zmax = std::max(zmax, z);
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t v = 0; v < logits.size(); ++v) {
        p[v] = std::exp(logits[v] - zmax);
        sum += p[v];
    }
    for (double& x : p) x /= sum;
    return p;
}

}  // namespace detail

inline double shannon_entropy(std::span<const double> probs) {
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(std::max(p, kProbFloor));
    return std::max(h, 0.0);
}

/// Renyi-2 entropy -log sum p^2; always <= Shannon entropy, with equality on
/// distributions uniform over their support.
inline double renyi2_entropy(std::span<const double> probs) {
    double s = 0.0;
    for (double p : probs) s += p * p;
    return -std::log(std::max(s, kProbFloor));
}

/// Exact per-step distribution: softmax with max-subtraction, entropy in nats.
inline StepDistribution step_distribution(const SoftmaxPolicy& policy, int context,
                                          std::span<const int> history, int t) {
    const std::vector<double> phi = policy.feature_fn(context, history, t);
    if (static_cast<int>(phi.size()) != policy.dim)
        throw LengthMismatch("step_distribution: feature dimension mismatch");
    StepDistribution out;
    out.logits.assign(static_cast<std::size_t>(policy.vocab), 0.0);
    for (int j = 0; j < policy.dim; ++j) {
        const double f = phi[static_cast<std::size_t>(j)];
        if (f == 0.0) continue;
        for (int v = 0; v < policy.vocab; ++v)
            out.logits[static_cast<std::size_t>(v)] += policy.theta_at(j, v) * f;
    }
    for (double z : out.logits)
        if (!std::isfinite(z)) throw NonFiniteLogits("step_distribution: non-finite logit");
    out.probs = detail::softmax_stable(out.logits);
    out.entropy = shannon_entropy(out.probs);
    return out;
}

/// Logit-space score s = one_hot(token) - p; coordinates sum to zero.
inline std::vector<double> score_vector(std::span<const double> probs, int token) {
    std::vector<double> s(probs.begin(), probs.end());
    for (double& x : s) x = -x;
    s[static_cast<std::size_t>(token)] += 1.0;
    return s;
}

/// Exact Jacobian dz/dtheta as a flat row-major V x (dim*V) matrix. For the
/// linear-softmax parameterization J[v][(j,u)] = phi_j * 1[u == v].
inline std::vector<double> step_jacobian(const SoftmaxPolicy& policy, int context,
                                         std::span<const int> history, int t) {
    const std::vector<double> phi = policy.feature_fn(context, history, t);
    const std::size_t D = static_cast<std::size_t>(policy.param_count());
    std::vector<double> J(static_cast<std::size_t>(policy.vocab) * D, 0.0);
    for (int v = 0; v < policy.vocab; ++v)
        for (int j = 0; j < policy.dim; ++j)
            J[static_cast<std::size_t>(v) * D + static_cast<std::size_t>(j) * policy.vocab + v] =
                phi[static_cast<std::size_t>(j)];
    return J;
}

/// ||J||_F^2 without materializing J: V * ||phi||^2 for this parameterization.
inline double jacobian_frobenius_sq(const SoftmaxPolicy& policy, int context,
                                    std::span<const int> history, int t) {
    const std::vector<double> phi = policy.feature_fn(context, history, t);
    double norm2 = 0.0;
    for (double f : phi) norm2 += f * f;
    return static_cast<double>(policy.vocab) * norm2;
}

/// grad += coeff * J_t^T v for an arbitrary logit-space vector v.
inline void accumulate_logit_grad(const SoftmaxPolicy& policy, int context,
                                  std::span<const int> history, int t,
                                  std::span<const double> logit_grad, double coeff,
                                  std::vector<double>& grad) {
    const std::vector<double> phi = policy.feature_fn(context, history, t);
    for (int j = 0; j < policy.dim; ++j) {
        const double fj = phi[static_cast<std::size_t>(j)];
        if (fj == 0.0) continue;
        const std::size_t row = static_cast<std::size_t>(j) * policy.vocab;
        for (int v = 0; v < policy.vocab; ++v)
            grad[row + v] += coeff * fj * logit_grad[static_cast<std::size_t>(v)];
    }
}

/// grad += coeff * J^T s where s = one_hot(token) - probs. This is the exact
/// gradient of log pi(token | .) scaled by coeff.
inline void accumulate_logprob_grad(const SoftmaxPolicy& policy, int context,
                                    std::span<const int> history, int t,
                                    std::span<const double> probs, int token, double coeff,
                                    std::vector<double>& grad) {
    const std::vector<double> phi = policy.feature_fn(context, history, t);
    for (int j = 0; j < policy.dim; ++j) {
        const double fj = phi[static_cast<std::size_t>(j)];
        if (fj == 0.0) continue;
        const std::size_t row = static_cast<std::size_t>(j) * policy.vocab;
        for (int v = 0; v < policy.vocab; ++v) grad[row + v] -= coeff * fj * probs[static_cast<std::size_t>(v)];
        grad[row + token] += coeff * fj;
    }
}

// ---------------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------------

/// Reward of a finished rollout: (context, tokens, training progress nu).
using RewardFn = std::function<double(int context, std::span<const int> tokens, double nu)>;

/// A small sequence environment. Text environments additionally map tokens to
/// string fragments so rollouts can be rendered, tagged, and scored by the
/// rule-based reward.
struct Environment {
    int vocab = 2;
    int horizon = 1;
    std::vector<double> context_probs{1.0};
    std::optional<int> stop_token;  // sampling ends after emitting it
    RewardFn reward;

    std::vector<std::string> fragments;            // token id -> text; empty for table envs
    std::vector<std::vector<int>> gold_sequences;  // per context, may be empty
    std::vector<ToolCallSet> gold_calls;           // per context, text envs
    ResponseTemplate tmpl;
    RewardConfig reward_cfg;

    int num_contexts() const { return static_cast<int>(context_probs.size()); }
    bool is_text() const { return !fragments.empty(); }

    std::string render(std::span<const int> tokens) const {
        std::string out;
        for (int t : tokens)
            if (t >= 0 && t < static_cast<int>(fragments.size())) out += fragments[static_cast<std::size_t>(t)];
        return out;
    }
};

/// Samples one trajectory; fully reproducible for a fixed engine state.
/// Parallel rollouts must use independently derived streams
/// (derive_seed(base, worker_index)).
inline Trajectory sample_trajectory(const SoftmaxPolicy& policy, const Environment& env, Rng& rng,
                                    double nu = 0.0) {
    Trajectory traj;
    traj.context = sample_categorical(env.context_probs, rng);
    std::vector<int> history;
    history.reserve(static_cast<std::size_t>(env.horizon));
    for (int t = 0; t < env.horizon; ++t) {
        StepDistribution dist = step_distribution(policy, traj.context, history, t);
        const int y = sample_categorical(dist.probs, rng);
        StepRecord rec;
        rec.logits = std::move(dist.logits);
        rec.probs = std::move(dist.probs);
        rec.token = y;
        rec.entropy = dist.entropy;
        rec.logprob_cur = std::log(std::max(rec.probs[static_cast<std::size_t>(y)], kProbFloor));
        rec.logprob_old = rec.logprob_cur;
        traj.steps.push_back(std::move(rec));
        history.push_back(y);
        if (env.stop_token && y == *env.stop_token) break;
    }
    if (env.reward) traj.reward = env.reward(traj.context, history, nu);
    return traj;
}

inline Trajectory sample_trajectory(const SoftmaxPolicy& policy, const Environment& env,
                                    std::uint64_t seed, double nu = 0.0) {
    Rng rng(seed);
    return sample_trajectory(policy, env, rng, nu);
}

// ---------------------------------------------------------------------------
// Enumeration oracles
// ---------------------------------------------------------------------------

inline double enumeration_size(const Environment& env) {
    return static_cast<double>(env.num_contexts()) *
           std::pow(static_cast<double>(env.vocab), static_cast<double>(env.horizon));
}

inline void require_enumerable(const Environment& env, double limit = 1e6) {
    if (env.stop_token)
        throw StateSpaceTooLarge("enumeration does not support stop tokens");
    if (enumeration_size(env) > limit)
        throw StateSpaceTooLarge("state space exceeds enumeration limit");
}

namespace detail {

// Depth-first enumeration of complete trajectories. visit(context, tokens,
// prob, sum_score_grad) where sum_score_grad = sum_t J_t^T s_t.
template <class Visit>
void enumerate_sequences(const SoftmaxPolicy& policy, const Environment& env, int context,
                         std::vector<int>& history, double prob,
                         const std::vector<double>& grad_prefix, Visit&& visit) {
    const int t = static_cast<int>(history.size());
    if (t == env.horizon) {
        visit(context, std::span<const int>(history), prob, grad_prefix);
        return;
    }
    const StepDistribution dist = step_distribution(policy, context, history, t);
    for (int y = 0; y < env.vocab; ++y) {
        std::vector<double> grad = grad_prefix;
        accumulate_logprob_grad(policy, context, history, t, dist.probs, y, 1.0, grad);
        history.push_back(y);
        enumerate_sequences(policy, env, context, history, prob * dist.probs[static_cast<std::size_t>(y)],
                            grad, std::forward<Visit>(visit));
        history.pop_back();
    }
}

}  // namespace detail

template <class Visit>
void for_each_trajectory(const SoftmaxPolicy& policy, const Environment& env, Visit&& visit) {
    require_enumerable(env);
    for (int c = 0; c < env.num_contexts(); ++c) {
        if (env.context_probs[static_cast<std::size_t>(c)] == 0.0) continue;
        std::vector<int> history;
        std::vector<double> zero(static_cast<std::size_t>(policy.param_count()), 0.0);
        detail::enumerate_sequences(policy, env, c, history, env.context_probs[static_cast<std::size_t>(c)],
                                    zero, std::forward<Visit>(visit));
    }
}

/// Visits every (context, history prefix of length t, probability).
template <class Visit>
void for_each_prefix(const SoftmaxPolicy& policy, const Environment& env, int t, Visit&& visit) {
    require_enumerable(env);
    for (int c = 0; c < env.num_contexts(); ++c) {
        const double pc = env.context_probs[static_cast<std::size_t>(c)];
        if (pc == 0.0) continue;
        std::vector<int> history;
        std::function<void(double)> rec = [&](double prob) {
            if (static_cast<int>(history.size()) == t) {
                visit(c, std::span<const int>(history), prob);
                return;
            }
            const StepDistribution dist =
                step_distribution(policy, c, history, static_cast<int>(history.size()));
            for (int y = 0; y < env.vocab; ++y) {
                history.push_back(y);
                rec(prob * dist.probs[static_cast<std::size_t>(y)]);
                history.pop_back();
            }
        };
        rec(pc);
    }
}

/// J(theta) = E[R(tau)] by full enumeration.
inline double exact_return(const SoftmaxPolicy& policy, const Environment& env, double nu = 0.0) {
    double j = 0.0;
    for_each_trajectory(policy, env, [&](int c, std::span<const int> tokens, double prob,
                                         const std::vector<double>&) {
        j += prob * env.reward(c, tokens, nu);
    });
    return j;
}

struct ExactPolicyGradient {
    std::vector<double> grad;     // exact grad of E[R]
    double expected_return = 0.0;
    double reward_variance = 0.0;  // population variance of R under pi
};

/// Exact policy gradient and reward moments by enumeration; the independent
/// oracle against which the sampled estimators are checked.
inline ExactPolicyGradient exact_policy_gradient(const SoftmaxPolicy& policy, const Environment& env,
                                                 double nu = 0.0) {
    ExactPolicyGradient out;
    out.grad.assign(static_cast<std::size_t>(policy.param_count()), 0.0);
    double second = 0.0;
    for_each_trajectory(policy, env, [&](int c, std::span<const int> tokens, double prob,
                                         const std::vector<double>& score_sum) {
        const double r = env.reward(c, tokens, nu);
        out.expected_return += prob * r;
        second += prob * r * r;
        for (std::size_t k = 0; k < out.grad.size(); ++k) out.grad[k] += prob * r * score_sum[k];
    });
    out.reward_variance = std::max(0.0, second - out.expected_return * out.expected_return);
    return out;
}

}  // namespace restkit
