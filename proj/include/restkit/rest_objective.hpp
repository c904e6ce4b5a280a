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
#include <string_view>
#include <vector>

#include "restkit/estimators.hpp"
#include "restkit/policy.hpp"
#include "restkit/region_tagger.hpp"

namespace restkit {

/// Whether the reweighting factor is normalized against each sequence's own
/// mean weight or against the pooled mean over the whole group.
enum class NormalizationScope { per_sequence, group_pooled };

struct WeightConfig {
    double w_min = 0.5;
    double w_max = 2.0;
    double alpha_f = 1.0;  // format anneal rate
    double alpha_p = 1.0;  // parameter ramp rate
    double alpha_t = 1.0;  // chain-of-thought ramp rate
    double epsilon_clip = 0.2;
    double delta = 1e-6;   // advantage stability constant
    double delta_w = 0.0;  // weight-normalization stabilizer; w_min > 0 already
                           // guarantees a positive mean, so 0 keeps mean(omega) = 1
    double kl_coeff = 0.0; // GRPO only
    NormalizationScope scope = NormalizationScope::per_sequence;
};

/// Region base weights at a given training progress nu. curriculum_update
/// recomputes the schedule from the initialized values at each nu; it does
/// not accumulate across invocations.
struct CurriculumState {
    double nu = 0.0;
    double w_fmt = 1.0;
    double w_name = 1.0;
    double w_para = 1.0;
    double w_thk = 1.0;
    double w_other = 1.0;
};

inline double region_weight(const CurriculumState& state, RegionTag tag) {
    switch (tag) {
        case RegionTag::Format: return state.w_fmt;
        case RegionTag::ToolName: return state.w_name;
        case RegionTag::Parameter: return state.w_para;
        case RegionTag::Thought: return state.w_thk;
        case RegionTag::Other: return state.w_other;
    }
    return state.w_other;
}

/// Entropy-based initialization of the region base weights. Regions absent
/// from the statistics default to 1, as does Other.
inline CurriculumState init_region_weights(const RegionEntropy& stats, EntropyRule rule,
                                           const WeightConfig& cfg) {
    const RegionWeights raw = surrogate_weights(stats, rule, cfg.w_max);
    CurriculumState state;
    state.w_fmt = raw.of(RegionTag::Format).value_or(1.0);
    state.w_name = raw.of(RegionTag::ToolName).value_or(1.0);
    state.w_para = raw.of(RegionTag::Parameter).value_or(1.0);
    state.w_thk = raw.of(RegionTag::Thought).value_or(1.0);
    state.w_other = 1.0;
    return state;
}

/// Curriculum schedule at progress state.nu: format weights anneal down,
/// parameter and chain-of-thought weights ramp up, tool names pin at w_max.
/// Everything lands in [w_min, w_max].
inline CurriculumState curriculum_update(const CurriculumState& init, const WeightConfig& cfg) {
    CurriculumState out = init;
    out.w_fmt = clip(std::max(cfg.w_min, init.w_fmt - cfg.alpha_f * init.nu), cfg.w_min, cfg.w_max);
    out.w_name = cfg.w_max;
    out.w_para = clip(std::min(cfg.w_max, init.w_para + cfg.alpha_p * init.nu), cfg.w_min, cfg.w_max);
    out.w_thk = clip(std::min(cfg.w_max, init.w_thk + cfg.alpha_t * init.nu), cfg.w_min, cfg.w_max);
    out.w_other = clip(init.w_other, cfg.w_min, cfg.w_max);
    return out;
}

namespace detail {

inline std::vector<double> clipped_token_weights(std::span<const RegionTag> tags,
                                                 const CurriculumState& state,
                                                 const WeightConfig& cfg) {
    std::vector<double> w(tags.size());
    for (std::size_t t = 0; t < tags.size(); ++t)
        w[t] = clip(region_weight(state, tags[t]), cfg.w_min, cfg.w_max);
    return w;
}

}  // namespace detail

/// Per-token normalized factor omega_t = clip(w, w_min, w_max) / (mean + delta_w),
/// computed over one sequence. With delta_w = 0 the omegas average to 1
/// exactly, which redistributes signal without changing its total.
inline std::vector<double> normalize_weights(std::span<const RegionTag> tags,
                                             const CurriculumState& state, const WeightConfig& cfg) {
    if (tags.empty()) throw EmptySequence("normalize_weights: empty sequence");
    std::vector<double> w = detail::clipped_token_weights(tags, state, cfg);
    const double wbar = mean_of(w);
    for (double& x : w) x /= (wbar + cfg.delta_w);
    return w;
}

inline std::vector<double> normalize_weights(const TaggedResponse& tagged, const CurriculumState& state,
                                             const WeightConfig& cfg) {
    return normalize_weights(std::span<const RegionTag>(tagged.tags), state, cfg);
}

/// Group variant: per_sequence normalizes each sequence by its own mean;
/// group_pooled divides every sequence by the pooled mean over all tokens in
/// the group (the global-schedule reading of the update algorithm).
inline std::vector<std::vector<double>> normalize_weights_group(
    const std::vector<std::vector<RegionTag>>& group_tags, const CurriculumState& state,
    const WeightConfig& cfg) {
    std::vector<std::vector<double>> out;
    out.reserve(group_tags.size());
    if (cfg.scope == NormalizationScope::per_sequence) {
        for (const auto& tags : group_tags) out.push_back(normalize_weights(tags, state, cfg));
        return out;
    }
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& tags : group_tags) {
        if (tags.empty()) throw EmptySequence("normalize_weights_group: empty sequence");
        for (double w : detail::clipped_token_weights(tags, state, cfg)) sum += w;
        count += tags.size();
    }
    const double wbar = sum / static_cast<double>(count);
    for (const auto& tags : group_tags) {
        std::vector<double> w = detail::clipped_token_weights(tags, state, cfg);
        for (double& x : w) x /= (wbar + cfg.delta_w);
        out.push_back(std::move(w));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Clipped objectives
// ---------------------------------------------------------------------------

struct LossResult {
    double loss = 0.0;
    std::vector<double> grad;
};

namespace detail {

inline void check_old_logprobs(const TrajectoryGroup& group) {
    for (const Trajectory& traj : group.trajectories)
        for (const StepRecord& s : traj.steps)
            if (std::isnan(s.logprob_old))
                throw MissingOldLogProbs("loss: trajectory lacks rollout-time log-probs");
}

}  // namespace detail

/// L_ResT = -(1/G) sum_i sum_t (omega_t / T_i) min(r A, clip(r, 1-eps, 1+eps) A)
/// with per-token importance ratios r against the rollout-time policy. The
/// gradient is exact for the toy policy; at clip boundaries the unclipped
/// branch is taken.
inline LossResult rest_loss(const SoftmaxPolicy& policy, const TrajectoryGroup& group,
                            const std::vector<std::vector<double>>& omega, const WeightConfig& cfg) {
    detail::check_old_logprobs(group);
    if (omega.size() != group.trajectories.size())
        throw LengthMismatch("rest_loss: omega vs group size");
    LossResult out;
    out.grad.assign(static_cast<std::size_t>(policy.param_count()), 0.0);
    const double inv_g = 1.0 / static_cast<double>(group.size());

    for (int i = 0; i < group.size(); ++i) {
        const Trajectory& traj = group.trajectories[static_cast<std::size_t>(i)];
        const std::vector<double>& w = omega[static_cast<std::size_t>(i)];
        if (static_cast<int>(w.size()) != traj.length())
            throw LengthMismatch("rest_loss: omega vs trajectory length");
        const double adv = group.advantages[static_cast<std::size_t>(i)];
        const double inv_t = 1.0 / static_cast<double>(traj.length());
        std::vector<int> history;
        history.reserve(traj.steps.size());
        for (int t = 0; t < traj.length(); ++t) {
            const StepRecord& step = traj.steps[static_cast<std::size_t>(t)];
            const StepDistribution cur = step_distribution(policy, traj.context, history, t);
            const double logp = std::log(std::max(cur.probs[static_cast<std::size_t>(step.token)], kProbFloor));
            const double ratio = std::exp(logp - step.logprob_old);
            const double unclipped = ratio * adv;
            const double clipped = clip(ratio, 1.0 - cfg.epsilon_clip, 1.0 + cfg.epsilon_clip) * adv;
            const double term = std::min(unclipped, clipped);
            const double scale = w[static_cast<std::size_t>(t)] * inv_t * inv_g;
            out.loss -= scale * term;
            if (unclipped <= clipped)  // ties resolve to the differentiable branch
                accumulate_logprob_grad(policy, traj.context, history, t, cur.probs, step.token,
                                        -scale * adv * ratio, out.grad);
            history.push_back(step.token);
        }
    }
    return out;
}

/// Exact KL(p || q) over the token simplex, in nats.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
    double kl = 0.0;
    for (std::size_t v = 0; v < p.size(); ++v)
        if (p[v] > 0.0) kl += p[v] * (std::log(std::max(p[v], kProbFloor)) - std::log(std::max(q[v], kProbFloor)));
    return kl;
}

/// GRPO baseline: the same clipped surrogate with uniform token weights plus
/// kl_coeff times a per-step closed-form KL penalty against a reference
/// policy. Reduces bit-for-bit to rest_loss with omega = 1 when kl_coeff = 0.
inline LossResult grpo_loss(const SoftmaxPolicy& policy, const TrajectoryGroup& group,
                            const WeightConfig& cfg, const SoftmaxPolicy* ref_policy = nullptr) {
    detail::check_old_logprobs(group);
    if (cfg.kl_coeff > 0.0 && ref_policy == nullptr)
        throw std::invalid_argument("grpo_loss: kl_coeff > 0 requires a reference policy");
    LossResult out;
    out.grad.assign(static_cast<std::size_t>(policy.param_count()), 0.0);
    const double inv_g = 1.0 / static_cast<double>(group.size());

    for (int i = 0; i < group.size(); ++i) {
        const Trajectory& traj = group.trajectories[static_cast<std::size_t>(i)];
        const double adv = group.advantages[static_cast<std::size_t>(i)];
        const double inv_t = 1.0 / static_cast<double>(traj.length());
        std::vector<int> history;
        history.reserve(traj.steps.size());
        for (int t = 0; t < traj.length(); ++t) {
            const StepRecord& step = traj.steps[static_cast<std::size_t>(t)];
            const StepDistribution cur = step_distribution(policy, traj.context, history, t);
            const double logp = std::log(std::max(cur.probs[static_cast<std::size_t>(step.token)], kProbFloor));
            const double ratio = std::exp(logp - step.logprob_old);
            const double unclipped = ratio * adv;
            const double clipped = clip(ratio, 1.0 - cfg.epsilon_clip, 1.0 + cfg.epsilon_clip) * adv;
            const double scale = inv_t * inv_g;
            out.loss -= scale * std::min(unclipped, clipped);
            if (unclipped <= clipped)
                accumulate_logprob_grad(policy, traj.context, history, t, cur.probs, step.token,
                                        -scale * adv * ratio, out.grad);
            if (cfg.kl_coeff > 0.0) {
                const StepDistribution ref = step_distribution(*ref_policy, traj.context, history, t);
                const double kl = kl_divergence(cur.probs, ref.probs);
                out.loss += cfg.kl_coeff * scale * kl;
                // d KL / d z = p .* (log(p / q) - KL)
                std::vector<double> dkl(cur.probs.size());
                for (std::size_t v = 0; v < cur.probs.size(); ++v)
                    dkl[v] = cur.probs[v] *
                             (std::log(std::max(cur.probs[v], kProbFloor)) -
                              std::log(std::max(ref.probs[v], kProbFloor)) - kl);
                accumulate_logit_grad(policy, traj.context, history, t, dkl, cfg.kl_coeff * scale,
                                      out.grad);
            }
            history.push_back(step.token);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Toy training loop
// ---------------------------------------------------------------------------

enum class Algo { rest, grpo };

inline std::string_view algo_name(Algo a) { return a == Algo::rest ? "rest" : "grpo"; }

struct TrainConfig {
    WeightConfig weights;
    RewardConfig reward;
    EntropyRule rule = EntropyRule::inv_one_minus_exp;
    double learning_rate = 5.0;
    int group_size = 8;
    int inner_epochs = 1;
    // Common random numbers: every training step replays the same underlying
    // uniforms, so step-to-step differences in the trace reflect policy
    // movement only (a fixed policy yields a literally flat trace). Off by
    // default: with sparse rewards a zero-gradient step would otherwise
    // replay the same empty group forever.
    bool common_random_numbers = false;
};

struct TraceRow {
    int step = 0;
    double mean_reward = 0.0;         // unscaled (nu = 0) rule reward
    double mean_reward_scaled = 0.0;  // reward actually used for advantages
    double mean_entropy = 0.0;
    double mean_resp_len = 0.0;
    double loss = 0.0;
    double nu = 0.0;
};

struct TrainResult {
    std::vector<TraceRow> trace;
    SoftmaxPolicy policy;
};

/// Region per policy step for a text environment: the dominant byte-level
/// region of the fragment the step emitted. Ties favor the more specific
/// region (name > parameter > thought > format > other).
inline std::vector<RegionTag> fragment_regions(const Environment& env, std::span<const int> tokens) {
    const std::string raw = env.render(tokens);
    const TaggedResponse tagged = tag_regions(raw, env.tmpl);
    static constexpr RegionTag kPriority[] = {RegionTag::ToolName, RegionTag::Parameter,
                                              RegionTag::Thought, RegionTag::Format, RegionTag::Other};
    std::vector<RegionTag> out;
    out.reserve(tokens.size());
    std::size_t off = 0;
    for (int tok : tokens) {
        const std::string& frag = env.fragments[static_cast<std::size_t>(tok)];
        std::array<std::size_t, kNumRegions> counts{};
        for (std::size_t k = off; k < off + frag.size(); ++k)
            counts[static_cast<std::size_t>(tagged.tags[k])] += 1;
        RegionTag best = RegionTag::Other;
        std::size_t best_count = 0;
        for (RegionTag cand : kPriority) {
            const std::size_t c = counts[static_cast<std::size_t>(cand)];
            if (c > best_count) {
                best = cand;
                best_count = c;
            }
        }
        out.push_back(best_count == 0 ? RegionTag::Other : best);
        off += frag.size();
    }
    return out;
}

namespace detail {

// Pooled per-region entropy over a group of tagged rollouts.
inline RegionEntropy pooled_region_entropy(const std::vector<std::vector<RegionTag>>& group_tags,
                                           const TrajectoryGroup& group) {
    std::array<double, kNumRegions> sums{};
    std::array<std::size_t, kNumRegions> counts{};
    for (std::size_t i = 0; i < group_tags.size(); ++i) {
        const Trajectory& traj = group.trajectories[i];
        for (std::size_t t = 0; t < group_tags[i].size(); ++t) {
            const auto r = static_cast<std::size_t>(group_tags[i][t]);
            sums[r] += traj.steps[t].entropy;
            counts[r] += 1;
        }
    }
    RegionEntropy out;
    for (std::size_t r = 0; r < kNumRegions; ++r) {
        out.by_region[r].count = counts[r];
        if (counts[r] > 0) out.by_region[r].mean_entropy = sums[r] / static_cast<double>(counts[r]);
    }
    return out;
}

// Per-step entropy-only weights for table environments: same surrogate rule,
// applied to the pooled mean entropy at each position.
inline std::vector<std::vector<double>> stepwise_omega(const TrajectoryGroup& group, EntropyRule rule,
                                                       const WeightConfig& cfg) {
    std::size_t max_len = 0;
    for (const auto& traj : group.trajectories) max_len = std::max(max_len, traj.steps.size());
    std::vector<double> sums(max_len, 0.0);
    std::vector<std::size_t> counts(max_len, 0);
    for (const auto& traj : group.trajectories)
        for (std::size_t t = 0; t < traj.steps.size(); ++t) {
            sums[t] += traj.steps[t].entropy;
            counts[t] += 1;
        }
    std::vector<double> base(max_len, 1.0);
    for (std::size_t t = 0; t < max_len; ++t) {
        if (counts[t] == 0) continue;
        const double h = sums[t] / static_cast<double>(counts[t]);
        double w = 0.0;
        if (rule == EntropyRule::inv_one_minus_exp) {
            const double denom = 1.0 - std::exp(-h);
            w = denom > 0.0 ? 1.0 / denom : cfg.w_max;
        } else {
            w = h > 0.0 ? 1.0 / h : cfg.w_max;
        }
        base[t] = clip(w, cfg.w_min, cfg.w_max);
    }
    std::vector<std::vector<double>> out;
    for (const auto& traj : group.trajectories) {
        std::vector<double> w(base.begin(), base.begin() + static_cast<std::ptrdiff_t>(traj.steps.size()));
        const double wbar = mean_of(w);
        for (double& x : w) x /= (wbar + cfg.delta_w);
        out.push_back(std::move(w));
    }
    return out;
}

}  // namespace detail

/// Seeded training loop for the toy policies; deterministic for a fixed seed.
/// nu advances as completed_steps / total_steps.
inline TrainResult train_toy(SoftmaxPolicy policy, const Environment& env, Algo algo, int steps,
                             std::uint64_t seed, const TrainConfig& cfg) {
    TrainResult result;
    const SoftmaxPolicy ref = policy;  // KL reference: the starting policy
    for (int k = 0; k < steps; ++k) {
        const double nu = steps > 0 ? static_cast<double>(k) / static_cast<double>(steps) : 0.0;
        Rng rng(cfg.common_random_numbers ? derive_seed(seed, 0)
                                          : derive_seed(seed, static_cast<std::uint64_t>(k)));
        TrajectoryGroup group = sample_group(policy, env, cfg.group_size, cfg.weights.delta, rng, nu);

        TraceRow row;
        row.step = k;
        row.nu = nu;
        double entropy_sum = 0.0;
        std::size_t token_count = 0;
        for (const Trajectory& traj : group.trajectories) {
            row.mean_reward_scaled += traj.reward;
            row.mean_reward += env.reward ? env.reward(traj.context, traj.tokens(), 0.0) : 0.0;
            row.mean_resp_len += static_cast<double>(traj.length());
            for (const StepRecord& s : traj.steps) entropy_sum += s.entropy;
            token_count += traj.steps.size();
        }
        const double inv_g = 1.0 / static_cast<double>(group.size());
        row.mean_reward *= inv_g;
        row.mean_reward_scaled *= inv_g;
        row.mean_resp_len *= inv_g;
        row.mean_entropy = token_count > 0 ? entropy_sum / static_cast<double>(token_count) : 0.0;

        std::vector<std::vector<double>> omega;
        if (algo == Algo::rest) {
            if (env.is_text()) {
                std::vector<std::vector<RegionTag>> group_tags;
                group_tags.reserve(group.trajectories.size());
                for (const Trajectory& traj : group.trajectories)
                    group_tags.push_back(fragment_regions(env, traj.tokens()));
                CurriculumState init =
                    init_region_weights(detail::pooled_region_entropy(group_tags, group), cfg.rule,
                                        cfg.weights);
                init.nu = nu;
                const CurriculumState sched = curriculum_update(init, cfg.weights);
                omega = normalize_weights_group(group_tags, sched, cfg.weights);
            } else {
                omega = detail::stepwise_omega(group, cfg.rule, cfg.weights);
            }
        } else {
            for (const Trajectory& traj : group.trajectories)
                omega.emplace_back(static_cast<std::size_t>(traj.length()), 1.0);
        }

        double recorded_loss = 0.0;
        for (int e = 0; e < cfg.inner_epochs; ++e) {
            const LossResult loss = algo == Algo::rest
                                        ? rest_loss(policy, group, omega, cfg.weights)
                                        : grpo_loss(policy, group, cfg.weights,
                                                    cfg.weights.kl_coeff > 0.0 ? &ref : nullptr);
            if (e == 0) recorded_loss = loss.loss;
            for (std::size_t p = 0; p < policy.theta.size(); ++p)
                policy.theta[p] -= cfg.learning_rate * loss.grad[p];
        }
        row.loss = recorded_loss;
        result.trace.push_back(row);
    }
    result.policy = std::move(policy);
    return result;
}

}  // namespace restkit
