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

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "restkit/policy.hpp"
#include "restkit/reward.hpp"
#include "restkit/tool_data.hpp"

namespace restkit {

/// An environment together with a matching starting policy.
struct LoadedEnv {
    std::string name;
    Environment env;
    SoftmaxPolicy policy;
};

/// (Re)binds a text environment's reward closure to its current gold calls,
/// template, and reward coefficients.
inline void bind_text_reward(Environment& env) {
    env.reward = [fragments = env.fragments, golds = env.gold_calls, tmpl = env.tmpl,
                  cfg = env.reward_cfg](int ctx, std::span<const int> tokens, double nu) {
        std::string raw;
        for (int t : tokens)
            if (t >= 0 && t < static_cast<int>(fragments.size()))
                raw += fragments[static_cast<std::size_t>(t)];
        return score_response(raw, golds[static_cast<std::size_t>(ctx)], tmpl, cfg, nu).r_final;
    };
}

/// Boosts the logits of each context's gold token at every position. Mimics a
/// pretrained model: cold-started policies essentially never emit a parseable
/// call, so the rule reward would stay at zero forever. Requires
/// context_position features.
inline void warm_start_gold(SoftmaxPolicy& policy, const Environment& env, double strength) {
    for (int c = 0; c < static_cast<int>(env.gold_sequences.size()); ++c) {
        const auto& gold = env.gold_sequences[static_cast<std::size_t>(c)];
        for (int t = 0; t < static_cast<int>(gold.size()) && t < env.horizon; ++t)
            policy.theta_at(c * env.horizon + t, gold[static_cast<std::size_t>(t)]) += strength;
    }
}

/// Synthetic tool-call environment: the vocabulary is a set of response
/// fragments, the gold rollout renders to a well-formed think + tool-call
/// response, and rewards come from the rule-based scorer. Two contexts with
/// different gold calls; distractor fragments keep every region non-trivial.
inline LoadedEnv make_toolcall_env(double warm_start = 3.0) {
    LoadedEnv out;
    out.name = "toolcall";
    Environment& env = out.env;
    env.fragments = {
        "<think>",                  // 0
        "plan",                     // 1  thought words: interchangeable,
        "so",                       // 2  reward-neutral
        "check",                    // 3
        "maybe",                    // 4
        "</think>",                 // 5
        "<tool_call>",              // 6
        "{\"name\":\"",             // 7
        "get_weather",              // 8
        "get_time",                 // 9
        "\",\"arguments\":{\"city\":",  // 10
        "\"Paris\"}}",              // 11
        "\"Tokyo\"}}",              // 12
        "</tool_call>",             // 13
        "?",                        // 14
        "",                         // 15 (stop)
    };
    env.vocab = static_cast<int>(env.fragments.size());
    env.horizon = 12;
    env.stop_token = 15;
    env.context_probs = {0.5, 0.5};
    // three thought-word slots before the call keep the chain-of-thought
    // region the dominant entropy reservoir, as in real responses
    env.gold_sequences = {{0, 1, 2, 3, 5, 6, 7, 8, 10, 11, 13, 15},
                          {0, 1, 2, 3, 5, 6, 7, 9, 10, 12, 13, 15}};

    env.gold_calls.resize(2);
    env.gold_calls[0].calls.push_back(ToolCall{"get_weather", {{"city", CanonicalValue("Paris")}}});
    env.gold_calls[1].calls.push_back(ToolCall{"get_time", {{"city", CanonicalValue("Tokyo")}}});
    bind_text_reward(env);

    out.policy = SoftmaxPolicy::zeros(env.num_contexts() * env.horizon, env.vocab,
                                      features::context_position(env.num_contexts(), env.horizon));
    if (warm_start != 0.0) warm_start_gold(out.policy, env, warm_start);
    return out;
}

/// Fixed-horizon environment whose reward is an indicator on one step's
/// token. Per-step feature scales plus one sharpened step produce a beta
/// profile with a large spread, which is where reweighting pays off.
inline LoadedEnv make_indicator_env(int vocab = 4, int horizon = 4,
                                    std::vector<double> feature_scales = {1.0, 2.0, 2.0, 2.0},
                                    int reward_step = 0, int reward_token = 0, int sharp_step = 0,
                                    double sharp_logit = 2.0) {
    LoadedEnv out;
    out.name = "indicator";
    Environment& env = out.env;
    env.vocab = vocab;
    env.horizon = horizon;
    env.context_probs = {1.0};
    env.reward = [reward_step, reward_token](int, std::span<const int> tokens, double) {
        return reward_step < static_cast<int>(tokens.size()) &&
                       tokens[static_cast<std::size_t>(reward_step)] == reward_token
                   ? 1.0
                   : 0.0;
    };
    out.policy = SoftmaxPolicy::zeros(horizon, vocab, features::scaled_position(feature_scales));
    if (sharp_step >= 0 && sharp_step < horizon) {
        const double scale = feature_scales[static_cast<std::size_t>(sharp_step)];
        if (scale != 0.0) out.policy.theta_at(sharp_step, reward_token) = sharp_logit / scale;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Environment spec files (JSON)
// ---------------------------------------------------------------------------

inline LoadedEnv environment_from_json(const nlohmann::json& j) {
    try {
        const std::string kind = j.at("kind").get<std::string>();
        if (kind == "fragments") {
            LoadedEnv out;
            out.name = j.value("name", std::string("fragments"));
            Environment& env = out.env;
            env.fragments = j.at("fragments").get<std::vector<std::string>>();
            env.vocab = static_cast<int>(env.fragments.size());
            env.horizon = j.at("horizon").get<int>();
            if (j.contains("stop_token")) env.stop_token = j.at("stop_token").get<int>();
            if (j.contains("template")) {
                const auto& t = j.at("template");
                env.tmpl.think_open = t.value("think_open", env.tmpl.think_open);
                env.tmpl.think_close = t.value("think_close", env.tmpl.think_close);
                env.tmpl.call_open = t.value("call_open", env.tmpl.call_open);
                env.tmpl.call_close = t.value("call_close", env.tmpl.call_close);
            }
            if (j.contains("reward")) {
                const auto& r = j.at("reward");
                env.reward_cfg.beta_acc = r.value("beta_acc", env.reward_cfg.beta_acc);
                env.reward_cfg.beta_fmt = r.value("beta_fmt", env.reward_cfg.beta_fmt);
                env.reward_cfg.dynamic_scaling = r.value("dynamic_scaling", env.reward_cfg.dynamic_scaling);
            }
            for (const auto& ctx : j.at("contexts")) {
                env.gold_calls.push_back(calls_from_json(ctx.at("gold_calls")));
                env.gold_sequences.push_back(ctx.value("gold_sequence", std::vector<int>{}));
            }
            const auto n_ctx = env.gold_calls.size();
            if (n_ctx == 0) throw DataError("environment spec has no contexts");
            env.context_probs.assign(n_ctx, 1.0 / static_cast<double>(n_ctx));
            bind_text_reward(env);
            out.policy = SoftmaxPolicy::zeros(static_cast<int>(n_ctx) * env.horizon, env.vocab,
                                              features::context_position(static_cast<int>(n_ctx), env.horizon));
            warm_start_gold(out.policy, env, j.value("warm_start", 0.0));
            return out;
        }
        if (kind == "indicator") {
            return make_indicator_env(j.at("vocab").get<int>(), j.at("horizon").get<int>(),
                                      j.value("feature_scales", std::vector<double>{}),
                                      j.value("reward_step", 0), j.value("reward_token", 0),
                                      j.value("sharp_step", 0), j.value("sharp_logit", 2.0));
        }
        throw DataError("unknown environment kind '" + kind + "'");
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad environment spec: ") + e.what());
    }
}

/// Canonical spec of the built-in tool-call environment, round-trippable
/// through environment_from_json.
inline nlohmann::json toolcall_env_json(double warm_start = 3.0) {
    const LoadedEnv loaded = make_toolcall_env(warm_start);
    nlohmann::json j;
    j["kind"] = "fragments";
    j["name"] = loaded.name;
    j["horizon"] = loaded.env.horizon;
    j["fragments"] = loaded.env.fragments;
    j["stop_token"] = *loaded.env.stop_token;
    j["warm_start"] = warm_start;
    nlohmann::json contexts = nlohmann::json::array();
    for (std::size_t c = 0; c < loaded.env.gold_calls.size(); ++c)
        contexts.push_back({{"gold_calls", calls_to_json(loaded.env.gold_calls[c])},
                            {"gold_sequence", loaded.env.gold_sequences[c]}});
    j["contexts"] = contexts;
    return j;
}

}  // namespace restkit
