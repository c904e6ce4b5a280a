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

#include <set>
#include <string>
#include <string_view>

#include "restkit/tool_data.hpp"

namespace restkit {

struct RewardConfig {
    double beta_acc = 0.8;   // weight of the correctness score
    double beta_fmt = 0.2;   // weight of the format score
    bool dynamic_scaling = true;
};

/// Full breakdown of one scored response.
struct RewardBreakdown {
    int s_format = 0;        // {0,1}
    double r_name = 0.0;     // [0,1]
    double r_para = 0.0;     // [0,|G|]
    double r_value = 0.0;    // [0, sum of gold value counts]
    double z_norm = 1.0;     // 1 + |G| + sum of gold value counts
    double s_acc = 0.0;      // [0,1]
    double r_final = 0.0;
    bool parse_malformed = false;
};

/// 1 iff all four delimiters appear exactly once each, in order
/// (think-open, think-close, call-open, call-close), and every call body
/// parses. Occurrences are counted on the raw bytes.
inline int format_score(std::string_view raw, const ResponseTemplate& tmpl) {
    const std::string* delims[4] = {&tmpl.think_open, &tmpl.think_close, &tmpl.call_open,
                                    &tmpl.call_close};
    std::size_t first_pos[4];
    for (int d = 0; d < 4; ++d) {
        std::size_t count = 0, at = 0, first = std::string_view::npos;
        while ((at = raw.find(*delims[d], at)) != std::string_view::npos) {
            if (count == 0) first = at;
            ++count;
            at += delims[d]->size();
        }
        if (count != 1) return 0;
        first_pos[d] = first;
    }
    for (int d = 0; d + 1 < 4; ++d)
        if (first_pos[d] >= first_pos[d + 1]) return 0;
    return parse_tool_calls(raw, tmpl).malformed() ? 0 : 1;
}

struct MatchScores {
    double r_name = 0.0;
    double r_para = 0.0;
    double r_value = 0.0;
};

namespace detail {

// Jaccard over string sets; two empty sets count as a perfect match.
inline double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
    if (a.empty() && b.empty()) return 1.0;
    std::size_t inter = 0;
    for (const auto& x : a) inter += b.count(x);
    const std::size_t uni = a.size() + b.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace detail

/// Name score is Jaccard over tool-name sets. Parameter and value scores sum
/// over gold tools only: predicted tools absent from gold reduce r_name via
/// the union but contribute nothing here.
inline MatchScores tool_match_scores(const ToolCallSet& pred, const ToolCallSet& gold) {
    MatchScores out;
    out.r_name = detail::jaccard(pred.name_set(), gold.name_set());
    for (const ToolCall& gc : gold.calls) {
        const ToolCall* pc = pred.find_by_name(gc.name);
        if (pc == nullptr) continue;
        out.r_para += detail::jaccard(gc.param_names(), pc->param_names());
        for (const auto& [pname, gval] : gc.params) {
            const CanonicalValue* pv = pc->find_param(pname);
            if (pv != nullptr && *pv == gval) out.r_value += 1.0;
        }
    }
    return out;
}

inline double normalization_constant(const ToolCallSet& gold) {
    double z = 1.0 + static_cast<double>(gold.size());
    for (const ToolCall& gc : gold.calls) z += static_cast<double>(gc.params.size());
    return z;
}

/// (r_name + r_para + r_value) / Z. Empty gold gives Z = 1 and s_acc = r_name,
/// which rewards correctly declining to call any tool.
inline double accuracy_score(const MatchScores& scores, const ToolCallSet& gold) {
    return (scores.r_name + scores.r_para + scores.r_value) / normalization_constant(gold);
}

/// Weighted sum of correctness and format scores; with dynamic scaling the
/// whole reward decays by (1 - nu) as training progresses.
inline double final_reward(double s_acc, int s_format, const RewardConfig& cfg, double nu) {
    const double base = cfg.beta_acc * s_acc + cfg.beta_fmt * static_cast<double>(s_format);
    return cfg.dynamic_scaling ? (1.0 - nu) * base : base;
}

/// End-to-end rule-based reward for one raw response.
inline RewardBreakdown score_response(std::string_view raw, const ToolCallSet& gold,
                                      const ResponseTemplate& tmpl, const RewardConfig& cfg,
                                      double nu) {
    RewardBreakdown out;
    const ToolCallParse parsed = parse_tool_calls(raw, tmpl);
    out.parse_malformed = parsed.malformed();
    out.s_format = format_score(raw, tmpl);
    const MatchScores m = tool_match_scores(parsed.calls, gold);
    out.r_name = m.r_name;
    out.r_para = m.r_para;
    out.r_value = m.r_value;
    out.z_norm = normalization_constant(gold);
    out.s_acc = accuracy_score(m, gold);
    out.r_final = final_reward(out.s_acc, out.s_format, cfg, nu);
    return out;
}

}  // namespace restkit
