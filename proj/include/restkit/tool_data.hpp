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

#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "restkit/util.hpp"

namespace restkit {

// Canonical values are plain nlohmann::json: object comparison is key-order
// independent, integer/float numbers of equal decimal value compare equal,
// strings compare byte-exact and case-sensitive.
using CanonicalValue = nlohmann::json;

/// Normalizes a parsed value: floats holding an exactly integral value become
/// integers (so serialization is canonical too), containers recurse.
inline CanonicalValue canonicalize_value(const nlohmann::json& v) {
    using json = nlohmann::json;
    if (v.is_number_float()) {
        const double d = v.get<double>();
        if (std::isfinite(d) && d == std::floor(d) && std::abs(d) < 9.0e15)
            return json(static_cast<std::int64_t>(d));
        return v;
    }
    if (v.is_array()) {
        json out = json::array();
        for (const auto& e : v) out.push_back(canonicalize_value(e));
        return out;
    }
    if (v.is_object()) {
        json out = json::object();
        for (auto it = v.begin(); it != v.end(); ++it) out[it.key()] = canonicalize_value(it.value());
        return out;
    }
    return v;
}

/// Delimiters for the structured parts of a response.
struct ResponseTemplate {
    std::string think_open = "<think>";
    std::string think_close = "</think>";
    std::string call_open = "<tool_call>";
    std::string call_close = "</tool_call>";
};

/// One tool invocation: name plus named arguments in textual order.
struct ToolCall {
    std::string name;
    std::vector<std::pair<std::string, CanonicalValue>> params;

    const CanonicalValue* find_param(std::string_view key) const {
        for (const auto& [k, v] : params)
            if (k == key) return &v;
        return nullptr;
    }
    std::set<std::string> param_names() const {
        std::set<std::string> out;
        for (const auto& [k, v] : params) out.insert(k);
        return out;
    }
};

inline bool operator==(const ToolCall& a, const ToolCall& b) {
    if (a.name != b.name || a.params.size() != b.params.size()) return false;
    for (const auto& [k, v] : a.params) {
        const CanonicalValue* other = b.find_param(k);
        if (other == nullptr || !(*other == v)) return false;
    }
    return true;
}

/// Ordered list of calls extracted from one response; may be empty.
struct ToolCallSet {
    std::vector<ToolCall> calls;

    bool empty() const { return calls.empty(); }
    std::size_t size() const { return calls.size(); }
    std::set<std::string> name_set() const {
        std::set<std::string> out;
        for (const auto& c : calls) out.insert(c.name);
        return out;
    }
    // First call carrying `name`; duplicate names lose multiplicity.
    const ToolCall* find_by_name(std::string_view name) const {
        for (const auto& c : calls)
            if (c.name == name) return &c;
        return nullptr;
    }
};

inline bool operator==(const ToolCallSet& a, const ToolCallSet& b) {
    return a.calls == b.calls;
}

struct Message {
    std::string role;  // user | assistant | tool
    std::string content;
};

/// Single-turn training instance.
struct Sample {
    std::string id;
    std::vector<Message> context;
    std::string target_response;
    ToolCallSet gold_calls;
};

struct DialogueTurn {
    std::vector<Message> context_delta;
    std::string action;
    ToolCallSet gold_calls;
};

/// Multi-turn dialogue; decomposes into one Sample per turn.
struct Dialogue {
    std::string id;
    std::vector<DialogueTurn> turns;
};

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct ToolCallParse {
    ToolCallSet calls;                 // every well-formed call, in order
    std::vector<std::string> errors;   // one entry per unparseable body/object
    bool delimiters_found = false;

    bool malformed() const { return !errors.empty(); }
};

namespace detail {

inline std::optional<ToolCall> call_from_object(const nlohmann::ordered_json& obj,
                                                std::string* error) {
    if (!obj.is_object() || !obj.contains("name") || !obj["name"].is_string()) {
        *error = "tool call object must carry a string \"name\"";
        return std::nullopt;
    }
    ToolCall call;
    call.name = obj["name"].get<std::string>();
    if (obj.contains("arguments")) {
        const auto& args = obj["arguments"];
        if (!args.is_object()) {
            *error = "\"arguments\" must be an object";
            return std::nullopt;
        }
        for (auto it = args.begin(); it != args.end(); ++it)
            call.params.emplace_back(it.key(), canonicalize_value(nlohmann::json(it.value())));
    }
    return call;
}

inline void parse_call_body(std::string_view body, ToolCallParse& out) {
    using ojson = nlohmann::ordered_json;
    std::string trimmed(body);
    const auto first = trimmed.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return;  // empty body parses to zero calls

    auto take = [&out](const ojson& item) {
        std::string err;
        if (auto call = call_from_object(item, &err))
            out.calls.calls.push_back(std::move(*call));
        else
            out.errors.push_back(std::move(err));
    };

    std::istringstream is(trimmed);
    while (true) {
        int c = is.peek();
        while (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            is.get();
            c = is.peek();
        }
        if (c == std::char_traits<char>::eof()) break;
        ojson j;
        try {
            is >> j;
        } catch (const nlohmann::json::exception& e) {
            // calls parsed before the break are kept; the rest of the body is lost
            out.errors.emplace_back(e.what());
            return;
        }
        if (j.is_array()) {
            for (const auto& item : j) take(item);
        } else {
            take(j);
        }
    }
}

}  // namespace detail

/// Extracts every well-formed tool invocation between call delimiters, in
/// order. Unparseable bodies contribute nothing and are recorded as errors;
/// the function is total over arbitrary model output.
inline ToolCallParse parse_tool_calls(std::string_view raw, const ResponseTemplate& tmpl) {
    ToolCallParse out;
    std::size_t pos = 0;
    while (true) {
        const std::size_t open = raw.find(tmpl.call_open, pos);
        if (open == std::string_view::npos) break;
        out.delimiters_found = true;
        const std::size_t body_begin = open + tmpl.call_open.size();
        const std::size_t close = raw.find(tmpl.call_close, body_begin);
        if (close == std::string_view::npos) {
            out.errors.emplace_back("unterminated tool call block");
            break;
        }
        detail::parse_call_body(raw.substr(body_begin, close - body_begin), out);
        pos = close + tmpl.call_close.size();
    }
    return out;
}

inline nlohmann::ordered_json call_to_json(const ToolCall& call) {
    nlohmann::ordered_json j;
    j["name"] = call.name;
    j["arguments"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : call.params) j["arguments"][k] = v;
    return j;
}

/// Canonical serialization: one block, one call object per line.
inline std::string serialize_tool_calls(const ToolCallSet& set, const ResponseTemplate& tmpl) {
    std::string out = tmpl.call_open;
    for (const auto& call : set.calls) {
        out += call_to_json(call).dump();
        out += '\n';
    }
    out += tmpl.call_close;
    return out;
}

// ---------------------------------------------------------------------------
// Multi-turn decomposition
// ---------------------------------------------------------------------------

/// Splits a K-turn dialogue into K single-turn samples; sample k is
/// conditioned on every context delta and assistant action before turn k.
inline std::vector<Sample> decompose_dialogue(const Dialogue& d) {
    if (d.turns.empty()) throw DataError("dialogue '" + d.id + "' has no turns");
    std::vector<Sample> out;
    out.reserve(d.turns.size());
    std::vector<Message> running;
    for (std::size_t k = 0; k < d.turns.size(); ++k) {
        const DialogueTurn& turn = d.turns[k];
        running.insert(running.end(), turn.context_delta.begin(), turn.context_delta.end());
        Sample s;
        s.id = d.id + "#" + std::to_string(k);
        s.context = running;
        s.target_response = turn.action;
        s.gold_calls = turn.gold_calls;
        out.push_back(std::move(s));
        running.push_back(Message{"assistant", turn.action});
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON (de)serialization for the line-delimited dataset files
// ---------------------------------------------------------------------------

inline void validate_sample(const Sample& s) {
    if (s.context.empty()) throw DataError("sample '" + s.id + "': context must be non-empty");
    const std::string& role = s.context.back().role;
    if (role != "user" && role != "tool")
        throw DataError("sample '" + s.id + "': last context message must be user or tool");
}

inline ToolCallSet calls_from_json(const nlohmann::json& arr) {
    ToolCallSet set;
    for (const auto& item : arr) {
        std::string err;
        auto call = detail::call_from_object(nlohmann::ordered_json(item), &err);
        if (!call) throw DataError("gold_calls: " + err);
        set.calls.push_back(std::move(*call));
    }
    return set;
}

inline nlohmann::json calls_to_json(const ToolCallSet& set) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : set.calls) arr.push_back(nlohmann::json(call_to_json(c)));
    return arr;
}

inline Sample sample_from_json(const nlohmann::json& j) {
    Sample s;
    try {
        s.id = j.at("id").get<std::string>();
        for (const auto& m : j.at("context"))
            s.context.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
        s.target_response = j.at("target").get<std::string>();
        s.gold_calls = calls_from_json(j.at("gold_calls"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad sample record: ") + e.what());
    }
    validate_sample(s);
    return s;
}

inline nlohmann::json sample_to_json(const Sample& s) {
    nlohmann::json ctx = nlohmann::json::array();
    for (const auto& m : s.context) ctx.push_back({{"role", m.role}, {"content", m.content}});
    return {{"id", s.id}, {"context", ctx}, {"target", s.target_response},
            {"gold_calls", calls_to_json(s.gold_calls)}};
}

inline Dialogue dialogue_from_json(const nlohmann::json& j) {
    Dialogue d;
    try {
        d.id = j.at("id").get<std::string>();
        for (const auto& t : j.at("turns")) {
            DialogueTurn turn;
            for (const auto& m : t.at("context"))
                turn.context_delta.push_back(
                    {m.at("role").get<std::string>(), m.at("content").get<std::string>()});
            turn.action = t.at("action").get<std::string>();
            turn.gold_calls = calls_from_json(t.at("gold_calls"));
            d.turns.push_back(std::move(turn));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad dialogue record: ") + e.what());
    }
    if (d.turns.empty()) throw DataError("dialogue '" + d.id + "' has no turns");
    return d;
}

inline nlohmann::json dialogue_to_json(const Dialogue& d) {
    nlohmann::json turns = nlohmann::json::array();
    for (const auto& t : d.turns) {
        nlohmann::json ctx = nlohmann::json::array();
        for (const auto& m : t.context_delta) ctx.push_back({{"role", m.role}, {"content", m.content}});
        turns.push_back({{"context", ctx}, {"action", t.action}, {"gold_calls", calls_to_json(t.gold_calls)}});
    }
    return {{"id", d.id}, {"turns", turns}};
}

}  // namespace restkit
