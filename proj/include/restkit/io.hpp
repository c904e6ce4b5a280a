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

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "restkit/rest_objective.hpp"
#include "restkit/tool_data.hpp"

namespace restkit {

// ---------------------------------------------------------------------------
// CSV (RFC-4180-style quoting)
// ---------------------------------------------------------------------------

inline std::string csv_escape(std::string_view field) {
    const bool needs_quote = field.find_first_of(",\"\n\r") != std::string_view::npos;
    if (!needs_quote) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

inline std::string csv_row(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i > 0) out += ',';
        out += csv_escape(fields[i]);
    }
    out += '\n';
    return out;
}

/// Shortest-exact double formatting: deterministic across runs, exact on
/// re-parse.
inline std::string fmt_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

// ---------------------------------------------------------------------------
// Flat key=value config files
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> parse_config_text(std::istream& in) {
    std::map<std::string, std::string> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw DataError("config line " + std::to_string(lineno) + ": expected key=value");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return out;
}

namespace detail {

inline double to_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double d = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return d;
    } catch (const std::exception&) {
        throw DataError("config key '" + key + "': expected a number, got '" + value + "'");
    }
}

inline bool to_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw DataError("config key '" + key + "': expected true/false, got '" + value + "'");
}

}  // namespace detail

/// Applies a key=value map onto a TrainConfig; unknown keys are an error so
/// typos do not silently fall back to defaults.
inline void apply_config(const std::map<std::string, std::string>& kv, TrainConfig& cfg) {
    using detail::to_bool;
    using detail::to_double;
    for (const auto& [key, value] : kv) {
        if (key == "w_min") cfg.weights.w_min = to_double(key, value);
        else if (key == "w_max") cfg.weights.w_max = to_double(key, value);
        else if (key == "alpha_f") cfg.weights.alpha_f = to_double(key, value);
        else if (key == "alpha_p") cfg.weights.alpha_p = to_double(key, value);
        else if (key == "alpha_t") cfg.weights.alpha_t = to_double(key, value);
        else if (key == "epsilon_clip") cfg.weights.epsilon_clip = to_double(key, value);
        else if (key == "delta") cfg.weights.delta = to_double(key, value);
        else if (key == "delta_w") cfg.weights.delta_w = to_double(key, value);
        else if (key == "kl_coeff") cfg.weights.kl_coeff = to_double(key, value);
        else if (key == "normalization") {
            if (value == "per_sequence") cfg.weights.scope = NormalizationScope::per_sequence;
            else if (value == "group_pooled") cfg.weights.scope = NormalizationScope::group_pooled;
            else throw DataError("config key 'normalization': per_sequence or group_pooled");
        } else if (key == "beta_acc") cfg.reward.beta_acc = to_double(key, value);
        else if (key == "beta_fmt") cfg.reward.beta_fmt = to_double(key, value);
        else if (key == "dynamic_scaling") cfg.reward.dynamic_scaling = to_bool(key, value);
        else if (key == "entropy_rule") {
            if (value == "inv_one_minus_exp") cfg.rule = EntropyRule::inv_one_minus_exp;
            else if (value == "inv_entropy") cfg.rule = EntropyRule::inv_entropy;
            else throw DataError("config key 'entropy_rule': inv_one_minus_exp or inv_entropy");
        } else if (key == "learning_rate") cfg.learning_rate = to_double(key, value);
        else if (key == "group_size") cfg.group_size = static_cast<int>(to_double(key, value));
        else if (key == "inner_epochs") cfg.inner_epochs = static_cast<int>(to_double(key, value));
        else if (key == "common_random_numbers") cfg.common_random_numbers = to_bool(key, value);
        else throw DataError("unknown config key '" + key + "'");
    }
}

inline std::string dump_config(const TrainConfig& cfg) {
    std::ostringstream out;
    out << "# region weight schedule\n";
    out << "w_min=" << fmt_double(cfg.weights.w_min) << "\n";
    out << "w_max=" << fmt_double(cfg.weights.w_max) << "\n";
    out << "alpha_f=" << fmt_double(cfg.weights.alpha_f) << "\n";
    out << "alpha_p=" << fmt_double(cfg.weights.alpha_p) << "\n";
    out << "alpha_t=" << fmt_double(cfg.weights.alpha_t) << "\n";
    out << "epsilon_clip=" << fmt_double(cfg.weights.epsilon_clip) << "\n";
    out << "delta=" << fmt_double(cfg.weights.delta) << "\n";
    out << "delta_w=" << fmt_double(cfg.weights.delta_w) << "\n";
    out << "kl_coeff=" << fmt_double(cfg.weights.kl_coeff) << "\n";
    out << "normalization="
        << (cfg.weights.scope == NormalizationScope::per_sequence ? "per_sequence" : "group_pooled")
        << "\n";
    out << "entropy_rule="
        << (cfg.rule == EntropyRule::inv_one_minus_exp ? "inv_one_minus_exp" : "inv_entropy") << "\n";
    out << "# reward\n";
    out << "beta_acc=" << fmt_double(cfg.reward.beta_acc) << "\n";
    out << "beta_fmt=" << fmt_double(cfg.reward.beta_fmt) << "\n";
    out << "dynamic_scaling=" << (cfg.reward.dynamic_scaling ? "true" : "false") << "\n";
    out << "# training\n";
    out << "learning_rate=" << fmt_double(cfg.learning_rate) << "\n";
    out << "group_size=" << cfg.group_size << "\n";
    out << "inner_epochs=" << cfg.inner_epochs << "\n";
    out << "common_random_numbers=" << (cfg.common_random_numbers ? "true" : "false") << "\n";
    return out.str();
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << content;
}

template <class Parse>
auto load_jsonl(const std::string& path, Parse&& parse) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::vector<decltype(parse(nlohmann::json{}))> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        out.push_back(parse(j));
    }
    return out;
}

inline std::vector<Sample> load_samples_jsonl(const std::string& path) {
    return load_jsonl(path, [](const nlohmann::json& j) { return sample_from_json(j); });
}

inline std::vector<Dialogue> load_dialogues_jsonl(const std::string& path) {
    return load_jsonl(path, [](const nlohmann::json& j) { return dialogue_from_json(j); });
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

/// Every experiment output file gets exactly one sibling manifest recording
/// how it was produced.
struct RunManifest {
    std::string command;
    std::string config_snapshot;
    std::uint64_t seed = 0;
    std::string inputs_hash;  // FNV-1a 64 over the input files, hex
    std::string started;
    std::string finished;
    std::vector<std::string> outputs;
};

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xCBF29CE484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::string hash_inputs(const std::vector<std::string>& paths) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& p : paths) {
        h = fnv1a64(p, h);
        h = fnv1a64(read_file(p), h);
    }
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string iso_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm_utc{};
    gmtime_r(&t, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

inline void write_manifest(const std::string& output_path, const RunManifest& m) {
    std::ostringstream out;
    out << "command=" << m.command << "\n";
    out << "seed=" << m.seed << "\n";
    out << "inputs_hash=" << m.inputs_hash << "\n";
    out << "started=" << m.started << "\n";
    out << "finished=" << m.finished << "\n";
    for (const auto& o : m.outputs) out << "output=" << o << "\n";
    if (!m.config_snapshot.empty()) {
        out << "config<<EOF\n" << m.config_snapshot;
        if (m.config_snapshot.back() != '\n') out << "\n";
        out << "EOF\n";
    }
    write_file(output_path + ".manifest", out.str());
}

}  // namespace restkit
