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

#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "restkit/envs.hpp"
#include "restkit/estimators.hpp"
#include "restkit/io.hpp"
#include "restkit/region_tagger.hpp"
#include "restkit/rest_objective.hpp"
#include "restkit/reward.hpp"
#include "restkit/tool_data.hpp"

namespace {

using namespace restkit;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

// REST_KIT_SEED, when set, wins over --seed.
std::uint64_t effective_seed(std::uint64_t cli_seed) {
    if (const char* env = std::getenv("REST_KIT_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw DataError("REST_KIT_SEED is not an unsigned integer");
        }
    }
    return cli_seed;
}

void emit(const std::string& content, const std::string& out_path, const RunManifest& manifest) {
    if (out_path.empty()) {
        std::cout << content;
        return;
    }
    write_file(out_path, content);
    RunManifest m = manifest;
    m.outputs.push_back(out_path);
    m.finished = iso_timestamp();
    write_manifest(out_path, m);
}

std::string command_line(int argc, char** argv) {
    std::string out;
    for (int i = 0; i < argc; ++i) {
        if (i > 0) out += ' ';
        out += argv[i];
    }
    return out;
}

LoadedEnv resolve_env(const std::string& spec) {
    if (spec == "builtin:toolcall") return make_toolcall_env();
    if (spec == "builtin:indicator") return make_indicator_env();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(spec));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("environment spec '" + spec + "': " + e.what());
    }
    return environment_from_json(j);
}

// --- score -----------------------------------------------------------------

struct PredRecord {
    std::string id;
    std::string response;
};

struct TemplateFlags {
    std::string think_open, think_close, call_open, call_close;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--think-open", think_open, "thought opening delimiter");
        cmd->add_option("--think-close", think_close, "thought closing delimiter");
        cmd->add_option("--call-open", call_open, "tool-call opening delimiter");
        cmd->add_option("--call-close", call_close, "tool-call closing delimiter");
    }
    ResponseTemplate resolve() const {
        ResponseTemplate tmpl;
        if (!think_open.empty()) tmpl.think_open = think_open;
        if (!think_close.empty()) tmpl.think_close = think_close;
        if (!call_open.empty()) tmpl.call_open = call_open;
        if (!call_close.empty()) tmpl.call_close = call_close;
        return tmpl;
    }
};

int run_score(const std::string& pred_path, const std::string& gold_path, double nu,
              const RewardConfig& cfg, const ResponseTemplate& tmpl, const std::string& out_path,
              const RunManifest& base) {
    const auto preds = load_jsonl(pred_path, [](const nlohmann::json& j) {
        PredRecord r;
        r.id = j.at("id").get<std::string>();
        r.response = j.contains("response") ? j.at("response").get<std::string>()
                                            : j.at("target").get<std::string>();
        return r;
    });
    const auto golds = load_samples_jsonl(gold_path);
    std::map<std::string, const PredRecord*> by_id;
    for (const auto& p : preds) by_id[p.id] = &p;

    std::string csv = csv_row({"id", "s_format", "r_name", "r_para", "r_value", "s_acc", "r_final"});
    double sums[6] = {0, 0, 0, 0, 0, 0};
    for (const auto& gold : golds) {
        const auto it = by_id.find(gold.id);
        if (it == by_id.end()) throw DataError("no prediction for sample id '" + gold.id + "'");
        const RewardBreakdown b = score_response(it->second->response, gold.gold_calls, tmpl, cfg, nu);
        csv += csv_row({gold.id, std::to_string(b.s_format), fmt_double(b.r_name), fmt_double(b.r_para),
                        fmt_double(b.r_value), fmt_double(b.s_acc), fmt_double(b.r_final)});
        const double vals[6] = {static_cast<double>(b.s_format), b.r_name, b.r_para,
                                b.r_value, b.s_acc, b.r_final};
        for (int k = 0; k < 6; ++k) sums[k] += vals[k];
    }
    if (golds.empty()) throw DataError("gold file '" + gold_path + "' holds no samples");
    const double n = static_cast<double>(golds.size());
    std::vector<std::string> agg{"__aggregate__"};
    for (double s : sums) agg.push_back(fmt_double(s / n));
    csv += csv_row(agg);
    emit(csv, out_path, base);
    return kExitOk;
}

// --- tag ---------------------------------------------------------------------

std::string printable_token(int byte) {
    const char c = static_cast<char>(static_cast<unsigned char>(byte));
    if (c == '\t') return "\\t";
    if (c == '\n') return "\\n";
    if (c == '\\') return "\\\\";
    if (byte >= 0x20 && byte < 0x7F) return std::string(1, c);
    char buf[8];
    std::snprintf(buf, sizeof(buf), "\\x%02X", byte);
    return buf;
}

int run_tag(const std::string& in_path, const ResponseTemplate& tmpl, const std::string& out_path,
            const RunManifest& base) {
    std::istringstream file_stream;
    std::istream* in = &std::cin;
    if (!in_path.empty()) {
        file_stream.str(read_file(in_path));
        in = &file_stream;
    }
    std::string out;
    std::string line;
    bool first = true;
    while (std::getline(*in, line)) {
        if (!first) out += '\n';  // blank line between responses
        first = false;
        const TaggedResponse tagged = tag_regions(line, tmpl);
        for (std::size_t i = 0; i < tagged.tokens.size(); ++i) {
            out += printable_token(tagged.tokens[i]);
            out += '\t';
            out += region_name(tagged.tags[i]);
            out += '\n';
        }
    }
    emit(out, out_path, base);
    return kExitOk;
}

// --- decompose ---------------------------------------------------------------

int run_decompose(const std::string& in_path, const std::string& out_path, const RunManifest& base) {
    const auto dialogues = load_dialogues_jsonl(in_path);
    std::string out;
    for (const auto& d : dialogues)
        for (const auto& s : decompose_dialogue(d)) out += sample_to_json(s).dump() + "\n";
    emit(out, out_path, base);
    return kExitOk;
}

// --- weights -----------------------------------------------------------------

struct TraceToken {
    RegionTag region;
    double entropy;
};

std::vector<TraceToken> load_entropy_trace(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::vector<TraceToken> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        if (lineno == 1 && line.rfind("token_index", 0) == 0) continue;  // header
        std::istringstream ss(line);
        std::string idx, region, entropy;
        if (!std::getline(ss, idx, ',') || !std::getline(ss, region, ',') || !std::getline(ss, entropy))
            throw DataError(path + ":" + std::to_string(lineno) + ": expected token_index,region,entropy");
        const auto tag = region_from_name(region);
        if (!tag) throw DataError(path + ":" + std::to_string(lineno) + ": unknown region '" + region + "'");
        try {
            out.push_back({*tag, std::stod(entropy)});
        } catch (const std::exception&) {
            throw DataError(path + ":" + std::to_string(lineno) + ": bad entropy '" + entropy + "'");
        }
    }
    if (out.empty()) throw DataError("entropy trace '" + path + "' holds no tokens");
    return out;
}

int run_weights(const std::string& trace_path, const std::vector<double>& nu_grid,
                const TrainConfig& cfg, const std::string& out_path, const RunManifest& base) {
    const auto trace = load_entropy_trace(trace_path);

    // region means feed the entropy-based initializer
    std::array<double, kNumRegions> sums{};
    std::array<std::size_t, kNumRegions> counts{};
    std::vector<RegionTag> tags;
    for (const auto& tok : trace) {
        sums[static_cast<std::size_t>(tok.region)] += tok.entropy;
        counts[static_cast<std::size_t>(tok.region)] += 1;
        tags.push_back(tok.region);
    }
    RegionEntropy stats;
    for (std::size_t r = 0; r < kNumRegions; ++r) {
        stats.by_region[r].count = counts[r];
        if (counts[r] > 0) stats.by_region[r].mean_entropy = sums[r] / static_cast<double>(counts[r]);
    }

    // per-token entropy-only beta profile for the minimized bound column
    BetaProfile beta;
    beta.kind = BetaKind::entropy_only;
    for (const auto& tok : trace) beta.beta.push_back(1.0 - std::exp(-tok.entropy));

    std::string csv = csv_row({"nu", "w_fmt", "w_name", "w_para", "w_thk", "omega_mean", "omega_min",
                               "omega_max", "minimized_bound"});
    for (double nu : nu_grid) {
        CurriculumState init = init_region_weights(stats, cfg.rule, cfg.weights);
        init.nu = nu;
        const CurriculumState sched = curriculum_update(init, cfg.weights);
        const std::vector<double> omega = normalize_weights(tags, sched, cfg.weights);
        double omin = omega[0], omax = omega[0];
        for (double w : omega) {
            omin = std::min(omin, w);
            omax = std::max(omax, w);
        }
        csv += csv_row({fmt_double(nu), fmt_double(sched.w_fmt), fmt_double(sched.w_name),
                        fmt_double(sched.w_para), fmt_double(sched.w_thk), fmt_double(mean_of(omega)),
                        fmt_double(omin), fmt_double(omax), fmt_double(minimized_bound(beta))});
    }
    emit(csv, out_path, base);
    return kExitOk;
}

// --- simulate ----------------------------------------------------------------

int run_simulate(const std::string& env_spec, const std::string& source, int n_groups, int group_size,
                 std::uint64_t seed, double delta, const std::string& out_path,
                 const RunManifest& base) {
    const LoadedEnv loaded = resolve_env(env_spec);
    std::vector<WeightsSource> sources;
    if (source == "all")
        sources = {WeightsSource::uniform, WeightsSource::surrogate, WeightsSource::optimal};
    else if (source == "uniform") sources = {WeightsSource::uniform};
    else if (source == "surrogate") sources = {WeightsSource::surrogate};
    else if (source == "optimal") sources = {WeightsSource::optimal};
    else throw CLI::ValidationError("--weights-source", "must be uniform|surrogate|optimal|all");

    McVarianceOptions opt;
    opt.n_groups = n_groups;
    opt.group_size = group_size;
    opt.seed = seed;
    opt.delta = delta;

    std::string csv = csv_row({"weights_source", "trace_variance", "ci_low", "ci_high", "bound_value",
                               "minimized_bound"});
    for (WeightsSource s : sources) {
        const McVarianceResult r = mc_variance(loaded.policy, loaded.env, s, opt);
        csv += csv_row({std::string(weights_source_name(s)), fmt_double(r.trace), fmt_double(r.ci_low),
                        fmt_double(r.ci_high), fmt_double(r.bound_value), fmt_double(r.minimized_bound)});
    }
    emit(csv, out_path, base);
    return kExitOk;
}

// --- train ---------------------------------------------------------------------

std::string params_text(const SoftmaxPolicy& policy) {
    std::string out = std::to_string(policy.dim) + " " + std::to_string(policy.vocab) + "\n";
    for (int j = 0; j < policy.dim; ++j) {
        for (int v = 0; v < policy.vocab; ++v) {
            if (v > 0) out += ' ';
            out += fmt_double(policy.theta_at(j, v));
        }
        out += '\n';
    }
    return out;
}

int run_train(const std::string& env_spec, const std::string& algo_name, int steps, std::uint64_t seed,
              const TrainConfig& cfg, const std::string& trace_path, const std::string& params_path,
              const RunManifest& base) {
    LoadedEnv loaded = resolve_env(env_spec);
    const Algo algo = algo_name == "rest" ? Algo::rest : Algo::grpo;
    loaded.env.reward_cfg = cfg.reward;
    if (loaded.env.is_text()) bind_text_reward(loaded.env);
    const TrainResult result = train_toy(loaded.policy, loaded.env, algo, steps, seed, cfg);

    std::string csv = csv_row({"step", "mean_reward", "entropy", "resp_len", "loss",
                               "mean_reward_scaled", "nu"});
    for (const TraceRow& row : result.trace)
        csv += csv_row({std::to_string(row.step), fmt_double(row.mean_reward), fmt_double(row.mean_entropy),
                        fmt_double(row.mean_resp_len), fmt_double(row.loss),
                        fmt_double(row.mean_reward_scaled), fmt_double(row.nu)});
    emit(csv, trace_path, base);
    if (!params_path.empty()) {
        write_file(params_path, params_text(result.policy));
        RunManifest m = base;
        m.outputs.push_back(params_path);
        m.finished = iso_timestamp();
        write_manifest(params_path, m);
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"restkit: rule-based tool-call rewards and entropy-aware policy-gradient reweighting"};
    app.require_subcommand(1);

    // score
    auto* score = app.add_subcommand("score", "Score predicted responses against gold tool calls");
    std::string score_pred, score_gold, score_out;
    double score_nu = 0.0;
    RewardConfig score_cfg;
    score->add_option("--pred", score_pred, "JSONL of {id, response}")->required();
    score->add_option("--gold", score_gold, "JSONL of gold samples")->required();
    score->add_option("--nu", score_nu, "training progress in [0,1)");
    score->add_option("--beta-acc", score_cfg.beta_acc, "accuracy weight");
    score->add_option("--beta-fmt", score_cfg.beta_fmt, "format weight");
    score->add_flag("--dynamic-scaling,!--no-dynamic-scaling", score_cfg.dynamic_scaling,
                    "scale rewards by (1 - nu)");
    score->add_option("--out", score_out, "write CSV here instead of stdout");
    TemplateFlags score_tmpl;
    score_tmpl.add_to(score);

    // tag
    auto* tag = app.add_subcommand("tag", "Tag raw responses (one per line) into token regions");
    std::string tag_in, tag_out;
    tag->add_option("--in", tag_in, "input file (default: stdin)");
    tag->add_option("--out", tag_out, "write TSV here instead of stdout");
    TemplateFlags tag_tmpl;
    tag_tmpl.add_to(tag);

    // decompose
    auto* decomp = app.add_subcommand("decompose", "Split multi-turn dialogues into per-turn samples");
    std::string dec_in, dec_out;
    decomp->add_option("--in", dec_in, "JSONL of dialogues")->required();
    decomp->add_option("--out", dec_out, "write JSONL here instead of stdout");

    // weights
    auto* weights = app.add_subcommand("weights", "Report curriculum weight schedules over a nu grid");
    std::string w_trace, w_config, w_out, w_grid = "0,0.5,1";
    weights->add_option("--trace", w_trace, "entropy trace CSV (token_index,region,entropy)")->required();
    weights->add_option("--config", w_config, "key=value config file");
    weights->add_option("--nu-grid", w_grid, "comma-separated nu values (default 0,0.5,1)");
    weights->add_option("--out", w_out, "write CSV here instead of stdout");

    // simulate
    auto* sim = app.add_subcommand("simulate", "Measure estimator variance under different weights");
    std::string sim_env, sim_source = "all", sim_out;
    int sim_groups = 1000, sim_group_size = 8;
    std::uint64_t sim_seed = 0;
    double sim_delta = 1e-6;
    sim->add_option("--env", sim_env, "environment spec file or builtin:{toolcall,indicator}")->required();
    std::string sim_config;
    sim->add_option("--config", sim_config, "key=value config file (delta, group_size)");
    sim->add_option("--weights-source", sim_source, "uniform|surrogate|optimal|all");
    sim->add_option("--groups", sim_groups, "number of replicate groups");
    sim->add_option("--group-size", sim_group_size, "rollouts per group (G)");
    sim->add_option("--seed", sim_seed, "base seed (REST_KIT_SEED overrides)");
    sim->add_option("--delta", sim_delta, "advantage stability constant");
    sim->add_option("--out", sim_out, "write CSV here instead of stdout");

    // train
    auto* train = app.add_subcommand("train", "Train a toy policy with the rest or grpo objective");
    std::string tr_env = "builtin:toolcall", tr_algo = "rest", tr_config, tr_trace, tr_params;
    int tr_steps = 200;
    std::uint64_t tr_seed = 0;
    bool tr_dump = false;
    train->add_option("--env", tr_env, "environment spec file or builtin:{toolcall,indicator}");
    train->add_option("--algo", tr_algo, "rest|grpo")->check(CLI::IsMember({"rest", "grpo"}));
    train->add_option("--steps", tr_steps, "training steps");
    train->add_option("--seed", tr_seed, "base seed (REST_KIT_SEED overrides)");
    train->add_option("--config", tr_config, "key=value config file");
    train->add_option("--trace", tr_trace, "write trace CSV here instead of stdout");
    train->add_option("--params", tr_params, "write final parameters here");
    train->add_flag("--dump-config", tr_dump, "print the effective config and exit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    RunManifest manifest;
    manifest.command = command_line(argc, argv);
    manifest.started = iso_timestamp();

    try {
        if (score->parsed()) {
            manifest.seed = 0;
            manifest.inputs_hash = hash_inputs({score_pred, score_gold});
            return run_score(score_pred, score_gold, score_nu, score_cfg, score_tmpl.resolve(),
                             score_out, manifest);
        }
        if (tag->parsed()) {
            if (!tag_in.empty()) manifest.inputs_hash = hash_inputs({tag_in});
            return run_tag(tag_in, tag_tmpl.resolve(), tag_out, manifest);
        }
        if (decomp->parsed()) {
            manifest.inputs_hash = hash_inputs({dec_in});
            return run_decompose(dec_in, dec_out, manifest);
        }
        if (weights->parsed()) {
            TrainConfig cfg;
            if (!w_config.empty()) {
                std::istringstream ss(read_file(w_config));
                apply_config(parse_config_text(ss), cfg);
            }
            std::vector<double> grid;
            std::istringstream gs(w_grid);
            std::string item;
            while (std::getline(gs, item, ',')) {
                try {
                    grid.push_back(std::stod(item));
                } catch (const std::exception&) {
                    throw DataError("--nu-grid: bad value '" + item + "'");
                }
            }
            manifest.inputs_hash = hash_inputs({w_trace});
            manifest.config_snapshot = dump_config(cfg);
            return run_weights(w_trace, grid, cfg, w_out, manifest);
        }
        if (sim->parsed()) {
            if (!sim_config.empty()) {
                TrainConfig cfg;
                std::istringstream ss(read_file(sim_config));
                apply_config(parse_config_text(ss), cfg);
                if (sim->count("--delta") == 0) sim_delta = cfg.weights.delta;
                if (sim->count("--group-size") == 0) sim_group_size = cfg.group_size;
                manifest.config_snapshot = dump_config(cfg);
            }
            const std::uint64_t seed = effective_seed(sim_seed);
            manifest.seed = seed;
            std::vector<std::string> inputs;
            if (sim_env.rfind("builtin:", 0) != 0) inputs.push_back(sim_env);
            if (!sim_config.empty()) inputs.push_back(sim_config);
            if (!inputs.empty()) manifest.inputs_hash = hash_inputs(inputs);
            return run_simulate(sim_env, sim_source, sim_groups, sim_group_size, seed, sim_delta,
                                sim_out, manifest);
        }
        if (train->parsed()) {
            TrainConfig cfg;
            if (!tr_config.empty()) {
                std::istringstream ss(read_file(tr_config));
                apply_config(parse_config_text(ss), cfg);
            }
            if (tr_dump) {
                std::cout << dump_config(cfg);
                return kExitOk;
            }
            const std::uint64_t seed = effective_seed(tr_seed);
            manifest.seed = seed;
            manifest.config_snapshot = dump_config(cfg);
            std::vector<std::string> inputs;
            if (tr_env.rfind("builtin:", 0) != 0) inputs.push_back(tr_env);
            if (!tr_config.empty()) inputs.push_back(tr_config);
            if (!inputs.empty()) manifest.inputs_hash = hash_inputs(inputs);
            return run_train(tr_env, tr_algo, tr_steps, seed, cfg, tr_trace, tr_params, manifest);
        }
    } catch (const CLI::Error& e) {
        std::cerr << e.what() << "\n";
        return kExitUsage;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
