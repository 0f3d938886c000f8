#pragma once

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "modalanchor/encoder.hpp"
#include "modalanchor/errors.hpp"
#include "modalanchor/format.hpp"
#include "modalanchor/taskgen.hpp"
#include "modalanchor/trainer.hpp"

namespace modalanchor {

// Flat key=value configuration with dotted sections. Unknown keys and
// malformed values are all collected before reporting so one pass shows
// every problem.
struct ExperimentConfig {
    ModelConfig model;
    StreamTemplate stream;
    std::size_t n_tasks = 4;
    TrainConfig train;
    std::vector<StrategyConfig> strategies;
    std::vector<std::uint64_t> seeds = {1};
    std::string out_dir = "out";
    // Optional file-backed stream: one JSONL path per task for train/eval.
    std::vector<std::string> train_files;
    std::vector<std::string> eval_files;

    std::map<std::string, std::string> resolved;  // canonical key -> value echo
};

namespace detail {

struct KvErrors {
    std::vector<std::string> messages;
    void add(const std::string& m) { messages.push_back(m); }
};

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
    std::stringstream ss(s);
    ss >> out;
    return static_cast<bool>(ss) && ss.eof();
}

}  // namespace detail

inline std::map<std::string, std::string> parse_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ParseError("config: " + path + ":" + std::to_string(lineno) +
                             ": expected key=value, got '" + t + "'");
        }
        kv[detail::trim(t.substr(0, eq))] = detail::trim(t.substr(eq + 1));
    }
    return kv;
}

inline ExperimentConfig default_experiment_config() {
    ExperimentConfig cfg;
    cfg.strategies = {};  // filled by resolve
    return cfg;
}

// Applies key=value entries over the defaults, collecting every violation.
inline ExperimentConfig resolve_config(const std::map<std::string, std::string>& kv) {
    ExperimentConfig cfg = default_experiment_config();
    detail::KvErrors errors;

    std::vector<std::string> strategy_names = {"naive", "ours"};
    std::map<std::string, std::map<std::string, std::string>> strategy_overrides;

    auto read_size = [&](const std::string& key, const std::string& val, std::size_t& out) {
        long long v = 0;
        if (!detail::parse_number(val, v) || v < 0) {
            errors.add(key + ": expected a nonnegative integer, got '" + val + "'");
            return;
        }
        out = static_cast<std::size_t>(v);
    };
    auto read_int = [&](const std::string& key, const std::string& val, int& out) {
        if (!detail::parse_number(val, out)) {
            errors.add(key + ": expected an integer, got '" + val + "'");
        }
    };
    auto read_double = [&](const std::string& key, const std::string& val, double& out) {
        if (!detail::parse_number(val, out)) {
            errors.add(key + ": expected a real number, got '" + val + "'");
        }
    };

    static const std::vector<std::string> kStrategyHypers = {
        "lambda_base", "beta", "replay_ratio", "weight_decay",
        "adapters_enabled", "adapter_rank", "adapter_alpha"};

    for (const auto& [key, val] : kv) {
        if (key == "model.d_v") read_size(key, val, cfg.model.d_v);
        else if (key == "model.vocab") read_size(key, val, cfg.model.vocab);
        else if (key == "model.max_len") read_size(key, val, cfg.model.max_len);
        else if (key == "model.d_h") read_size(key, val, cfg.model.d_h);
        else if (key == "model.d_e") read_size(key, val, cfg.model.d_e);
        else if (key == "model.temperature") read_double(key, val, cfg.model.temperature);
        else if (key == "stream.n_tasks") read_size(key, val, cfg.n_tasks);
        else if (key == "stream.train_sizes") {
            cfg.stream.train_sizes.clear();
            for (const auto& item : detail::split_list(val)) {
                std::size_t n = 0;
                read_size(key, item, n);
                cfg.stream.train_sizes.push_back(n);
            }
        } else if (key == "stream.eval_size") read_size(key, val, cfg.stream.eval_size);
        else if (key == "stream.n_concepts") read_size(key, val, cfg.stream.n_concepts);
        else if (key == "stream.band_width") read_size(key, val, cfg.stream.band_width);
        else if (key == "stream.base_band_start") read_int(key, val, cfg.stream.base_band_start);
        else if (key == "stream.band_shift") read_int(key, val, cfg.stream.band_shift);
        else if (key == "stream.rotation_angle") read_double(key, val, cfg.stream.rotation_angle);
        else if (key == "stream.noise_sigma") read_double(key, val, cfg.stream.noise_sigma);
        else if (key == "stream.caption_signal") read_double(key, val, cfg.stream.caption_signal);
        else if (key == "stream.center_scale") read_double(key, val, cfg.stream.center_scale);
        else if (key == "stream.epsilon") read_double(key, val, cfg.stream.epsilon);
        else if (key == "trainer.epochs") read_size(key, val, cfg.train.epochs);
        else if (key == "trainer.batch_size") read_size(key, val, cfg.train.batch_size);
        else if (key == "trainer.lr") read_double(key, val, cfg.train.lr);
        else if (key == "trainer.fisher_samples") read_size(key, val, cfg.train.fisher_samples);
        else if (key == "trainer.fisher_batch") read_size(key, val, cfg.train.fisher_batch);
        else if (key == "trainer.probe_size") read_size(key, val, cfg.train.probe_size);
        else if (key == "trainer.eval_batch") read_size(key, val, cfg.train.eval_batch);
        else if (key == "run.strategies") strategy_names = detail::split_list(val);
        else if (key == "run.seeds") {
            cfg.seeds.clear();
            for (const auto& item : detail::split_list(val)) {
                std::uint64_t s = 0;
                if (!detail::parse_number(item, s)) {
                    errors.add(key + ": expected integer seeds, got '" + item + "'");
                } else {
                    cfg.seeds.push_back(s);
                }
            }
        } else if (key == "run.out") cfg.out_dir = val;
        else if (key == "data.train_files") cfg.train_files = detail::split_list(val);
        else if (key == "data.eval_files") cfg.eval_files = detail::split_list(val);
        else {
            const std::size_t dot = key.find('.');
            bool handled = false;
            if (dot != std::string::npos) {
                const std::string section = key.substr(0, dot);
                const std::string field = key.substr(dot + 1);
                if (strategy_from_string(section) &&
                    std::find(kStrategyHypers.begin(), kStrategyHypers.end(), field) !=
                        kStrategyHypers.end()) {
                    strategy_overrides[section][field] = val;
                    handled = true;
                }
            }
            if (!handled) errors.add(key + ": unknown configuration key");
        }
    }

    // Materialize strategies with trainer-level defaults, then per-strategy
    // overrides.
    cfg.strategies.clear();
    for (const std::string& name : strategy_names) {
        auto kind = strategy_from_string(name);
        if (!kind) {
            errors.add("run.strategies: unknown strategy name '" + name + "'");
            continue;
        }
        StrategyConfig s;
        s.kind = *kind;
        auto oit = strategy_overrides.find(name);
        if (oit != strategy_overrides.end()) {
            for (const auto& [field, val] : oit->second) {
                const std::string key = name + "." + field;
                if (field == "lambda_base") read_double(key, val, s.lambda_base);
                else if (field == "beta") read_double(key, val, s.beta);
                else if (field == "replay_ratio") read_double(key, val, s.replay_ratio);
                else if (field == "weight_decay") read_double(key, val, s.weight_decay);
                else if (field == "adapters_enabled") s.adapters_enabled = (val == "1" || val == "true");
                else if (field == "adapter_rank") read_size(key, val, s.adapter.rank);
                else if (field == "adapter_alpha") read_double(key, val, s.adapter.scale);
            }
        }
        cfg.strategies.push_back(s);
    }

    // Semantic validation, all collected.
    if (cfg.strategies.empty()) errors.add("run.strategies: at least one strategy is required");
    if (cfg.seeds.empty()) errors.add("run.seeds: at least one seed is required");
    if (cfg.n_tasks < 2) errors.add("stream.n_tasks: need at least 2 tasks");
    if (cfg.model.d_v < 1 || cfg.model.vocab < 1 || cfg.model.max_len < 2 || cfg.model.d_h < 1 ||
        cfg.model.d_e < 1) {
        errors.add("model.*: dimensions must be >= 1 (max_len >= 2)");
    }
    if (cfg.model.temperature <= 0.0) errors.add("model.temperature: must be > 0");
    if (cfg.stream.epsilon < 0.0 || cfg.stream.epsilon > 1.0) {
        errors.add("stream.epsilon: must lie in [0,1]");
    }
    if (cfg.train.lr <= 0.0) errors.add("trainer.lr: must be > 0");
    if (cfg.train.epochs < 1) errors.add("trainer.epochs: must be >= 1");
    if (cfg.train.batch_size < 1) errors.add("trainer.batch_size: must be >= 1");
    for (const auto& s : cfg.strategies) {
        const std::string prefix = to_string(s.kind);
        if (s.lambda_base < 0.0) errors.add(prefix + ".lambda_base: must be >= 0");
        if (s.beta < 0.0) errors.add(prefix + ".beta: must be >= 0");
        if (s.replay_ratio < 0.0 || s.replay_ratio > 1.0) {
            errors.add(prefix + ".replay_ratio: must lie in [0,1]");
        }
        if (s.weight_decay < 0.0) errors.add(prefix + ".weight_decay: must be >= 0");
        if (s.adapter.rank < 1) errors.add(prefix + ".adapter_rank: must be >= 1");
    }
    if (!cfg.train_files.empty() || !cfg.eval_files.empty()) {
        if (cfg.train_files.size() != cfg.eval_files.size()) {
            errors.add("data.train_files/data.eval_files: counts must match");
        } else if (cfg.train_files.size() < 2) {
            errors.add("data.train_files: need at least 2 tasks");
        }
    }

    if (!errors.messages.empty()) {
        std::string msg = "configuration errors:";
        for (const auto& m : errors.messages) msg += "\n  - " + m;
        throw ValidationError(msg);
    }

    // Canonical echo of everything that shaped the run.
    auto put = [&cfg](const std::string& k, const std::string& v) { cfg.resolved[k] = v; };
    put("model.d_v", std::to_string(cfg.model.d_v));
    put("model.vocab", std::to_string(cfg.model.vocab));
    put("model.max_len", std::to_string(cfg.model.max_len));
    put("model.d_h", std::to_string(cfg.model.d_h));
    put("model.d_e", std::to_string(cfg.model.d_e));
    put("model.temperature", fmt_full(cfg.model.temperature));
    put("stream.n_tasks", std::to_string(cfg.n_tasks));
    {
        std::string sizes;
        for (std::size_t i = 0; i < cfg.stream.train_sizes.size(); ++i) {
            if (i) sizes += ",";
            sizes += std::to_string(cfg.stream.train_sizes[i]);
        }
        put("stream.train_sizes", sizes);
    }
    put("stream.eval_size", std::to_string(cfg.stream.eval_size));
    put("stream.n_concepts", std::to_string(cfg.stream.n_concepts));
    put("stream.band_width", std::to_string(cfg.stream.band_width));
    put("stream.base_band_start", std::to_string(cfg.stream.base_band_start));
    put("stream.band_shift", std::to_string(cfg.stream.band_shift));
    put("stream.rotation_angle", fmt_full(cfg.stream.rotation_angle));
    put("stream.noise_sigma", fmt_full(cfg.stream.noise_sigma));
    put("stream.caption_signal", fmt_full(cfg.stream.caption_signal));
    put("stream.center_scale", fmt_full(cfg.stream.center_scale));
    put("stream.epsilon", fmt_full(cfg.stream.epsilon));
    put("trainer.epochs", std::to_string(cfg.train.epochs));
    put("trainer.batch_size", std::to_string(cfg.train.batch_size));
    put("trainer.lr", fmt_full(cfg.train.lr));
    put("trainer.fisher_samples", std::to_string(cfg.train.fisher_samples));
    put("trainer.fisher_batch", std::to_string(cfg.train.fisher_batch));
    put("trainer.probe_size", std::to_string(cfg.train.probe_size));
    put("trainer.eval_batch", std::to_string(cfg.train.eval_batch));
    {
        std::string names;
        for (std::size_t i = 0; i < cfg.strategies.size(); ++i) {
            if (i) names += ",";
            names += to_string(cfg.strategies[i].kind);
        }
        put("run.strategies", names);
        std::string seeds;
        for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
            if (i) seeds += ",";
            seeds += std::to_string(cfg.seeds[i]);
        }
        put("run.seeds", seeds);
    }
    put("run.out", cfg.out_dir);
    for (const auto& s : cfg.strategies) {
        const std::string p = to_string(s.kind);
        put(p + ".lambda_base", fmt_full(s.lambda_base));
        put(p + ".beta", fmt_full(s.beta));
        put(p + ".replay_ratio", fmt_full(s.replay_ratio));
        put(p + ".weight_decay", fmt_full(s.weight_decay));
        put(p + ".adapters_enabled", s.adapters_enabled ? "1" : "0");
        put(p + ".adapter_rank", std::to_string(s.adapter.rank));
        put(p + ".adapter_alpha", fmt_full(s.adapter.scale));
    }
    if (!cfg.train_files.empty()) {
        std::string t, e;
        for (std::size_t i = 0; i < cfg.train_files.size(); ++i) {
            if (i) { t += ","; e += ","; }
            t += cfg.train_files[i];
            e += cfg.eval_files[i];
        }
        put("data.train_files", t);
        put("data.eval_files", e);
    }
    return cfg;
}

inline std::string canonical_config_text(const ExperimentConfig& cfg) {
    std::string text;
    for (const auto& [k, v] : cfg.resolved) {
        text += k;
        text += "=";
        text += v;
        text += "\n";
    }
    return text;
}

inline std::string config_hash(const ExperimentConfig& cfg) {
    return hex64(fnv1a(canonical_config_text(cfg)));
}

// Hash of the model-shaping keys only; report refuses to merge runs whose
// model hashes differ.
inline std::string model_hash(const ExperimentConfig& cfg) {
    std::string text;
    for (const auto& [k, v] : cfg.resolved) {
        if (k.rfind("model.", 0) == 0) text += k + "=" + v + "\n";
    }
    return hex64(fnv1a(text));
}

}  // namespace modalanchor
