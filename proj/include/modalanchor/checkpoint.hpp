#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "modalanchor/encoder.hpp"
#include "modalanchor/errors.hpp"
#include "modalanchor/taskgen.hpp"
#include "modalanchor/trainer.hpp"

namespace modalanchor {

inline constexpr const char* kCheckpointMagic = "MODALANCHOR/1";

namespace detail {

inline nlohmann::json model_config_json(const ModelConfig& cfg) {
    return {{"d_v", cfg.d_v},       {"vocab", cfg.vocab}, {"max_len", cfg.max_len},
            {"d_h", cfg.d_h},       {"d_e", cfg.d_e},     {"temperature", cfg.temperature},
            {"seed", cfg.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.d_v = j.at("d_v").get<std::size_t>();
    cfg.vocab = j.at("vocab").get<std::size_t>();
    cfg.max_len = j.at("max_len").get<std::size_t>();
    cfg.d_h = j.at("d_h").get<std::size_t>();
    cfg.d_e = j.at("d_e").get<std::size_t>();
    cfg.temperature = j.at("temperature").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

inline nlohmann::json params_json(const ParamStore& params) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, p] : params) {
        j[name] = {{"shape", p.value.shape()},
                   {"group", to_string(p.group)},
                   {"trainable", p.trainable},
                   {"values", p.value.values()}};
    }
    return j;
}

// Rebuild an encoder from serialized parameters. Only merged models are
// serialized, so the constructor's parameter set matches exactly.
inline DualEncoder encoder_from_json(const ModelConfig& cfg, const nlohmann::json& params_j) {
    DualEncoder model(cfg);
    for (const auto& [name, pj] : params_j.items()) {
        if (!model.params().contains(name)) {
            throw ParseError("checkpoint: unexpected parameter " + name);
        }
        model.params().set_value(name, pj.at("values").get<std::vector<double>>());
        model.params().set_trainable(name, pj.at("trainable").get<bool>());
    }
    return model;
}

inline nlohmann::json pair_json(const Pair& p) {
    return {{"task", p.task_id}, {"image", p.image}, {"caption", p.caption}};
}

inline Pair pair_from_json(const nlohmann::json& j) {
    Pair p;
    p.task_id = j.at("task").get<std::string>();
    p.image = j.at("image").get<std::vector<double>>();
    p.caption = j.at("caption").get<std::vector<int>>();
    return p;
}

inline nlohmann::json record_json(const ConsolidationRecord& rec) {
    nlohmann::json j;
    j["task_id"] = rec.task_id;
    j["lambdas"] = rec.lambdas;
    j["grouping"] = to_string(rec.fisher.grouping);
    j["sample_count"] = rec.fisher.sample_count;
    j["anchor"] = rec.anchor;
    j["fisher"] = rec.fisher.values;
    nlohmann::json groups = nlohmann::json::object();
    for (const auto& [name, g] : rec.fisher.groups) groups[name] = to_string(g);
    j["groups"] = groups;
    return j;
}

inline ConsolidationRecord record_from_json(const nlohmann::json& j) {
    ConsolidationRecord rec;
    rec.task_id = j.at("task_id").get<std::string>();
    rec.lambdas = j.at("lambdas").get<std::map<std::string, double>>();
    rec.fisher.grouping = j.at("grouping").get<std::string>() == "whole_model"
                              ? FisherGrouping::whole_model
                              : FisherGrouping::per_modality;
    rec.fisher.sample_count = j.at("sample_count").get<std::size_t>();
    rec.anchor = j.at("anchor").get<std::map<std::string, std::vector<double>>>();
    rec.fisher.values = j.at("fisher").get<std::map<std::string, std::vector<double>>>();
    for (const auto& [name, g] : j.at("groups").items()) {
        rec.fisher.groups[name] = param_group_from_string(g.get<std::string>());
    }
    return rec;
}

}  // namespace detail

struct Checkpoint {
    std::string config_hash;
    ModelConfig model_config;
    StrategyConfig strategy;
    TrainConfig train;
    StreamTemplate stream_template;
    std::size_t n_tasks = 0;
    std::uint64_t seed = 0;
    RunArtifacts artifacts;
};

inline nlohmann::json strategy_json(const StrategyConfig& s) {
    return {{"kind", to_string(s.kind)},
            {"lambda_base", s.lambda_base},
            {"beta", s.beta},
            {"replay_ratio", s.replay_ratio},
            {"weight_decay", s.weight_decay},
            {"adapters_enabled", s.adapters_enabled},
            {"adapter_rank", s.adapter.rank},
            {"adapter_alpha", s.adapter.scale},
            {"adapter_targets", s.adapter.targets}};
}

inline StrategyConfig strategy_from_json(const nlohmann::json& j) {
    StrategyConfig s;
    auto kind = strategy_from_string(j.at("kind").get<std::string>());
    if (!kind) throw ParseError("checkpoint: unknown strategy kind");
    s.kind = *kind;
    s.lambda_base = j.at("lambda_base").get<double>();
    s.beta = j.at("beta").get<double>();
    s.replay_ratio = j.at("replay_ratio").get<double>();
    s.weight_decay = j.at("weight_decay").get<double>();
    s.adapters_enabled = j.at("adapters_enabled").get<bool>();
    s.adapter.rank = j.at("adapter_rank").get<std::size_t>();
    s.adapter.scale = j.at("adapter_alpha").get<double>();
    s.adapter.targets = j.at("adapter_targets").get<std::vector<std::string>>();
    return s;
}

inline nlohmann::json train_json(const TrainConfig& t) {
    return {{"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"lr", t.lr},
            {"fisher_samples", t.fisher_samples},
            {"fisher_batch", t.fisher_batch},
            {"probe_size", t.probe_size},
            {"eval_batch", t.eval_batch}};
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
    TrainConfig t;
    t.epochs = j.at("epochs").get<std::size_t>();
    t.batch_size = j.at("batch_size").get<std::size_t>();
    t.lr = j.at("lr").get<double>();
    t.fisher_samples = j.at("fisher_samples").get<std::size_t>();
    t.fisher_batch = j.at("fisher_batch").get<std::size_t>();
    t.probe_size = j.at("probe_size").get<std::size_t>();
    t.eval_batch = j.at("eval_batch").get<std::size_t>();
    return t;
}

inline nlohmann::json stream_template_json(const StreamTemplate& s) {
    return {{"train_sizes", s.train_sizes},
            {"eval_size", s.eval_size},
            {"n_concepts", s.n_concepts},
            {"band_width", s.band_width},
            {"base_band_start", s.base_band_start},
            {"band_shift", s.band_shift},
            {"rotation_angle", s.rotation_angle},
            {"noise_sigma", s.noise_sigma},
            {"caption_signal", s.caption_signal},
            {"center_scale", s.center_scale},
            {"epsilon", s.epsilon}};
}

inline StreamTemplate stream_template_from_json(const nlohmann::json& j) {
    StreamTemplate s;
    s.train_sizes = j.at("train_sizes").get<std::vector<std::size_t>>();
    s.eval_size = j.at("eval_size").get<std::size_t>();
    s.n_concepts = j.at("n_concepts").get<std::size_t>();
    s.band_width = j.at("band_width").get<std::size_t>();
    s.base_band_start = j.at("base_band_start").get<int>();
    s.band_shift = j.at("band_shift").get<int>();
    s.rotation_angle = j.at("rotation_angle").get<double>();
    s.noise_sigma = j.at("noise_sigma").get<double>();
    s.caption_signal = j.at("caption_signal").get<double>();
    s.center_scale = j.at("center_scale").get<double>();
    s.epsilon = j.at("epsilon").get<double>();
    return s;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    if (ckpt.artifacts.final_model && ckpt.artifacts.final_model->has_adapters()) {
        throw ContractError("save_checkpoint: merge adapters before serializing");
    }
    nlohmann::json j;
    j["format"] = kCheckpointMagic;
    j["config_hash"] = ckpt.config_hash;
    j["model"] = detail::model_config_json(ckpt.model_config);
    j["strategy"] = strategy_json(ckpt.strategy);
    j["train"] = train_json(ckpt.train);
    j["stream"] = stream_template_json(ckpt.stream_template);
    j["n_tasks"] = ckpt.n_tasks;
    j["seed"] = ckpt.seed;

    const RunArtifacts& a = ckpt.artifacts;
    j["accuracy"] = {{"r", a.accuracy.r}, {"baseline", a.accuracy.baseline}};
    j["loss_logs"] = a.loss_logs;
    j["task_seconds"] = a.task_seconds;
    j["epsilon_violations"] = a.epsilon_violations;
    j["aborted"] = a.aborted;
    j["abort_reason"] = a.abort_reason;

    if (a.final_model) {
        j["parameters"] = detail::params_json(a.final_model->params());
    }
    j["records"] = nlohmann::json::array();
    for (const auto& rec : a.records) j["records"].push_back(detail::record_json(rec));
    j["snapshots"] = nlohmann::json::array();
    for (const auto& snap : a.snapshots) {
        nlohmann::json sj;
        sj["task_id"] = snap.task_id;
        sj["sim_old"] = snap.sim_old;
        sj["probe"] = nlohmann::json::array();
        for (const auto& p : snap.probe) sj["probe"].push_back(detail::pair_json(p));
        sj["parameters"] = detail::params_json(snap.frozen.params());
        j["snapshots"].push_back(std::move(sj));
    }

    std::ofstream out(path);
    if (!out) throw IoError("save_checkpoint: cannot open " + path);
    out << kCheckpointMagic << "\n" << j.dump() << "\n";
    if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_checkpoint: cannot open " + path);
    std::string magic;
    if (!std::getline(in, magic) || magic != kCheckpointMagic) {
        throw ParseError("load_checkpoint: " + path + ": bad magic line (expected " +
                         std::string(kCheckpointMagic) + ")");
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("load_checkpoint: " + path + ": " + e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.config_hash = j.at("config_hash").get<std::string>();
        ckpt.model_config = detail::model_config_from_json(j.at("model"));
        ckpt.strategy = strategy_from_json(j.at("strategy"));
        ckpt.train = train_from_json(j.at("train"));
        ckpt.stream_template = stream_template_from_json(j.at("stream"));
        ckpt.n_tasks = j.at("n_tasks").get<std::size_t>();
        ckpt.seed = j.at("seed").get<std::uint64_t>();

        RunArtifacts& a = ckpt.artifacts;
        a.accuracy.r = j.at("accuracy").at("r").get<std::vector<std::vector<double>>>();
        a.accuracy.baseline = j.at("accuracy").at("baseline").get<std::vector<double>>();
        a.loss_logs = j.at("loss_logs").get<std::vector<std::vector<double>>>();
        a.task_seconds = j.at("task_seconds").get<std::vector<double>>();
        a.epsilon_violations = j.at("epsilon_violations").get<std::vector<std::size_t>>();
        a.aborted = j.at("aborted").get<bool>();
        a.abort_reason = j.at("abort_reason").get<std::string>();

        if (j.contains("parameters")) {
            a.final_model = detail::encoder_from_json(ckpt.model_config, j.at("parameters"));
        }
        for (const auto& rj : j.at("records")) a.records.push_back(detail::record_from_json(rj));
        for (const auto& sj : j.at("snapshots")) {
            EncoderSnapshot snap;
            snap.task_id = sj.at("task_id").get<std::string>();
            snap.sim_old = sj.at("sim_old").get<std::vector<double>>();
            for (const auto& pj : sj.at("probe")) snap.probe.push_back(detail::pair_from_json(pj));
            snap.frozen = detail::encoder_from_json(ckpt.model_config, sj.at("parameters"));
            build_probe_tensors(snap, ckpt.model_config);
            a.snapshots.push_back(std::move(snap));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("load_checkpoint: " + path + ": " + e.what());
    }
    return ckpt;
}

}  // namespace modalanchor
