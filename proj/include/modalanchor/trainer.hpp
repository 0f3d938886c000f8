#pragma once

#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "modalanchor/adapt.hpp"
#include "modalanchor/encoder.hpp"
#include "modalanchor/errors.hpp"
#include "modalanchor/metrics.hpp"
#include "modalanchor/regularize.hpp"
#include "modalanchor/taskgen.hpp"

namespace modalanchor {

enum class StrategyKind { naive, ewc_standard, replay, l2, ours };

inline const char* to_string(StrategyKind k) {
    switch (k) {
        case StrategyKind::naive: return "naive";
        case StrategyKind::ewc_standard: return "ewc_standard";
        case StrategyKind::replay: return "replay";
        case StrategyKind::l2: return "l2";
        case StrategyKind::ours: return "ours";
    }
    return "?";
}

inline std::optional<StrategyKind> strategy_from_string(const std::string& s) {
    if (s == "naive") return StrategyKind::naive;
    if (s == "ewc_standard") return StrategyKind::ewc_standard;
    if (s == "replay") return StrategyKind::replay;
    if (s == "l2") return StrategyKind::l2;
    if (s == "ours") return StrategyKind::ours;
    return std::nullopt;
}

// Hyperparameters; each strategy reads its applicable subset.
struct StrategyConfig {
    StrategyKind kind = StrategyKind::naive;
    double lambda_base = 100.0;   // EWC strength (ewc_standard, ours)
    double beta = 1.0;            // consistency weight (ours)
    double replay_ratio = 0.3;    // replayed fraction per batch (replay)
    double weight_decay = 0.05;   // pull toward previous anchor (l2)
    bool adapters_enabled = true; // attach adapters from task 2 (ours)
    AdapterSpec adapter;
};

struct TrainConfig {
    std::size_t epochs = 5;
    std::size_t batch_size = 32;
    double lr = 5e-3;
    std::size_t fisher_samples = 200;  // micro-batch draws per consolidation
    std::size_t fisher_batch = 8;      // pairs per Fisher draw
    std::size_t probe_size = 64;       // snapshot probe pairs
    std::size_t eval_batch = 32;

    void validate() const {
        if (epochs < 1 || batch_size < 1) throw ParameterError("TrainConfig: epochs/batch_size >= 1");
        if (lr <= 0.0) throw ParameterError("TrainConfig: lr must be > 0");
        if (fisher_samples < 1 || fisher_batch < 1) {
            throw ParameterError("TrainConfig: fisher settings must be >= 1");
        }
        if (probe_size < 1 || eval_batch < 1) {
            throw ParameterError("TrainConfig: probe/eval sizes must be >= 1");
        }
    }
};

// Mutable cross-task state threaded through the sequence.
struct History {
    std::vector<ConsolidationRecord> records;
    std::vector<EncoderSnapshot> snapshots;
    ReplayBuffer buffer;
    AnchorMap l2_anchor;  // previous-task weights (l2 strategy)
};

struct RunArtifacts {
    AccuracyMatrix accuracy;
    std::vector<std::vector<double>> loss_logs;  // per task, per batch
    std::vector<ConsolidationRecord> records;
    std::vector<EncoderSnapshot> snapshots;
    std::vector<double> task_seconds;  // train + consolidate time per task
    std::vector<std::size_t> epsilon_violations;  // task indices with final acc < ε
    std::optional<DualEncoder> final_model;
    bool aborted = false;
    std::string abort_reason;
};

namespace detail {

inline std::vector<std::vector<const Pair*>> epoch_batches(const std::vector<Pair>& train,
                                                           std::size_t batch_size, Rng& rng) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    std::vector<std::vector<const Pair*>> batches;
    batches.reserve((train.size() + batch_size - 1) / batch_size);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        std::vector<const Pair*> batch;
        const std::size_t end = std::min(start + batch_size, order.size());
        batch.reserve(end - start);
        for (std::size_t i = start; i < end; ++i) batch.push_back(&train[order[i]]);
        batches.push_back(std::move(batch));
    }
    return batches;
}

}  // namespace detail

// One task of sequential training under the given strategy. Batch order
// depends only on (run_seed, task_index, epoch), never on the strategy, so
// strategies with neutralized regularizers trace identical trajectories.
inline std::vector<double> train_task(DualEncoder& model, const TaskData& task,
                                      const StrategyConfig& strategy, History& history,
                                      const TrainConfig& cfg, std::uint64_t run_seed,
                                      std::size_t task_index) {
    cfg.validate();
    if (task.train.empty()) throw ParameterError("train_task: empty training set");

    const bool use_adapters =
        strategy.kind == StrategyKind::ours && strategy.adapters_enabled && task_index > 0;
    if (use_adapters) {
        attach_adapters(model, strategy.adapter, derive_seed({run_seed, 0x616454ULL, task_index}));
        freeze_hierarchy(model, FreezeLevel::all_but_adapters);
    }

    // EWC terms over parameters pinned by the freeze mask are constant for
    // the whole task; fold them once.
    const bool uses_ewc =
        (strategy.kind == StrategyKind::ewc_standard || strategy.kind == StrategyKind::ours) &&
        !history.records.empty();
    SplitEwc ewc_split;
    if (uses_ewc) ewc_split = split_ewc_terms(model, history.records);
    const double beta = strategy.kind == StrategyKind::ours ? strategy.beta : 0.0;
    const bool uses_consistency = strategy.kind == StrategyKind::ours && beta > 0.0 &&
                                  !history.snapshots.empty();

    Rng replay_rng(derive_seed({run_seed, 0x7265706cULL, task_index}));
    std::vector<double> loss_log;
    loss_log.reserve(cfg.epochs * ((task.train.size() + cfg.batch_size - 1) / cfg.batch_size));
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed({run_seed, 0x65706f6368ULL, task_index, epoch}));
        auto batches = detail::epoch_batches(task.train, cfg.batch_size, shuffle_rng);
        for (auto& batch : batches) {
            std::vector<const Pair*> effective_batch = batch;
            if (strategy.kind == StrategyKind::replay) {
                effective_batch = mix_batches(batch, history.buffer, strategy.replay_ratio, replay_rng);
            }

            Tensor base_loss = task_loss(model, effective_batch);
            Tensor objective = base_loss;
            if (uses_ewc && !ewc_split.empty()) {
                objective = add(objective, ewc_live_penalty(model, ewc_split));
            }
            if (uses_consistency) {
                Tensor acc = consistency_loss(model, history.snapshots[0]);
                for (std::size_t s = 1; s < history.snapshots.size(); ++s) {
                    acc = add(acc, consistency_loss(model, history.snapshots[s]));
                }
                objective =
                    add(objective, scale(acc, beta / static_cast<double>(history.snapshots.size())));
            }

            const double value = objective.scalar_value();
            if (!std::isfinite(value)) {
                throw NumericError("train_task: non-finite loss at task " + task.spec.task_id +
                                   " step " + std::to_string(step) + " (task term " +
                                   fmt_full(base_loss.scalar_value()) + ", total " + fmt_full(value) +
                                   ")");
            }

            GradientMap grads = backward(objective);
            const bool anchored_decay =
                strategy.kind == StrategyKind::l2 && task_index > 0 && strategy.weight_decay > 0.0;
            sgd_step(model.params(), grads, cfg.lr, anchored_decay ? strategy.weight_decay : 0.0,
                     anchored_decay ? &history.l2_anchor : nullptr);
            model.clamp_temperature();

            loss_log.push_back(value);
            ++step;
        }
    }
    return loss_log;
}

// Post-task consolidation: merge adapters if attached, estimate the diagonal
// Fisher on micro-batch draws from the task data, fix the per-group λs, and
// snapshot the merged encoders with a fixed probe batch.
inline std::pair<ConsolidationRecord, EncoderSnapshot> consolidate(DualEncoder& model,
                                                                   const TaskData& task,
                                                                   const StrategyConfig& strategy,
                                                                   const TrainConfig& cfg,
                                                                   std::uint64_t run_seed,
                                                                   std::size_t task_index) {
    if (model.has_adapters()) merge_adapters(model);
    if (task.train.empty()) throw ParameterError("consolidate: empty task data");

    Rng fisher_rng(derive_seed({run_seed, 0x66697368ULL, task_index}));
    std::vector<std::vector<const Pair*>> draws(cfg.fisher_samples);
    for (auto& draw : draws) {
        draw.reserve(cfg.fisher_batch);
        for (std::size_t i = 0; i < cfg.fisher_batch; ++i) {
            draw.push_back(&task.train[fisher_rng.uniform_index(task.train.size())]);
        }
    }
    const FisherGrouping grouping = strategy.kind == StrategyKind::ewc_standard
                                        ? FisherGrouping::whole_model
                                        : FisherGrouping::per_modality;

    ConsolidationRecord record;
    record.task_id = task.spec.task_id;
    record.fisher = estimate_fisher(model, draws, grouping);
    record.anchor = model.params().snapshot_values();
    if (grouping == FisherGrouping::whole_model) {
        record.lambdas["all"] = strategy.lambda_base;
    } else if (strategy.lambda_base == 0.0) {
        record.lambdas[to_string(ParamGroup::visual)] = 0.0;
        record.lambdas[to_string(ParamGroup::textual)] = 0.0;
        record.lambdas[to_string(ParamGroup::cross_modal)] = 0.0;
    } else {
        const GroupLambdas l = adaptive_lambdas(record.fisher, strategy.lambda_base);
        record.lambdas[to_string(ParamGroup::visual)] = l.visual;
        record.lambdas[to_string(ParamGroup::textual)] = l.textual;
        record.lambdas[to_string(ParamGroup::cross_modal)] = l.cross_modal;
    }

    Rng probe_rng(derive_seed({run_seed, 0x70726f6265ULL, task_index}));
    std::vector<std::size_t> order(task.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    probe_rng.shuffle(order);
    const std::size_t probe_n = std::min(cfg.probe_size, task.train.size());
    std::vector<Pair> probe;
    probe.reserve(probe_n);
    for (std::size_t i = 0; i < probe_n; ++i) probe.push_back(task.train[order[i]]);

    EncoderSnapshot snapshot = make_snapshot(model, std::move(probe), task.spec.task_id);
    return {std::move(record), std::move(snapshot)};
}

// Full sequential protocol: per task train → consolidate → evaluate on every
// task, filling one accuracy-matrix row per completed task; the ε floor is
// checked on the final row. Deterministic given (stream, strategy, seed).
inline RunArtifacts run_sequence(const TaskStream& stream, const StrategyConfig& strategy,
                                 const TrainConfig& cfg, std::uint64_t seed,
                                 const ModelConfig& model_cfg) {
    if (stream.tasks.size() < 2) throw ParameterError("run_sequence: stream must have >= 2 tasks");
    cfg.validate();

    ModelConfig mc = model_cfg;
    mc.seed = seed;
    DualEncoder model(mc);

    RunArtifacts artifacts;
    const std::size_t n = stream.tasks.size();
    artifacts.accuracy.baseline.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        artifacts.accuracy.baseline[i] =
            retrieval_accuracy(model, stream.tasks[i].eval, cfg.eval_batch).value;
    }

    History history;
    history.buffer.selection_seed = derive_seed({seed, 0x627566ULL});

    try {
        for (std::size_t k = 0; k < n; ++k) {
            const auto t0 = std::chrono::steady_clock::now();
            artifacts.loss_logs.push_back(
                train_task(model, stream.tasks[k], strategy, history, cfg, seed, k));

            auto [record, snapshot] = consolidate(model, stream.tasks[k], strategy, cfg, seed, k);
            if (strategy.kind == StrategyKind::l2) {
                history.l2_anchor = record.anchor;
            }
            if (strategy.kind == StrategyKind::replay) {
                update_buffer(history.buffer, stream.tasks[k].train);
            }
            history.records.push_back(std::move(record));
            history.snapshots.push_back(std::move(snapshot));
            const auto t1 = std::chrono::steady_clock::now();
            artifacts.task_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());

            std::vector<double> row(n);
            for (std::size_t i = 0; i < n; ++i) {
                row[i] = retrieval_accuracy(model, stream.tasks[i].eval, cfg.eval_batch).value;
            }
            artifacts.accuracy.r.push_back(std::move(row));
        }
    } catch (const NumericError& e) {
        artifacts.aborted = true;
        artifacts.abort_reason = e.what();
        artifacts.records = std::move(history.records);
        artifacts.snapshots = std::move(history.snapshots);
        return artifacts;
    }

    artifacts.records = std::move(history.records);
    artifacts.snapshots = std::move(history.snapshots);
    const auto& final_row = artifacts.accuracy.r.back();
    for (std::size_t i = 0; i < n; ++i) {
        if (final_row[i] < stream.tasks[i].spec.epsilon) artifacts.epsilon_violations.push_back(i);
    }
    artifacts.final_model = model;
    return artifacts;
}

}  // namespace modalanchor
