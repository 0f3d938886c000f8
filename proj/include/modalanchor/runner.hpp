#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "modalanchor/checkpoint.hpp"
#include "modalanchor/config.hpp"
#include "modalanchor/gradcheck.hpp"
#include "modalanchor/metrics.hpp"
#include "modalanchor/taskgen.hpp"
#include "modalanchor/trainer.hpp"

namespace modalanchor {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitNumericFailure = 3;
inline constexpr int kExitIoError = 4;

struct RunMetrics {
    double bwt = 0.0;
    double fwt = 0.0;
    double forgetting = 0.0;
    double avg_acc = 0.0;
    double drift_cos = 0.0;
    std::optional<double> retention;
};

inline RunMetrics compute_run_metrics(const RunArtifacts& artifacts, const TaskStream& stream,
                                      std::size_t eval_batch) {
    RunMetrics m;
    m.bwt = backward_transfer(artifacts.accuracy);
    m.fwt = forward_transfer(artifacts.accuracy);
    m.forgetting = forgetting_rate(artifacts.accuracy);
    m.avg_acc = average_accuracy(artifacts.accuracy);
    if (!artifacts.snapshots.empty() && artifacts.final_model) {
        const DriftReport drift = alignment_drift(artifacts.snapshots.front(),
                                                  *artifacts.final_model,
                                                  stream.tasks.front().eval, eval_batch);
        m.drift_cos = drift.mean_cos_decrease;
        m.retention = drift.retention;
    }
    return m;
}

struct RunOutput {
    StrategyConfig strategy;
    std::uint64_t seed = 0;
    RunArtifacts artifacts;
    RunMetrics metrics;
    double total_seconds = 0.0;
};

inline TaskStream build_stream(const ExperimentConfig& cfg, std::uint64_t seed) {
    if (!cfg.train_files.empty()) {
        TaskStream stream;
        stream.tmpl = cfg.stream;
        stream.seed = seed;
        for (std::size_t k = 0; k < cfg.train_files.size(); ++k) {
            TaskData task;
            task.train = load_pairs(cfg.train_files[k], cfg.model);
            task.eval = load_pairs(cfg.eval_files[k], cfg.model);
            if (task.train.empty() || task.eval.empty()) {
                throw ValidationError("data: empty pair file for task " + std::to_string(k + 1));
            }
            task.spec.task_id = task.train.front().task_id.empty() ? default_task_id(k)
                                                                   : task.train.front().task_id;
            task.spec.n_train = task.train.size();
            task.spec.n_eval = task.eval.size();
            task.spec.epsilon = cfg.stream.epsilon;
            stream.tasks.push_back(std::move(task));
        }
        return stream;
    }
    return generate_task_stream(seed, cfg.n_tasks, cfg.stream, cfg.model);
}

// ---------------------------------------------------------------------------
// Artifact writers. Every CSV opens with the resolved config hash; all
// numeric output is fixed precision 6, locale independent. Timings go to
// wallclock.csv only, keeping the metric files byte-stable across runs.
// ---------------------------------------------------------------------------

namespace detail {

inline std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    return out;
}

inline std::string csv_header(const ExperimentConfig& cfg) {
    return "# config_hash=" + config_hash(cfg) + "\n# model_hash=" + model_hash(cfg) + "\n";
}

}  // namespace detail

inline void write_metrics_csv(const ExperimentConfig& cfg, const RunOutput& run,
                              const std::string& path) {
    auto out = detail::open_out(path);
    out << detail::csv_header(cfg);
    out << "strategy,seed,bwt,fwt,forgetting,avg_acc,drift_cos,retention,wallclock_ratio\n";
    out << to_string(run.strategy.kind) << "," << run.seed << "," << fmt_fixed(run.metrics.bwt)
        << "," << fmt_fixed(run.metrics.fwt) << "," << fmt_fixed(run.metrics.forgetting) << ","
        << fmt_fixed(run.metrics.avg_acc) << "," << fmt_fixed(run.metrics.drift_cos) << ","
        << (run.metrics.retention ? fmt_fixed(*run.metrics.retention) : std::string{}) << ",\n";
}

inline void write_wallclock_csv(const ExperimentConfig& cfg, const RunOutput& run,
                                const std::string& path) {
    auto out = detail::open_out(path);
    out << detail::csv_header(cfg);
    out << "strategy,seed,task,seconds\n";
    for (std::size_t k = 0; k < run.artifacts.task_seconds.size(); ++k) {
        out << to_string(run.strategy.kind) << "," << run.seed << "," << k + 1 << ","
            << fmt_fixed(run.artifacts.task_seconds[k]) << "\n";
    }
    out << to_string(run.strategy.kind) << "," << run.seed << ",total,"
        << fmt_fixed(run.total_seconds) << "\n";
}

inline void write_loss_curves_csv(const ExperimentConfig& cfg, const RunArtifacts& artifacts,
                                  const TaskStream& stream, const std::string& path) {
    auto out = detail::open_out(path);
    out << detail::csv_header(cfg);
    out << "task,batch,loss\n";
    for (std::size_t k = 0; k < artifacts.loss_logs.size(); ++k) {
        const std::string& id = stream.tasks[k].spec.task_id;
        for (std::size_t b = 0; b < artifacts.loss_logs[k].size(); ++b) {
            out << id << "," << b << "," << fmt_fixed(artifacts.loss_logs[k][b]) << "\n";
        }
    }
}

inline void write_fisher_hist_csv(const ExperimentConfig& cfg, const RunArtifacts& artifacts,
                                  const std::string& path, std::size_t bins = 50) {
    auto out = detail::open_out(path);
    out << detail::csv_header(cfg);
    out << "bin_left,count\n";
    if (artifacts.records.empty()) return;
    const auto& fisher = artifacts.records.back().fisher.values;
    double max_v = 0.0;
    for (const auto& [name, vals] : fisher) {
        for (double v : vals) max_v = std::max(max_v, v);
    }
    if (max_v <= 0.0) max_v = 1.0;
    std::vector<std::size_t> counts(bins, 0);
    const double width = max_v / static_cast<double>(bins);
    for (const auto& [name, vals] : fisher) {
        for (double v : vals) {
            std::size_t b = static_cast<std::size_t>(v / width);
            if (b >= bins) b = bins - 1;
            counts[b]++;
        }
    }
    for (std::size_t b = 0; b < bins; ++b) {
        out << fmt_fixed(width * static_cast<double>(b), 8) << "," << counts[b] << "\n";
    }
}

inline void write_pca_csv(const ExperimentConfig& cfg, const RunArtifacts& artifacts,
                          const TaskStream& stream, const std::string& path,
                          std::size_t per_task = 64) {
    auto out = detail::open_out(path);
    out << detail::csv_header(cfg);
    out << "task,pc1,pc2\n";
    if (!artifacts.final_model || stream.tasks.size() < 2) return;
    std::vector<std::vector<double>> rows;
    std::vector<std::string> labels;
    for (std::size_t k = 0; k < 2; ++k) {
        const TaskData& task = stream.tasks[k];
        const std::size_t n = std::min(per_task, task.eval.size());
        std::vector<const Pair*> batch;
        for (std::size_t i = 0; i < n; ++i) batch.push_back(&task.eval[i]);
        const Tensor emb = artifacts.final_model->embed_visual(batch);
        const std::size_t d = emb.cols();
        for (std::size_t i = 0; i < n; ++i) {
            rows.emplace_back(emb.values().begin() + i * d, emb.values().begin() + (i + 1) * d);
            labels.push_back(task.spec.task_id);
        }
    }
    const PcaResult pca = pca_project(rows, 2);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out << labels[i] << "," << fmt_fixed(pca.coords[i][0]) << "," << fmt_fixed(pca.coords[i][1])
            << "\n";
    }
}

inline void write_cosmatrix_csv(const ExperimentConfig& cfg, const RunArtifacts& artifacts,
                                const TaskStream& stream, const std::string& path,
                                std::size_t per_task = 32) {
    auto out = detail::open_out(path);
    out << detail::csv_header(cfg);
    out << "i,j,value\n";
    if (!artifacts.final_model || stream.tasks.size() < 2) return;
    std::vector<const Pair*> batch;
    for (std::size_t k = 0; k < 2; ++k) {
        const TaskData& task = stream.tasks[k];
        const std::size_t n = std::min(per_task, task.eval.size());
        for (std::size_t i = 0; i < n; ++i) batch.push_back(&task.eval[i]);
    }
    const Tensor emb = artifacts.final_model->embed_visual(batch);
    const std::size_t n = emb.rows(), d = emb.cols();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += emb.values()[i * d + k] * emb.values()[j * d + k];
            out << i << "," << j << "," << fmt_fixed(dot) << "\n";
        }
    }
}

inline std::string run_dir_name(StrategyKind kind, std::uint64_t seed) {
    return std::string(to_string(kind)) + "-s" + std::to_string(seed);
}

inline void write_run_outputs(const ExperimentConfig& cfg, const RunOutput& run,
                              const TaskStream& stream, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    Checkpoint ckpt;
    ckpt.config_hash = config_hash(cfg);
    ckpt.model_config = cfg.model;
    ckpt.model_config.seed = run.seed;
    ckpt.strategy = run.strategy;
    ckpt.train = cfg.train;
    ckpt.stream_template = cfg.stream;
    ckpt.n_tasks = stream.tasks.size();
    ckpt.seed = run.seed;
    ckpt.artifacts = run.artifacts;
    save_checkpoint(ckpt, dir + "/checkpoint.json");

    write_metrics_csv(cfg, run, dir + "/metrics.csv");
    write_wallclock_csv(cfg, run, dir + "/wallclock.csv");
    write_loss_curves_csv(cfg, run.artifacts, stream, dir + "/loss_curves.csv");
    write_fisher_hist_csv(cfg, run.artifacts, dir + "/fisher_hist.csv");
    write_pca_csv(cfg, run.artifacts, stream, dir + "/pca.csv");
    write_cosmatrix_csv(cfg, run.artifacts, stream, dir + "/cosmatrix.csv");
    write_stream_manifest(stream, dir + "/stream_manifest.json");
}

// ---------------------------------------------------------------------------
// Summary (Table-1-style blocks per strategy)
// ---------------------------------------------------------------------------

struct StrategySummary {
    std::string strategy;
    std::size_t runs = 0;
    // mean/min/max per metric, in bwt/fwt/forgetting/avg_acc order
    std::map<std::string, std::array<double, 3>> stats;
};

inline std::vector<StrategySummary> summarize(const std::vector<RunOutput>& runs) {
    std::map<std::string, std::vector<const RunOutput*>> grouped;
    std::vector<std::string> order;
    for (const auto& run : runs) {
        const std::string name = to_string(run.strategy.kind);
        if (!grouped.count(name)) order.push_back(name);
        grouped[name].push_back(&run);
    }
    std::vector<StrategySummary> out;
    for (const std::string& name : order) {
        StrategySummary s;
        s.strategy = name;
        s.runs = grouped[name].size();
        auto fill = [&](const std::string& metric, auto getter) {
            double sum = 0.0, lo = 1e300, hi = -1e300;
            for (const RunOutput* r : grouped[name]) {
                const double v = getter(*r);
                sum += v;
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            const double n = static_cast<double>(grouped[name].size());
            s.stats[metric] = {sum / n, lo, hi};
        };
        fill("bwt", [](const RunOutput& r) { return r.metrics.bwt; });
        fill("fwt", [](const RunOutput& r) { return r.metrics.fwt; });
        fill("forgetting", [](const RunOutput& r) { return r.metrics.forgetting; });
        fill("avg_acc", [](const RunOutput& r) { return r.metrics.avg_acc; });
        out.push_back(std::move(s));
    }
    return out;
}

inline void write_summary_csv(const ExperimentConfig& cfg, const std::vector<RunOutput>& runs,
                              const std::string& path) {
    auto out = detail::open_out(path);
    out << detail::csv_header(cfg);
    out << "strategy,runs";
    for (const char* m : {"bwt", "fwt", "forgetting", "avg_acc"}) {
        out << "," << m << "_mean," << m << "_min," << m << "_max";
    }
    out << "\n";
    for (const auto& s : summarize(runs)) {
        out << s.strategy << "," << s.runs;
        for (const char* m : {"bwt", "fwt", "forgetting", "avg_acc"}) {
            const auto& st = s.stats.at(m);
            out << "," << fmt_fixed(st[0]) << "," << fmt_fixed(st[1]) << "," << fmt_fixed(st[2]);
        }
        out << "\n";
    }
}

inline void write_summary_table(const ExperimentConfig& cfg, const std::vector<RunOutput>& runs,
                                const std::string& path) {
    auto out = detail::open_out(path);
    out << "run matrix summary (config " << config_hash(cfg) << ")\n";
    out << "training: epochs=" << cfg.train.epochs << " batch=" << cfg.train.batch_size
        << " lr=" << fmt_full(cfg.train.lr) << "\n\n";
    const auto summaries = summarize(runs);
    for (const char* metric : {"bwt", "fwt", "forgetting", "avg_acc"}) {
        out << metric << " (mean [min, max] over seeds)\n";
        for (const auto& s : summaries) {
            const auto& st = s.stats.at(metric);
            out << "  " << s.strategy << ": " << fmt_fixed(st[0], 4) << " [" << fmt_fixed(st[1], 4)
                << ", " << fmt_fixed(st[2], 4) << "]\n";
        }
        out << "\n";
    }
    // Wall-clock ratios vs naive on matching seeds (measured, so this table
    // is informational rather than byte-stable).
    std::map<std::uint64_t, double> naive_seconds;
    for (const auto& r : runs) {
        if (r.strategy.kind == StrategyKind::naive) naive_seconds[r.seed] = r.total_seconds;
    }
    if (!naive_seconds.empty()) {
        out << "wall-clock ratio vs naive (mean over seeds)\n";
        for (const auto& s : summaries) {
            double acc = 0.0;
            std::size_t n = 0;
            for (const auto& r : runs) {
                if (to_string(r.strategy.kind) != s.strategy) continue;
                auto it = naive_seconds.find(r.seed);
                if (it == naive_seconds.end() || it->second <= 0.0) continue;
                acc += r.total_seconds / it->second;
                ++n;
            }
            if (n) out << "  " << s.strategy << ": " << fmt_fixed(acc / static_cast<double>(n), 3) << "\n";
        }
    }
}

// ---------------------------------------------------------------------------
// cmd_run
// ---------------------------------------------------------------------------

inline RunOutput execute_run(const ExperimentConfig& cfg, const TaskStream& stream,
                             const StrategyConfig& strategy, std::uint64_t seed) {
    RunOutput out;
    out.strategy = strategy;
    out.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    out.artifacts = run_sequence(stream, strategy, cfg.train, seed, cfg.model);
    const auto t1 = std::chrono::steady_clock::now();
    out.total_seconds = std::chrono::duration<double>(t1 - t0).count();
    if (!out.artifacts.aborted) {
        out.metrics = compute_run_metrics(out.artifacts, stream, cfg.train.eval_batch);
    }
    return out;
}

inline int cmd_run(const ExperimentConfig& cfg, std::size_t jobs, std::ostream& log = std::cout) {
    namespace fs = std::filesystem;
    try {
        fs::create_directories(cfg.out_dir);
    } catch (const fs::filesystem_error& e) {
        log << "error: cannot create output directory: " << e.what() << "\n";
        return kExitIoError;
    }

    // One stream per seed, shared read-only across strategies.
    std::map<std::uint64_t, TaskStream> streams;
    try {
        for (std::uint64_t seed : cfg.seeds) {
            if (!streams.count(seed)) streams.emplace(seed, build_stream(cfg, seed));
        }
    } catch (const ValidationError& e) {
        log << "error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const ParseError& e) {
        log << "error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const IoError& e) {
        log << "error: " << e.what() << "\n";
        return kExitIoError;
    }

    struct Job {
        const StrategyConfig* strategy;
        std::uint64_t seed;
    };
    std::vector<Job> queue;
    for (const auto& strategy : cfg.strategies) {
        for (std::uint64_t seed : cfg.seeds) queue.push_back({&strategy, seed});
    }

    std::vector<RunOutput> results(queue.size());
    std::vector<std::string> failures(queue.size());
    std::atomic<std::size_t> next{0};
    const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, queue.size()));

    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= queue.size()) return;
            const Job& job = queue[i];
            try {
                results[i] = execute_run(cfg, streams.at(job.seed), *job.strategy, job.seed);
            } catch (const std::exception& e) {
                failures[i] = e.what();
            }
        }
    };
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    bool numeric_failure = false;
    std::vector<RunOutput> completed;
    for (std::size_t i = 0; i < queue.size(); ++i) {
        const Job& job = queue[i];
        const std::string dir =
            cfg.out_dir + "/" + run_dir_name(job.strategy->kind, job.seed);
        if (!failures[i].empty()) {
            log << "run " << run_dir_name(job.strategy->kind, job.seed) << " failed: " << failures[i]
                << "\n";
            numeric_failure = true;
            continue;
        }
        try {
            write_run_outputs(cfg, results[i], streams.at(job.seed), dir);
        } catch (const IoError& e) {
            log << "error: " << e.what() << "\n";
            return kExitIoError;
        }
        if (results[i].artifacts.aborted) {
            log << "run " << run_dir_name(job.strategy->kind, job.seed)
                << " aborted: " << results[i].artifacts.abort_reason << " (partial artifacts kept)\n";
            numeric_failure = true;
            continue;
        }
        log << "run " << run_dir_name(job.strategy->kind, job.seed) << " done: forgetting="
            << fmt_fixed(results[i].metrics.forgetting, 4)
            << " avg_acc=" << fmt_fixed(results[i].metrics.avg_acc, 4) << "\n";
        completed.push_back(results[i]);
    }

    if (!completed.empty()) {
        try {
            write_summary_csv(cfg, completed, cfg.out_dir + "/summary.csv");
            write_summary_table(cfg, completed, cfg.out_dir + "/summary.txt");
        } catch (const IoError& e) {
            log << "error: " << e.what() << "\n";
            return kExitIoError;
        }
    }
    return numeric_failure ? kExitNumericFailure : kExitOk;
}

// ---------------------------------------------------------------------------
// cmd_report
// ---------------------------------------------------------------------------

struct LoadedRun {
    Checkpoint checkpoint;
    std::string dir;
};

inline int cmd_report(const std::string& in_dir, const std::string& out_path,
                      std::ostream& log = std::cout) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(in_dir)) {
        log << "error: " << in_dir << " is not a directory\n";
        return kExitIoError;
    }
    std::vector<LoadedRun> runs;
    std::vector<std::string> dirs;
    for (const auto& entry : fs::directory_iterator(in_dir)) {
        if (entry.is_directory() && fs::exists(entry.path() / "checkpoint.json")) {
            dirs.push_back(entry.path().string());
        }
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& dir : dirs) {
        try {
            runs.push_back({load_checkpoint(dir + "/checkpoint.json"), dir});
        } catch (const std::exception& e) {
            log << "error: " << dir << ": " << e.what() << "\n";
            return kExitIoError;
        }
    }
    if (runs.empty()) {
        log << "error: no completed runs found under " << in_dir << "\n";
        return kExitIoError;
    }

    // Refuse to merge runs built on different model shapes.
    auto model_key = [](const Checkpoint& c) {
        ModelConfig m = c.model_config;
        m.seed = 0;
        std::ostringstream os;
        os << m.d_v << "/" << m.vocab << "/" << m.max_len << "/" << m.d_h << "/" << m.d_e << "/"
           << fmt_full(m.temperature);
        return os.str();
    };
    for (const auto& run : runs) {
        if (model_key(run.checkpoint) != model_key(runs.front().checkpoint)) {
            log << "error: refusing to merge runs with mismatched model configs (" << run.dir
                << ")\n";
            return kExitConfigError;
        }
    }

    // Regenerate missing plot-data files from checkpoints (synthetic streams
    // are rebuilt from their seeds).
    for (const auto& run : runs) {
        const Checkpoint& c = run.checkpoint;
        const bool missing = !fs::exists(run.dir + "/loss_curves.csv") ||
                             !fs::exists(run.dir + "/fisher_hist.csv") ||
                             !fs::exists(run.dir + "/pca.csv") ||
                             !fs::exists(run.dir + "/cosmatrix.csv");
        if (!missing) continue;
        ExperimentConfig cfg;
        cfg.model = c.model_config;
        cfg.stream = c.stream_template;
        cfg.n_tasks = c.n_tasks;
        cfg.train = c.train;
        cfg.resolved["restored"] = "1";
        const TaskStream stream =
            generate_task_stream(c.seed, c.n_tasks, c.stream_template, c.model_config);
        if (!fs::exists(run.dir + "/loss_curves.csv"))
            write_loss_curves_csv(cfg, c.artifacts, stream, run.dir + "/loss_curves.csv");
        if (!fs::exists(run.dir + "/fisher_hist.csv"))
            write_fisher_hist_csv(cfg, c.artifacts, run.dir + "/fisher_hist.csv");
        if (!fs::exists(run.dir + "/pca.csv"))
            write_pca_csv(cfg, c.artifacts, stream, run.dir + "/pca.csv");
        if (!fs::exists(run.dir + "/cosmatrix.csv"))
            write_cosmatrix_csv(cfg, c.artifacts, stream, run.dir + "/cosmatrix.csv");
    }

    // Aggregate metrics per strategy.
    struct Agg {
        std::vector<double> bwt, fwt, forgetting, avg_acc, drift;
        std::vector<std::uint64_t> seeds;
    };
    std::map<std::string, Agg> agg;
    std::vector<std::string> strategy_order;
    std::vector<std::string> violations;
    for (const auto& run : runs) {
        const Checkpoint& c = run.checkpoint;
        if (c.artifacts.aborted || c.artifacts.accuracy.r.size() < 2) continue;
        const std::string name = to_string(c.strategy.kind);
        if (!agg.count(name)) strategy_order.push_back(name);
        Agg& a = agg[name];
        a.bwt.push_back(backward_transfer(c.artifacts.accuracy));
        a.fwt.push_back(forward_transfer(c.artifacts.accuracy));
        a.forgetting.push_back(forgetting_rate(c.artifacts.accuracy));
        a.avg_acc.push_back(average_accuracy(c.artifacts.accuracy));
        a.seeds.push_back(c.seed);
        for (std::size_t idx : c.artifacts.epsilon_violations) {
            violations.push_back(name + " seed " + std::to_string(c.seed) + ": task " +
                                 default_task_id(idx) + " below epsilon");
        }
    }
    if (agg.empty()) {
        log << "error: no completed (non-aborted) runs under " << in_dir << "\n";
        return kExitIoError;
    }

    std::ostringstream rep;
    const Checkpoint& first = runs.front().checkpoint;
    rep << "continual-learning report\n";
    rep << "config hash: " << first.config_hash << "\n";
    rep << "training defaults: epochs=" << first.train.epochs << " batch=" << first.train.batch_size
        << " lr=" << fmt_full(first.train.lr) << " fisher_samples=" << first.train.fisher_samples
        << " probe=" << first.train.probe_size << "\n";
    rep << "runs merged: " << runs.size() << "\n\n";

    auto stats = [](const std::vector<double>& v) {
        double sum = 0.0, lo = 1e300, hi = -1e300;
        for (double x : v) {
            sum += x;
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        const double mean = sum / static_cast<double>(v.size());
        return std::array<double, 3>{mean, lo, hi};
    };
    for (const auto& [metric, getter] :
         std::vector<std::pair<std::string, std::function<const std::vector<double>&(const Agg&)>>>{
             {"backward transfer", [](const Agg& a) -> const std::vector<double>& { return a.bwt; }},
             {"forward transfer", [](const Agg& a) -> const std::vector<double>& { return a.fwt; }},
             {"forgetting rate", [](const Agg& a) -> const std::vector<double>& { return a.forgetting; }},
             {"average accuracy", [](const Agg& a) -> const std::vector<double>& { return a.avg_acc; }}}) {
        rep << metric << " (mean [min, max])\n";
        for (const std::string& name : strategy_order) {
            const auto st = stats(getter(agg[name]));
            rep << "  " << name << ": " << fmt_fixed(st[0], 4) << " [" << fmt_fixed(st[1], 4) << ", "
                << fmt_fixed(st[2], 4) << "]  (" << agg[name].seeds.size() << " seeds)\n";
        }
        rep << "\n";
    }

    rep << "performance-floor violations (final accuracy below epsilon)\n";
    if (violations.empty()) {
        rep << "  none\n";
    } else {
        for (const auto& v : violations) rep << "  " << v << "\n";
    }
    rep << "\nmetric definitions\n";
    rep << "  R[k][i]: retrieval accuracy on task i after finishing task k\n";
    rep << "  BWT  = mean_i<n (R[n][i] - R[i][i])\n";
    rep << "  FWT  = mean_i>1 (R[i-1][i] - b[i]), b = random-init accuracy\n";
    rep << "  F    = mean_i<n (max_k R[k][i] - R[n][i])\n";
    rep << "  AvgAcc = mean_i R[n][i]\n";
    rep << "  retrieval accuracy: within-batch image->text top-1, batch "
        << first.train.eval_batch << ", ties to lower index\n";

    if (out_path.empty()) {
        log << rep.str();
    } else {
        auto out = detail::open_out(out_path);
        out << rep.str();
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// cmd_gradcheck
// ---------------------------------------------------------------------------

namespace detail {

struct GradCheckCase {
    std::string name;
    LossFn fn;
    ParamStore params;
};

inline ParamStore make_store(std::initializer_list<std::pair<std::string, std::vector<std::size_t>>> specs,
                             Rng& rng, double lo = -1.0, double hi = 1.0) {
    ParamStore store;
    for (const auto& [name, shape] : specs) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        std::vector<double> v(n);
        for (double& x : v) x = rng.uniform(lo, hi);
        store.add(name, Tensor::from_values(std::move(v), shape), ParamGroup::visual);
    }
    return store;
}

// Weighted-sum head so every output coordinate carries a distinct gradient.
inline Tensor weighted(const Tensor& t, Rng& rng) {
    std::vector<double> w(t.size());
    for (double& x : w) x = rng.uniform(-1.0, 1.0);
    return sum(mul(t, Tensor::from_values(std::move(w), t.shape())));
}

inline std::vector<GradCheckCase> gradcheck_cases(const std::string& fault_op) {
    std::vector<GradCheckCase> cases;
    auto wrap = [fault_op](const std::string& name, Tensor t) {
        return name == fault_op ? negate_gradient(t) : t;
    };

    Rng seed_rng(0x6772616463686bULL);
    auto add_case = [&](const std::string& name,
                        std::initializer_list<std::pair<std::string, std::vector<std::size_t>>> specs,
                        std::function<Tensor(const ParamStore&, Rng&)> body, double lo = -1.0,
                        double hi = 1.0) {
        Rng param_rng(seed_rng.next_u64());
        GradCheckCase c;
        c.name = name;
        c.params = make_store(specs, param_rng, lo, hi);
        const std::uint64_t weight_seed = seed_rng.next_u64();
        c.fn = [body, weight_seed](const ParamStore& ps) {
            Rng rng(weight_seed);
            return body(ps, rng);
        };
        cases.push_back(std::move(c));
    };

    add_case("add", {{"x", {3, 4}}, {"y", {3, 4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("add", add(ps.value("x"), ps.value("y"))), rng);
    });
    add_case("sub", {{"x", {3, 4}}, {"y", {3, 4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("sub", sub(ps.value("x"), ps.value("y"))), rng);
    });
    add_case("mul", {{"x", {3, 4}}, {"y", {3, 4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("mul", mul(ps.value("x"), ps.value("y"))), rng);
    });
    add_case("div", {{"x", {3, 4}}, {"y", {3, 4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("div", div(ps.value("x"), add(mul(ps.value("y"), ps.value("y")),
                                                           Tensor::scalar(1.0)))), rng);
    });
    add_case("scalar_broadcast", {{"x", {3, 4}}, {"s", {}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("scalar_broadcast", mul(add(ps.value("x"), ps.value("s")), ps.value("s"))), rng);
    });
    add_case("matmul", {{"x", {3, 4}}, {"y", {4, 2}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("matmul", matmul(ps.value("x"), ps.value("y"))), rng);
    });
    add_case("matmul_nt", {{"x", {3, 4}}, {"y", {5, 4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("matmul_nt", matmul_nt(ps.value("x"), ps.value("y"))), rng);
    });
    add_case("transpose", {{"x", {3, 4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("transpose", transpose(ps.value("x"))), rng);
    });
    add_case("diag", {{"x", {4, 4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("diag", diag(ps.value("x"))), rng);
    });
    add_case("add_rows", {{"x", {3, 4}}, {"b", {4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("add_rows", add_rows(ps.value("x"), ps.value("b"))), rng);
    });
    add_case("sum", {{"x", {3, 4}}}, [wrap](const ParamStore& ps, Rng&) {
        return wrap("sum", sum(mul(ps.value("x"), ps.value("x"))));
    });
    add_case("mean", {{"x", {3, 4}}}, [wrap](const ParamStore& ps, Rng&) {
        return wrap("mean", mean(mul(ps.value("x"), ps.value("x"))));
    });
    // relu/abs probed away from their kinks.
    add_case("relu", {{"x", {3, 4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("relu", relu(ps.value("x"))), rng);
    }, 0.1, 1.0);
    add_case("abs", {{"x", {3, 4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("abs", abs_op(ps.value("x"))), rng);
    }, 0.1, 1.0);
    add_case("tanh", {{"x", {3, 4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("tanh", tanh_op(ps.value("x"))), rng);
    });
    add_case("exp", {{"x", {3, 4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("exp", exp_op(ps.value("x"))), rng);
    });
    add_case("log", {{"x", {3, 4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("log", log_op(ps.value("x"))), rng);
    }, 0.5, 2.0);
    add_case("softmax", {{"x", {3, 4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("softmax", softmax(ps.value("x"))), rng);
    });
    add_case("logsumexp", {{"x", {3, 4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("logsumexp", logsumexp(ps.value("x"))), rng);
    });
    add_case("l2_normalize", {{"x", {3, 4}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("l2_normalize", l2_normalize(ps.value("x"))), rng);
    }, 0.3, 1.0);
    add_case("concat", {{"x", {2, 3}}, {"y", {4, 3}}}, [wrap](const ParamStore& ps, Rng& rng) {
        return weighted(wrap("concat", concat(ps.value("x"), ps.value("y"))), rng);
    });
    add_case("embed_mean", {{"table", {6, 3}}}, [wrap](const ParamStore& ps, Rng& rng) {
        const std::vector<std::vector<int>> tokens{{0, 2, 2}, {1, 3, 5}};
        return weighted(wrap("embed_mean", embed_mean(ps.value("table"), tokens)), rng);
    });

    // Loss-level components on a tiny model.
    add_case("contrastive_loss", {{"v", {3, 4}}, {"t", {3, 4}}, {"log_tau", {}}},
             [wrap](const ParamStore& ps, Rng&) {
                 Tensor v = l2_normalize(ps.value("v"));
                 Tensor t = l2_normalize(ps.value("t"));
                 return wrap("contrastive_loss", contrastive_loss(v, t, exp_op(ps.value("log_tau"))));
             }, 0.2, 1.0);

    {
        Rng rng(0x65776331ULL);
        GradCheckCase c;
        c.name = "ewc_penalty";
        c.params = make_store({{"theta", {5}}}, rng);
        ConsolidationRecord rec;
        rec.task_id = "g";
        std::vector<double> anchor(5), fisher(5);
        for (auto& x : anchor) x = rng.uniform(-1.0, 1.0);
        for (auto& x : fisher) x = rng.uniform(0.0, 2.0);
        rec.anchor["theta"] = anchor;
        rec.fisher.values["theta"] = fisher;
        rec.fisher.groups["theta"] = ParamGroup::visual;
        rec.fisher.grouping = FisherGrouping::per_modality;
        rec.lambdas = {{"visual", 0.7}, {"textual", 0.7}, {"cross_modal", 0.7}};
        c.fn = [rec, wrap](const ParamStore& ps) {
            std::map<std::string, Tensor> view{{"theta", ps.value("theta")}};
            return wrap("ewc_penalty", ewc_penalty(view, {rec}));
        };
        cases.push_back(std::move(c));
    }

    {
        ModelConfig mc;
        mc.d_v = 5;
        mc.vocab = 12;
        mc.max_len = 3;
        mc.d_h = 6;
        mc.d_e = 4;
        mc.seed = 11;
        DualEncoder model(mc);
        Rng rng(0x636f6e73ULL);
        std::vector<Pair> probe;
        for (int i = 0; i < 3; ++i) {
            Pair p;
            p.image.resize(mc.d_v);
            for (double& x : p.image) x = rng.uniform(-1.0, 1.0);
            p.caption = {static_cast<int>(rng.uniform_index(mc.vocab)),
                         static_cast<int>(rng.uniform_index(mc.vocab)),
                         static_cast<int>(rng.uniform_index(mc.vocab))};
            p.task_id = "A";
            probe.push_back(std::move(p));
        }
        // Perturb a copy so the snapshot differs from the live model.
        DualEncoder shifted = model;
        {
            std::vector<double> w = shifted.params().value("v.w1").values();
            for (double& x : w) x += 0.05;
            shifted.params().set_value("v.w1", w);
        }
        EncoderSnapshot snap = make_snapshot(shifted, probe, "A");

        GradCheckCase consistency_case;
        consistency_case.name = "consistency_loss";
        consistency_case.params = model.params();
        DualEncoder base_model = model;
        consistency_case.fn = [base_model, snap, wrap](const ParamStore& ps) {
            DualEncoder m = base_model;
            m.params() = ps;
            return wrap("consistency_loss", consistency_loss(m, snap));
        };
        cases.push_back(std::move(consistency_case));

        GradCheckCase combined_case;
        combined_case.name = "combined_loss";
        combined_case.params = model.params();
        ConsolidationRecord rec;
        rec.task_id = "A";
        rec.fisher.grouping = FisherGrouping::per_modality;
        Rng frng(0x66726563ULL);
        for (const auto& [name, p] : model.params()) {
            std::vector<double> anchor = p.value.values();
            for (double& x : anchor) x += frng.uniform(-0.05, 0.05);
            std::vector<double> fisher(p.value.size());
            for (double& x : fisher) x = frng.uniform(0.0, 1.0);
            rec.anchor[name] = anchor;
            rec.fisher.values[name] = fisher;
            rec.fisher.groups[name] = p.group;
        }
        rec.lambdas = {{"visual", 0.4}, {"textual", 0.6}, {"cross_modal", 0.8}};
        std::vector<Pair> batch = probe;
        combined_case.fn = [base_model, snap, rec, batch, wrap](const ParamStore& ps) {
            DualEncoder m = base_model;
            m.params() = ps;
            std::vector<const Pair*> ptrs;
            for (const Pair& p : batch) ptrs.push_back(&p);
            Tensor base = task_loss(m, ptrs);
            return wrap("combined_loss", combined_loss(m, base, {rec}, {snap}, 0.9));
        };
        cases.push_back(std::move(combined_case));
    }

    return cases;
}

}  // namespace detail

// Finite-difference suite over every op and loss; prints the worst relative
// error per component and fails when any exceeds 1e-4. `fault_op` (test
// fixture) negates one component's backward pass to prove the suite catches
// broken rules.
inline int cmd_gradcheck(std::ostream& log = std::cout, const std::string& fault_op = {}) {
    constexpr double kStep = 1e-5;
    constexpr double kTol = 1e-4;
    bool ok = true;
    for (auto& c : detail::gradcheck_cases(fault_op)) {
        GradCheckReport report;
        try {
            report = check_gradient_report(c.fn, c.params, kStep);
        } catch (const std::exception& e) {
            log << c.name << ": error: " << e.what() << "\n";
            ok = false;
            continue;
        }
        const bool pass = report.max_rel_error < kTol;
        log << c.name << ": worst_rel_error=" << fmt_full(report.max_rel_error)
            << (pass ? " PASS" : " FAIL") << "\n";
        if (!pass) ok = false;
    }
    log << (ok ? "gradcheck: PASS" : "gradcheck: FAIL") << "\n";
    return ok ? kExitOk : kExitNumericFailure;
}

}  // namespace modalanchor
