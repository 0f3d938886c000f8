#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "modalanchor/encoder.hpp"
#include "modalanchor/errors.hpp"
#include "modalanchor/rng.hpp"

namespace modalanchor {

struct TaskSpec {
    std::string task_id;
    std::size_t n_train = 2000;
    std::size_t n_eval = 320;
    std::size_t n_concepts = 8;
    double rotation_angle = 0.0;  // cumulative basis rotation applied to this task
    int band_start = 0;           // first token id of this task's vocabulary band
    std::uint64_t seed = 0;
    double epsilon = 0.5;  // per-task performance floor

    void validate() const {
        if (n_train < 1 || n_eval < 1) throw ParameterError("TaskSpec: pair counts must be >= 1");
        if (epsilon < 0.0 || epsilon > 1.0) throw ParameterError("TaskSpec: epsilon must lie in [0,1]");
    }
};

// Knobs for the synthetic generator. Per-task distribution shift = a fresh
// feature-basis rotation by `rotation_angle` plus a `band_shift` move of the
// vocabulary band. Train sizes default to the 4-task 2000/1600/2400/3000
// progression.
struct StreamTemplate {
    std::vector<std::size_t> train_sizes = {2000, 1600, 2400, 3000};
    std::size_t eval_size = 320;
    std::size_t n_concepts = 8;
    std::size_t band_width = 32;
    int base_band_start = 0;
    int band_shift = 32;
    double rotation_angle = 0.7853981633974483;  // π/4 per task step
    double noise_sigma = 0.3;
    double caption_signal = 2.0;  // strength of the distractor-token displacement
    double center_scale = 1.0;
    double epsilon = 0.5;
};

struct TaskData {
    TaskSpec spec;
    std::vector<Pair> train;
    std::vector<Pair> eval;
};

struct TaskStream {
    std::vector<TaskData> tasks;
    StreamTemplate tmpl;
    std::uint64_t seed = 0;
};

namespace detail {

// Orthonormal basis from seeded Gram-Schmidt over gaussian draws.
inline std::vector<double> random_orthonormal_basis(std::size_t d, Rng& rng) {
    std::vector<double> basis(d * d);
    for (std::size_t r = 0; r < d; ++r) {
        double* row = basis.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) row[j] = rng.normal();
        for (std::size_t p = 0; p < r; ++p) {
            const double* prev = basis.data() + p * d;
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += row[j] * prev[j];
            for (std::size_t j = 0; j < d; ++j) row[j] -= dot * prev[j];
        }
        double norm = 0.0;
        for (std::size_t j = 0; j < d; ++j) norm += row[j] * row[j];
        norm = std::sqrt(norm);
        if (norm < 1e-9) {  // degenerate draw; retry the row
            --r;
            continue;
        }
        for (std::size_t j = 0; j < d; ++j) row[j] /= norm;
    }
    return basis;
}

// Rotation by `angle` in every consecutive plane of a random orthonormal
// basis: Q = Bᵀ·blockdiag(R(angle))·B. Zero angle is the exact identity.
inline std::vector<double> random_rotation(std::size_t d, double angle, Rng& rng) {
    std::vector<double> q(d * d, 0.0);
    if (angle == 0.0) {
        for (std::size_t i = 0; i < d; ++i) q[i * d + i] = 1.0;
        return q;
    }
    const std::vector<double> basis = random_orthonormal_basis(d, rng);
    const double c = std::cos(angle), s = std::sin(angle);
    // Start from identity expressed in the random basis, then rotate pairs.
    std::vector<double> rotated(basis);  // rows = rotated basis vectors
    for (std::size_t p = 0; p + 1 < d; p += 2) {
        double* u = rotated.data() + p * d;
        double* v = rotated.data() + (p + 1) * d;
        for (std::size_t j = 0; j < d; ++j) {
            const double uj = u[j], vj = v[j];
            u[j] = c * uj + s * vj;
            v[j] = -s * uj + c * vj;
        }
    }
    // Q = Σ_p rotated_pᵀ · basis_p  (maps basis_p to rotated_p).
    for (std::size_t p = 0; p < d; ++p) {
        const double* bp = basis.data() + p * d;
        const double* rp = rotated.data() + p * d;
        for (std::size_t i = 0; i < d; ++i) {
            double* qrow = q.data() + i * d;
            const double ri = rp[i];
            for (std::size_t j = 0; j < d; ++j) qrow[j] += ri * bp[j];
        }
    }
    return q;
}

inline std::vector<double> mat_vec(const std::vector<double>& m, const std::vector<double>& x) {
    const std::size_t d = x.size();
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        const double* row = m.data() + i * d;
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += row[j] * x[j];
        out[i] = acc;
    }
    return out;
}

inline std::vector<double> mat_mat(const std::vector<double>& a, const std::vector<double>& b,
                                   std::size_t d) {
    std::vector<double> out(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t k = 0; k < d; ++k) {
            const double av = a[i * d + k];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] += av * b[k * d + j];
        }
    return out;
}

inline Pair sample_pair(const TaskSpec& spec, const StreamTemplate& tmpl, const ModelConfig& cfg,
                        const std::vector<double>& rotation, const std::vector<double>& centers,
                        const std::vector<double>& directions, Rng& rng) {
    Pair pair;
    pair.task_id = spec.task_id;

    const std::size_t concept_idx = rng.uniform_index(spec.n_concepts);
    pair.caption.resize(cfg.max_len);
    pair.caption[0] = spec.band_start + static_cast<int>(concept_idx);
    const std::size_t pool = tmpl.band_width - spec.n_concepts;
    for (std::size_t j = 1; j < cfg.max_len; ++j) {
        pair.caption[j] =
            spec.band_start + static_cast<int>(spec.n_concepts + rng.uniform_index(pool));
    }

    // Image = rotated (concept center + scaled mean of distractor-token
    // directions) + isotropic noise; the caption therefore determines the
    // image up to noise, which is what makes within-concept retrieval
    // possible.
    std::vector<double> u(cfg.d_v);
    const double* center = centers.data() + concept_idx * cfg.d_v;
    for (std::size_t j = 0; j < cfg.d_v; ++j) u[j] = center[j];
    const double gamma =
        tmpl.caption_signal / std::sqrt(static_cast<double>(cfg.max_len > 1 ? cfg.max_len - 1 : 1));
    for (std::size_t t = 1; t < cfg.max_len; ++t) {
        const double* dir = directions.data() + static_cast<std::size_t>(pair.caption[t]) * cfg.d_v;
        for (std::size_t j = 0; j < cfg.d_v; ++j) u[j] += gamma * dir[j];
    }
    pair.image = mat_vec(rotation, u);
    for (std::size_t j = 0; j < cfg.d_v; ++j) pair.image[j] += tmpl.noise_sigma * rng.normal();
    return pair;
}

}  // namespace detail

inline std::string default_task_id(std::size_t index) {
    std::string id;
    id += static_cast<char>('A' + index % 26);
    if (index >= 26) id += std::to_string(index / 26);
    return id;
}

// Deterministic synthetic stream: concept centers and a token->direction
// dictionary are drawn once from the stream seed; each successive task
// rotates the feature basis and shifts the vocabulary band.
inline TaskStream generate_task_stream(std::uint64_t seed, std::size_t n_tasks,
                                       const StreamTemplate& tmpl, const ModelConfig& cfg) {
    if (n_tasks < 2) throw ParameterError("generate_task_stream: n_tasks must be >= 2");
    if (tmpl.n_concepts > tmpl.band_width) {
        throw ParameterError("generate_task_stream: n_concepts " + std::to_string(tmpl.n_concepts) +
                             " exceeds vocabulary band width " + std::to_string(tmpl.band_width));
    }
    if (tmpl.n_concepts == tmpl.band_width) {
        throw ParameterError("generate_task_stream: band leaves no distractor tokens");
    }
    const long last_band_end = static_cast<long>(tmpl.base_band_start) +
                               static_cast<long>(n_tasks - 1) * tmpl.band_shift +
                               static_cast<long>(tmpl.band_width);
    if (tmpl.base_band_start < 0 || last_band_end > static_cast<long>(cfg.vocab)) {
        throw ParameterError("generate_task_stream: token bands exceed vocabulary size " +
                             std::to_string(cfg.vocab));
    }
    if (cfg.max_len < 2) {
        throw ParameterError("generate_task_stream: max_len must be >= 2 for concept+distractors");
    }

    TaskStream stream;
    stream.tmpl = tmpl;
    stream.seed = seed;

    Rng shared_rng(derive_seed({seed, 0x73747265616dULL}));
    std::vector<double> centers(tmpl.n_concepts * cfg.d_v);
    for (double& x : centers) x = tmpl.center_scale * shared_rng.normal();
    std::vector<double> directions(cfg.vocab * cfg.d_v);
    const double dir_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_v));
    for (double& x : directions) x = dir_scale * shared_rng.normal();

    std::vector<double> rotation(cfg.d_v * cfg.d_v, 0.0);
    for (std::size_t i = 0; i < cfg.d_v; ++i) rotation[i * cfg.d_v + i] = 1.0;

    for (std::size_t k = 0; k < n_tasks; ++k) {
        if (k > 0 && tmpl.rotation_angle != 0.0) {
            Rng rot_rng(derive_seed({seed, 0x726f74ULL, k}));
            rotation = detail::mat_mat(
                detail::random_rotation(cfg.d_v, tmpl.rotation_angle, rot_rng), rotation, cfg.d_v);
        }
        TaskData task;
        task.spec.task_id = default_task_id(k);
        task.spec.n_train = k < tmpl.train_sizes.size() ? tmpl.train_sizes[k] : tmpl.train_sizes.back();
        task.spec.n_eval = tmpl.eval_size;
        task.spec.n_concepts = tmpl.n_concepts;
        task.spec.rotation_angle = tmpl.rotation_angle * static_cast<double>(k);
        task.spec.band_start = tmpl.base_band_start + static_cast<int>(k) * tmpl.band_shift;
        task.spec.seed = derive_seed({seed, 0x7461736bULL, k});
        task.spec.epsilon = tmpl.epsilon;
        task.spec.validate();

        Rng train_rng(derive_seed({task.spec.seed, 0x747261696eULL}));
        task.train.reserve(task.spec.n_train);
        for (std::size_t i = 0; i < task.spec.n_train; ++i) {
            task.train.push_back(
                detail::sample_pair(task.spec, tmpl, cfg, rotation, centers, directions, train_rng));
        }
        Rng eval_rng(derive_seed({task.spec.seed, 0x6576616cULL}));
        task.eval.reserve(task.spec.n_eval);
        for (std::size_t i = 0; i < task.spec.n_eval; ++i) {
            task.eval.push_back(
                detail::sample_pair(task.spec, tmpl, cfg, rotation, centers, directions, eval_rng));
        }
        stream.tasks.push_back(std::move(task));
    }
    return stream;
}

// ---------------------------------------------------------------------------
// Pair file I/O — JSON Lines, one {"task", "image", "caption"} object per
// line; captions shorter than max_len are padded with token 0 on load.
// ---------------------------------------------------------------------------

inline void save_pairs(const std::vector<Pair>& pairs, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("save_pairs: cannot open " + path);
    for (const Pair& p : pairs) {
        nlohmann::ordered_json j;
        j["task"] = p.task_id;
        j["image"] = p.image;
        j["caption"] = p.caption;
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("save_pairs: write failed for " + path);
}

inline std::vector<Pair> load_pairs(const std::string& path, const ModelConfig& cfg) {
    std::ifstream in(path);
    if (!in) throw IoError("load_pairs: cannot open " + path);
    std::vector<Pair> pairs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("load_pairs: " + path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (!j.is_object() || !j.contains("task") || !j.contains("image") || !j.contains("caption")) {
            throw ParseError("load_pairs: " + path + ":" + std::to_string(lineno) +
                             ": expected object with task/image/caption");
        }
        Pair p;
        try {
            p.task_id = j.at("task").get<std::string>();
            p.image = j.at("image").get<std::vector<double>>();
            p.caption = j.at("caption").get<std::vector<int>>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("load_pairs: " + path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (p.image.size() != cfg.d_v) {
            throw ValidationError("load_pairs: " + path + ":" + std::to_string(lineno) +
                                  ": image length " + std::to_string(p.image.size()) + " != d_v " +
                                  std::to_string(cfg.d_v));
        }
        if (p.caption.size() > cfg.max_len) {
            throw ValidationError("load_pairs: " + path + ":" + std::to_string(lineno) +
                                  ": caption length " + std::to_string(p.caption.size()) +
                                  " exceeds max_len " + std::to_string(cfg.max_len));
        }
        for (int t : p.caption) {
            if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab) {
                throw ValidationError("load_pairs: " + path + ":" + std::to_string(lineno) +
                                      ": token " + std::to_string(t) + " out of vocabulary " +
                                      std::to_string(cfg.vocab));
            }
        }
        p.caption.resize(cfg.max_len, 0);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

inline void write_stream_manifest(const TaskStream& stream, const std::string& path) {
    nlohmann::ordered_json j;
    j["seed"] = stream.seed;
    j["template"] = {
        {"train_sizes", stream.tmpl.train_sizes},
        {"eval_size", stream.tmpl.eval_size},
        {"n_concepts", stream.tmpl.n_concepts},
        {"band_width", stream.tmpl.band_width},
        {"base_band_start", stream.tmpl.base_band_start},
        {"band_shift", stream.tmpl.band_shift},
        {"rotation_angle", stream.tmpl.rotation_angle},
        {"noise_sigma", stream.tmpl.noise_sigma},
        {"caption_signal", stream.tmpl.caption_signal},
        {"center_scale", stream.tmpl.center_scale},
        {"epsilon", stream.tmpl.epsilon},
    };
    j["tasks"] = nlohmann::ordered_json::array();
    for (const TaskData& t : stream.tasks) {
        j["tasks"].push_back({{"task_id", t.spec.task_id},
                              {"n_train", t.spec.n_train},
                              {"n_eval", t.spec.n_eval},
                              {"n_concepts", t.spec.n_concepts},
                              {"rotation_angle", t.spec.rotation_angle},
                              {"band_start", t.spec.band_start},
                              {"seed", t.spec.seed},
                              {"epsilon", t.spec.epsilon}});
    }
    std::ofstream out(path);
    if (!out) throw IoError("write_stream_manifest: cannot open " + path);
    out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Replay buffer — 10% of each completed task, chosen by greedy k-center
// (farthest-first) on image features.
// ---------------------------------------------------------------------------

struct ReplayBuffer {
    double capacity_fraction = 0.10;
    std::vector<Pair> items;
    std::map<std::string, std::size_t> per_task_counts;
    std::uint64_t selection_seed = 0;

    bool empty() const { return items.empty(); }
    std::size_t size() const { return items.size(); }
};

namespace detail {

inline double sq_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

// Farthest-first traversal; starts from index 0 so selection is a pure
// function of input order. Ties resolve to the lower index.
inline std::vector<std::size_t> greedy_k_center(const std::vector<Pair>& pool, std::size_t k) {
    std::vector<std::size_t> picked;
    if (pool.empty() || k == 0) return picked;
    k = std::min(k, pool.size());
    picked.reserve(k);
    picked.push_back(0);
    std::vector<double> min_dist(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
        min_dist[i] = sq_distance(pool[i].image, pool[0].image);
    }
    while (picked.size() < k) {
        std::size_t best = 0;
        double best_d = -1.0;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            if (min_dist[i] > best_d) {
                best_d = min_dist[i];
                best = i;
            }
        }
        picked.push_back(best);
        for (std::size_t i = 0; i < pool.size(); ++i) {
            min_dist[i] = std::min(min_dist[i], sq_distance(pool[i].image, pool[best].image));
        }
    }
    return picked;
}

}  // namespace detail

// Stores ⌈fraction·n⌉ pairs of the completed task, chosen for diversity by
// greedy k-center on image features.
inline void update_buffer(ReplayBuffer& buffer, const std::vector<Pair>& task_data) {
    if (task_data.empty()) throw ParameterError("update_buffer: task data must be nonempty");
    const std::size_t quota = static_cast<std::size_t>(
        std::ceil(buffer.capacity_fraction * static_cast<double>(task_data.size())));
    const auto picked = detail::greedy_k_center(task_data, quota);
    for (std::size_t idx : picked) {
        buffer.items.push_back(task_data[idx]);
        buffer.per_task_counts[task_data[idx].task_id]++;
    }
}

// ⌊ratio·B⌋ uniform draws from the buffer followed by current-task pairs.
// An empty buffer falls back to the pure current batch (task 1).
inline std::vector<const Pair*> mix_batches(const std::vector<const Pair*>& current,
                                            const ReplayBuffer& buffer, double ratio, Rng& rng) {
    if (ratio < 0.0 || ratio > 1.0) throw ParameterError("mix_batches: ratio must lie in [0,1]");
    const std::size_t n_replay =
        static_cast<std::size_t>(std::floor(ratio * static_cast<double>(current.size())));
    if (n_replay == 0 || buffer.empty()) return current;
    std::vector<const Pair*> mixed;
    mixed.reserve(current.size());
    for (std::size_t i = 0; i < n_replay; ++i) {
        mixed.push_back(&buffer.items[rng.uniform_index(buffer.items.size())]);
    }
    for (std::size_t i = 0; i + n_replay < current.size(); ++i) mixed.push_back(current[i]);
    return mixed;
}

}  // namespace modalanchor
