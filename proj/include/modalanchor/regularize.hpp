#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "modalanchor/encoder.hpp"
#include "modalanchor/errors.hpp"
#include "modalanchor/params.hpp"
#include "modalanchor/tensor.hpp"

namespace modalanchor {

enum class FisherGrouping { per_modality, whole_model };

inline const char* to_string(FisherGrouping g) {
    return g == FisherGrouping::per_modality ? "per_modality" : "whole_model";
}

// Diagonal empirical Fisher: per-parameter mean of squared task-loss
// gradients over sampled draws. Parameter groups come from the store the
// estimate was taken on.
struct FisherEstimate {
    std::map<std::string, std::vector<double>> values;
    std::map<std::string, ParamGroup> groups;
    FisherGrouping grouping = FisherGrouping::per_modality;
    std::size_t sample_count = 0;

    double group_mean(ParamGroup g) const {
        double acc = 0.0;
        std::size_t n = 0;
        for (const auto& [name, v] : values) {
            if (groups.at(name) != g) continue;
            for (double x : v) acc += x;
            n += v.size();
        }
        return n ? acc / static_cast<double>(n) : 0.0;
    }

    double overall_mean() const {
        double acc = 0.0;
        std::size_t n = 0;
        for (const auto& [name, v] : values) {
            for (double x : v) acc += x;
            n += v.size();
        }
        return n ? acc / static_cast<double>(n) : 0.0;
    }
};

// One completed task's protection state: anchor weights, Fisher, per-group
// penalty strengths.
struct ConsolidationRecord {
    std::map<std::string, std::vector<double>> anchor;  // θ*
    FisherEstimate fisher;
    std::map<std::string, double> lambdas;  // group name -> λ ("all" when whole_model)
    std::string task_id;

    double lambda_for(ParamGroup g) const {
        if (fisher.grouping == FisherGrouping::whole_model) return lambdas.at("all");
        return lambdas.at(to_string(g));
    }
};

// Frozen previous-task encoders plus the fixed probe batch; the probe's
// similarity matrix under the frozen encoders is precomputed once. The
// prebuilt probe tensors keep a stable identity so the current model's
// frozen-stage caches hold across training steps.
struct EncoderSnapshot {
    DualEncoder frozen;
    std::vector<Pair> probe;
    std::vector<double> sim_old;  // probe N×N, row-major
    std::string task_id;
    Tensor probe_images;
    std::shared_ptr<const std::vector<std::vector<int>>> probe_tokens;
};

inline void build_probe_tensors(EncoderSnapshot& snap, const ModelConfig& cfg) {
    std::vector<double> flat;
    flat.reserve(snap.probe.size() * cfg.d_v);
    auto tokens = std::make_shared<std::vector<std::vector<int>>>();
    tokens->reserve(snap.probe.size());
    for (const Pair& p : snap.probe) {
        flat.insert(flat.end(), p.image.begin(), p.image.end());
        tokens->push_back(p.caption);
    }
    snap.probe_images = Tensor::from_values(std::move(flat), {snap.probe.size(), cfg.d_v});
    snap.probe_tokens = std::move(tokens);
}

inline EncoderSnapshot make_snapshot(const DualEncoder& model, std::vector<Pair> probe,
                                     std::string task_id) {
    if (probe.empty()) throw ParameterError("make_snapshot: probe batch must be nonempty");
    EncoderSnapshot snap;
    snap.frozen = model.frozen_copy();
    snap.probe = std::move(probe);
    snap.task_id = std::move(task_id);
    build_probe_tensors(snap, model.config());
    Tensor s = similarity_matrix(snap.frozen.embed_visual(snap.probe_images),
                                 snap.frozen.embed_text(snap.probe_tokens));
    snap.sim_old = s.values();
    return snap;
}

// ---------------------------------------------------------------------------
// Fisher estimation
// ---------------------------------------------------------------------------

// Generic core: `sample_loss(params, k)` evaluates the task loss on draw k.
// F[p] = (1/n) Σ_k (∂L_k/∂p)². Parameters that receive no gradient
// contribute zeros.
inline FisherEstimate estimate_fisher(
    const std::function<Tensor(const ParamStore&, std::size_t)>& sample_loss,
    const ParamStore& params, std::size_t n_samples) {
    if (n_samples < 1) throw ParameterError("estimate_fisher: n_samples must be >= 1");

    FisherEstimate est;
    est.sample_count = n_samples;
    for (const auto& [name, p] : params) {
        est.values.emplace(name, std::vector<double>(p.value.size(), 0.0));
        est.groups.emplace(name, p.group);
    }
    for (std::size_t k = 0; k < n_samples; ++k) {
        Tensor loss = sample_loss(params, k);
        if (!std::isfinite(loss.scalar_value())) {
            throw NumericError("estimate_fisher: non-finite loss at sample " + std::to_string(k));
        }
        GradientMap grads = backward(loss);
        for (auto& [name, acc] : est.values) {
            auto git = grads.find(name);
            if (git == grads.end()) continue;
            const auto& g = git->second.values();
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i] * g[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(n_samples);
    for (auto& [name, acc] : est.values)
        for (double& x : acc) x *= inv;
    return est;
}

// Model-level Fisher: each draw is a micro-batch of pairs and the draw loss
// is the contrastive task loss on it. The contrastive objective is defined
// only relative to in-batch negatives, so draws are micro-batches rather
// than single pairs (a one-pair batch has identically zero loss).
inline FisherEstimate estimate_fisher(DualEncoder& model,
                                      const std::vector<std::vector<const Pair*>>& draws,
                                      FisherGrouping grouping) {
    if (draws.empty()) throw ParameterError("estimate_fisher: empty data source");
    for (const auto& d : draws) {
        if (d.empty()) throw ParameterError("estimate_fisher: empty draw");
    }
    auto loss_fn = [&model, &draws](const ParamStore&, std::size_t k) {
        return task_loss(model, draws[k]);
    };
    FisherEstimate est = estimate_fisher(loss_fn, model.params(), draws.size());
    est.grouping = grouping;
    return est;
}

// λ_g = λ_base · 3 · m_g / (m_v + m_t + m_c) with m_g the mean Fisher value
// of group g; all-zero means fall back to λ_base everywhere.
struct GroupLambdas {
    double visual = 0.0;
    double textual = 0.0;
    double cross_modal = 0.0;

    double for_group(ParamGroup g) const {
        switch (g) {
            case ParamGroup::visual: return visual;
            case ParamGroup::textual: return textual;
            case ParamGroup::cross_modal: return cross_modal;
        }
        return 0.0;
    }
};

inline GroupLambdas adaptive_lambdas(const FisherEstimate& fisher, double lambda_base) {
    if (lambda_base <= 0.0) throw ParameterError("adaptive_lambdas: lambda_base must be > 0");
    const double mv = fisher.group_mean(ParamGroup::visual);
    const double mt = fisher.group_mean(ParamGroup::textual);
    const double mc = fisher.group_mean(ParamGroup::cross_modal);
    const double total = mv + mt + mc;
    if (total == 0.0) return {lambda_base, lambda_base, lambda_base};
    const double k = lambda_base * 3.0 / total;
    return {k * mv, k * mt, k * mc};
}

// ---------------------------------------------------------------------------
// Penalties
// ---------------------------------------------------------------------------

// Fused λ·Σ_i w_i (θ_i − a_i)² as a single graph node; backward adds
// 2λ·w⊙(θ−a)·g. The anchor and weight arrays are captured by pointer: they
// must outlive the loss graph (records always do; the graph dies at the end
// of the step).
inline Tensor quadratic_anchor_penalty(const Tensor& theta, const std::vector<double>& anchor,
                                       const std::vector<double>& weights, double lambda) {
    if (anchor.size() != theta.size() || weights.size() != theta.size()) {
        throw ContractError("quadratic_anchor_penalty: shape mismatch");
    }
    double acc = 0.0;
    const auto& tv = theta.values();
    const double* a = anchor.data();
    const double* w = weights.data();
    for (std::size_t i = 0; i < tv.size(); ++i) {
        const double d = tv[i] - a[i];
        acc += w[i] * d * d;
    }
    return make_op_node({}, {lambda * acc}, {theta},
        [a, w, lambda](const detail::Node& self) {
            detail::Node& p = *self.parents[0];
            if (!p.requires_grad) return;
            detail::ensure_grad(p);
            const double g = self.grad[0];
            for (std::size_t i = 0; i < p.values.size(); ++i) {
                p.grad[i] += g * 2.0 * lambda * w[i] * (p.values[i] - a[i]);
            }
        });
}

// Fused (1/N²)·Σ_ij |Zv·Ztᵀ − S_old| over unit embedding rows; one node in
// place of the matmul/sub/abs/mean chain. S_old is captured by pointer and
// must outlive the loss graph.
inline Tensor mean_abs_similarity_gap(const Tensor& zv, const Tensor& zt,
                                      const std::vector<double>& s_old) {
    if (zv.rank() != 2 || zt.rank() != 2 || zv.cols() != zt.cols()) {
        throw ShapeError("mean_abs_similarity_gap: embedding shapes " + shape_string(zv.shape()) +
                         " and " + shape_string(zt.shape()) + " do not conform");
    }
    const std::size_t n = zv.rows(), m = zt.rows(), d = zv.cols();
    if (s_old.size() != n * m) {
        throw ContractError("mean_abs_similarity_gap: reference matrix size mismatch");
    }
    const double inv = 1.0 / static_cast<double>(n * m);
    const double* old_p = s_old.data();

    // Forward pass also fixes the subgradient signs for backward.
    auto signs = std::make_shared<std::vector<double>>(n * m);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* vi = zv.values().data() + i * d;
        for (std::size_t j = 0; j < m; ++j) {
            const double* tj = zt.values().data() + j * d;
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += vi[k] * tj[k];
            const double diff = s - old_p[i * m + j];
            acc += std::fabs(diff);
            (*signs)[i * m + j] = diff > 0.0 ? inv : (diff < 0.0 ? -inv : 0.0);
        }
    }
    return make_op_node({}, {acc * inv}, {zv, zt},
        [signs, n, m, d](const detail::Node& self) {
            detail::Node& pv = *self.parents[0];
            detail::Node& pt = *self.parents[1];
            const double g = self.grad[0];
            const double* w = signs->data();
            if (pv.requires_grad) {  // dZv += g · W · Zt
                detail::ensure_grad(pv);
                for (std::size_t i = 0; i < n; ++i) {
                    double* dst = pv.grad.data() + i * d;
                    for (std::size_t j = 0; j < m; ++j) {
                        const double wij = g * w[i * m + j];
                        if (wij == 0.0) continue;
                        const double* tj = pt.values.data() + j * d;
                        for (std::size_t k = 0; k < d; ++k) dst[k] += wij * tj[k];
                    }
                }
            }
            if (pt.requires_grad) {  // dZt += g · Wᵀ · Zv
                detail::ensure_grad(pt);
                for (std::size_t i = 0; i < n; ++i) {
                    const double* vi = pv.values.data() + i * d;
                    for (std::size_t j = 0; j < m; ++j) {
                        const double wij = g * w[i * m + j];
                        if (wij == 0.0) continue;
                        double* dst = pt.grad.data() + j * d;
                        for (std::size_t k = 0; k < d; ++k) dst[k] += wij * vi[k];
                    }
                }
            }
        });
}

// Σ_records Σ_groups λ_g Σ_i F_i (θ_i − θ*_i)², differentiable w.r.t. the
// supplied parameter view (pass effective weights when adapters are active).
inline Tensor ewc_penalty(const std::map<std::string, Tensor>& params,
                          const std::vector<ConsolidationRecord>& records) {
    Tensor total = Tensor::scalar(0.0);
    for (const ConsolidationRecord& rec : records) {
        for (const auto& [name, theta] : params) {
            auto ait = rec.anchor.find(name);
            auto fit = rec.fisher.values.find(name);
            if (ait == rec.anchor.end() || fit == rec.fisher.values.end()) {
                throw ContractError("ewc_penalty: record for task " + rec.task_id +
                                    " is missing parameter " + name);
            }
            if (ait->second.size() != theta.size() || fit->second.size() != theta.size()) {
                throw ContractError("ewc_penalty: shape mismatch for " + name + " in task " +
                                    rec.task_id);
            }
            const double lambda = rec.lambda_for(rec.fisher.groups.at(name));
            if (lambda == 0.0) continue;
            total = add(total, quadratic_anchor_penalty(theta, ait->second, fit->second, lambda));
        }
    }
    return total;
}

// EWC split into a per-task constant (terms whose parameters cannot move
// while the current freeze mask holds) and the differentiable remainder.
// Summing both parts reproduces ewc_penalty exactly. Record pointers stay
// valid only while the caller's record vector is untouched, i.e. within one
// task.
struct SplitEwc {
    double constant = 0.0;
    std::vector<std::tuple<std::string, const ConsolidationRecord*, double>> live;  // name, record, λ

    bool empty() const { return constant == 0.0 && live.empty(); }
};

inline SplitEwc split_ewc_terms(const DualEncoder& model,
                                const std::vector<ConsolidationRecord>& records) {
    SplitEwc split;
    const auto view = model.effective_parameters();
    for (const ConsolidationRecord& rec : records) {
        for (const auto& [name, theta] : view) {
            auto ait = rec.anchor.find(name);
            auto fit = rec.fisher.values.find(name);
            if (ait == rec.anchor.end() || fit == rec.fisher.values.end()) {
                throw ContractError("ewc_penalty: record for task " + rec.task_id +
                                    " is missing parameter " + name);
            }
            const double lambda = rec.lambda_for(rec.fisher.groups.at(name));
            if (lambda == 0.0) continue;
            if (theta.requires_grad()) {
                split.live.emplace_back(name, &rec, lambda);
            } else {
                const auto& tv = theta.values();
                const auto& a = ait->second;
                const auto& w = fit->second;
                if (a.size() != tv.size() || w.size() != tv.size()) {
                    throw ContractError("ewc_penalty: shape mismatch for " + name + " in task " +
                                        rec.task_id);
                }
                double acc = 0.0;
                for (std::size_t i = 0; i < tv.size(); ++i) {
                    const double d = tv[i] - a[i];
                    acc += w[i] * d * d;
                }
                split.constant += lambda * acc;
            }
        }
    }
    return split;
}

inline Tensor ewc_live_penalty(const DualEncoder& model, const SplitEwc& split) {
    Tensor total = Tensor::scalar(split.constant);
    std::map<std::string, Tensor> effective;  // one materialization per host
    for (const auto& [name, rec, lambda] : split.live) {
        auto it = effective.find(name);
        if (it == effective.end()) {
            it = effective.emplace(name, model.effective_weight(name)).first;
        }
        total = add(total, quadratic_anchor_penalty(it->second, rec->anchor.at(name),
                                                    rec->fisher.values.at(name), lambda));
    }
    return total;
}

// Mean absolute change of the probe similarity matrix relative to the
// snapshot encoders: (1/N²) Σ_{i,j} |S_cur[i,j] − S_old[i,j]|.
inline Tensor consistency_loss(const DualEncoder& current, const EncoderSnapshot& snapshot) {
    if (snapshot.probe.empty()) throw ParameterError("consistency_loss: empty probe batch");
    if (current.config().d_e != snapshot.frozen.config().d_e) {
        throw ContractError("consistency_loss: embedding dim mismatch: current d_e " +
                            std::to_string(current.config().d_e) + " vs snapshot d_e " +
                            std::to_string(snapshot.frozen.config().d_e));
    }
    Tensor zv, zt;
    if (snapshot.probe_images.defined() && snapshot.probe_tokens) {
        zv = current.embed_visual(snapshot.probe_images);
        zt = current.embed_text(snapshot.probe_tokens);
    } else {
        std::vector<const Pair*> batch;
        batch.reserve(snapshot.probe.size());
        for (const Pair& p : snapshot.probe) batch.push_back(&p);
        zv = current.embed_visual(batch);
        zt = current.embed_text(batch);
    }
    return mean_abs_similarity_gap(zv, zt, snapshot.sim_old);
}

// L_task + EWC penalty + β · mean snapshot consistency. With no history the
// task loss is returned unchanged.
inline Tensor combined_loss(const DualEncoder& model, const Tensor& task_loss_value,
                            const std::vector<ConsolidationRecord>& records,
                            const std::vector<EncoderSnapshot>& snapshots, double beta) {
    if (beta < 0.0) throw ParameterError("combined_loss: beta must be >= 0");
    if (records.empty() && (snapshots.empty() || beta == 0.0)) return task_loss_value;
    Tensor total = task_loss_value;
    if (!records.empty()) {
        total = add(total, ewc_penalty(model.effective_parameters(), records));
    }
    if (beta > 0.0 && !snapshots.empty()) {
        Tensor acc = consistency_loss(model, snapshots[0]);
        for (std::size_t i = 1; i < snapshots.size(); ++i) {
            acc = add(acc, consistency_loss(model, snapshots[i]));
        }
        total = add(total, scale(acc, beta / static_cast<double>(snapshots.size())));
    }
    return total;
}

}  // namespace modalanchor
