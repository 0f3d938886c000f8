#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "modalanchor/errors.hpp"
#include "modalanchor/params.hpp"
#include "modalanchor/rng.hpp"
#include "modalanchor/tensor.hpp"

namespace modalanchor {

struct ModelConfig {
    std::size_t d_v = 64;      // visual feature dim
    std::size_t vocab = 256;   // text vocabulary size
    std::size_t max_len = 16;  // caption length
    std::size_t d_h = 64;      // hidden dim
    std::size_t d_e = 32;      // shared embedding dim
    double temperature = 0.07;
    std::uint64_t seed = 0;

    void validate() const {
        if (d_v < 1 || vocab < 1 || max_len < 1 || d_h < 1 || d_e < 1) {
            throw ParameterError("ModelConfig: all dimensions must be >= 1");
        }
        if (temperature <= 0.0) throw ParameterError("ModelConfig: temperature must be > 0");
    }
};

struct Pair {
    std::vector<double> image;  // length d_v
    std::vector<int> caption;   // token ids, length <= max_len
    std::string task_id;
};

// Record of one low-rank adapter on a host weight matrix. The A/B tensors
// live in the parameter store under host-derived names; effective weight is
// W_host + (alpha/rank)·B·A.
struct AdapterAttachment {
    std::string host;
    std::string a_name;  // rank × cols
    std::string b_name;  // rows × rank
    std::size_t rank = 0;
    double scale = 1.0;
    bool host_was_trainable = true;
};

inline constexpr double kMinTemperature = 0.01;
inline constexpr double kMaxTemperature = 1.0;

// Two-stream encoder projecting images and captions into a shared unit
// sphere. Visual side: two tanh layers. Text side: embedding table,
// positional mean-pool, one tanh layer. Cross-modal head: one projection per
// stream plus a learnable log-temperature.
class DualEncoder {
public:
    DualEncoder() = default;

    explicit DualEncoder(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed({cfg.seed, 0x6d6f64656cULL}));
        init_matrix(rng, "v.w1", cfg.d_v, cfg.d_h, ParamGroup::visual);
        init_vector(rng, "v.b1", cfg.d_h, cfg.d_v, ParamGroup::visual);
        init_matrix(rng, "v.w2", cfg.d_h, cfg.d_h, ParamGroup::visual);
        init_vector(rng, "v.b2", cfg.d_h, cfg.d_h, ParamGroup::visual);
        init_matrix(rng, "t.embed", cfg.vocab, cfg.d_h, ParamGroup::textual, cfg.d_h);
        init_matrix(rng, "t.w1", cfg.d_h, cfg.d_h, ParamGroup::textual);
        init_vector(rng, "t.b1", cfg.d_h, cfg.d_h, ParamGroup::textual);
        init_matrix(rng, "c.proj_v", cfg.d_h, cfg.d_e, ParamGroup::cross_modal);
        init_matrix(rng, "c.proj_t", cfg.d_h, cfg.d_e, ParamGroup::cross_modal);
        params_.add("c.log_temp", Tensor::from_values({std::log(cfg.temperature)}, {}),
                    ParamGroup::cross_modal);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    bool has_adapters() const { return !adapters_.empty(); }
    const std::map<std::string, AdapterAttachment>& adapters() const { return adapters_; }

    // Host matrix plus its low-rank update when an adapter is attached.
    Tensor effective_weight(const std::string& name) const {
        const Tensor& base = params_.value(name);
        auto it = adapters_.find(name);
        if (it == adapters_.end()) return base;
        const AdapterAttachment& att = it->second;
        Tensor delta = matmul(params_.value(att.b_name), params_.value(att.a_name));
        return add(base, scale(delta, att.scale / static_cast<double>(att.rank)));
    }

    // x @ W_eff (+ bias, + tanh when requested). Frozen stages over constant
    // inputs are memoized: an unadapted frozen stage returns the same cached
    // tensor every step, and an adapted frozen host factors into a cached
    // (x@W + b) plus the live low-rank branch (α/r)·(x@B)@A. Training steps
    // over a fixed probe batch then pay only for the adapter branches.
    Tensor affine(const Tensor& x, const std::string& host, const std::string& bias = {},
                  bool apply_tanh = false) const {
        auto it = adapters_.find(host);
        const ParamInfo& host_info = params_.info(host);
        const bool bias_frozen = bias.empty() || !params_.info(bias).trainable;
        const bool foldable = !host_info.trainable && bias_frozen && !x.requires_grad();
        const Tensor bias_t = bias.empty() ? Tensor() : params_.value(bias);

        if (foldable) {
            const StageKey key{x.node(), host_info.value.node(),
                               bias.empty() ? nullptr : bias_t.node(),
                               it == adapters_.end() && apply_tanh};
            Tensor base_out;
            auto cit = stage_cache_.find(key);
            if (cit != stage_cache_.end()) {
                base_out = cit->second;
            } else {
                base_out = matmul(x, host_info.value);
                if (!bias.empty()) base_out = add_rows(base_out, bias_t);
                if (it == adapters_.end() && apply_tanh) base_out = tanh_op(base_out);
                stage_cache_.emplace(key, base_out);
            }
            if (it == adapters_.end()) {
                return base_out;  // tanh already folded in when requested
            }
            const AdapterAttachment& att = it->second;
            Tensor low_rank = matmul(matmul(x, params_.value(att.b_name)), params_.value(att.a_name));
            Tensor out = add(base_out, scale(low_rank, att.scale / static_cast<double>(att.rank)));
            return apply_tanh ? tanh_op(out) : out;
        }

        Tensor out = matmul(x, effective_weight(host));
        if (!bias.empty()) out = add_rows(out, bias_t);
        return apply_tanh ? tanh_op(out) : out;
    }

    // Mean-pooled embedding lookup, memoized for stable caption batches while
    // the table is frozen.
    Tensor pooled_text(const std::shared_ptr<const std::vector<std::vector<int>>>& captions) const {
        const Tensor& table = params_.value("t.embed");
        if (!table.requires_grad()) {
            const PooledKey key{captions, table.node()};
            auto cit = pooled_cache_.find(key);
            if (cit != pooled_cache_.end()) return cit->second;
            Tensor pooled = embed_mean(table, *captions);
            pooled_cache_.emplace(key, pooled);
            return pooled;
        }
        return embed_mean(table, *captions);
    }

    void clear_stage_caches() const {
        stage_cache_.clear();
        pooled_cache_.clear();
    }

    // Every parameter by name, with adapted matrices replaced by their
    // effective (graph-linked) weights. This is the view EWC penalizes.
    std::map<std::string, Tensor> effective_parameters() const {
        std::map<std::string, Tensor> out;
        for (const auto& [name, p] : params_) {
            if (is_adapter_param(name)) continue;
            out.emplace(name, effective_weight(name));
        }
        return out;
    }

    // Prebuilt-batch overload; reusing the same tensor across steps lets the
    // stage caches hit when the lower layers are frozen.
    Tensor embed_visual(const Tensor& images) const {
        if (images.rank() != 2 || images.cols() != cfg_.d_v) {
            throw ShapeError("embed_visual: expected [N," + std::to_string(cfg_.d_v) +
                             "] image batch, got " + shape_string(images.shape()));
        }
        Tensor h1 = affine(images, "v.w1", "v.b1", true);
        Tensor h2 = affine(h1, "v.w2", "v.b2", true);
        return l2_normalize(affine(h2, "c.proj_v"));
    }

    Tensor embed_visual(const std::vector<std::vector<double>>& images) const {
        if (images.empty()) throw ShapeError("embed_visual: empty batch");
        std::vector<double> flat;
        flat.reserve(images.size() * cfg_.d_v);
        for (const auto& img : images) {
            if (img.size() != cfg_.d_v) {
                throw ShapeError("embed_visual: image feature length " + std::to_string(img.size()) +
                                 " != d_v " + std::to_string(cfg_.d_v));
            }
            flat.insert(flat.end(), img.begin(), img.end());
        }
        return embed_visual(Tensor::from_values(std::move(flat), {images.size(), cfg_.d_v}));
    }

    Tensor embed_text_pooled(const Tensor& pooled) const {
        Tensor h = affine(pooled, "t.w1", "t.b1", true);
        return l2_normalize(affine(h, "c.proj_t"));
    }

    Tensor embed_text(const std::vector<std::vector<int>>& captions) const {
        validate_captions(captions);
        return embed_text_pooled(embed_mean(params_.value("t.embed"), captions));
    }

    // Shared-batch overload used by the consistency loss: memoizes the
    // pooled lookup so the whole frozen prefix is reused across steps.
    Tensor embed_text(const std::shared_ptr<const std::vector<std::vector<int>>>& captions) const {
        if (!captions) throw ShapeError("embed_text: null caption batch");
        validate_captions(*captions);
        return embed_text_pooled(pooled_text(captions));
    }

    Tensor embed_visual(const std::vector<const Pair*>& batch) const {
        std::vector<std::vector<double>> images;
        images.reserve(batch.size());
        for (const Pair* p : batch) images.push_back(p->image);
        return embed_visual(images);
    }

    Tensor embed_text(const std::vector<const Pair*>& batch) const {
        std::vector<std::vector<int>> captions;
        captions.reserve(batch.size());
        for (const Pair* p : batch) captions.push_back(p->caption);
        return embed_text(captions);
    }

    // exp(log_temp); differentiable. Kept inside [0.01, 1] by the post-step
    // clamp below.
    Tensor temperature() const { return exp_op(params_.value("c.log_temp")); }

    double temperature_value() const { return std::exp(params_.value("c.log_temp").at(0)); }

    void clamp_temperature() {
        const double lo = std::log(kMinTemperature), hi = std::log(kMaxTemperature);
        double lt = params_.value("c.log_temp").at(0);
        if (lt < lo || lt > hi) {
            params_.set_value("c.log_temp", {std::min(std::max(lt, lo), hi)});
        }
    }

    static bool is_adapter_param(const std::string& name) {
        auto ends_with = [&](const char* suffix) {
            const std::string s(suffix);
            return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
        };
        return ends_with(".adapter_a") || ends_with(".adapter_b");
    }

    // Snapshot copy with every parameter frozen; forward passes through it
    // build constant graphs.
    DualEncoder frozen_copy() const {
        DualEncoder copy = *this;
        copy.clear_stage_caches();
        for (const auto& [name, p] : params_) copy.params_.set_trainable(name, false);
        return copy;
    }

    // adapt.hpp manages these.
    std::map<std::string, AdapterAttachment>& adapter_state() { return adapters_; }
    std::map<std::string, bool>& pre_attach_mask() { return pre_attach_mask_; }

private:
    void validate_captions(const std::vector<std::vector<int>>& captions) const {
        if (captions.empty()) throw ShapeError("embed_text: empty batch");
        for (const auto& seq : captions) {
            if (seq.size() > cfg_.max_len) {
                throw ShapeError("embed_text: caption length " + std::to_string(seq.size()) +
                                 " exceeds max_len " + std::to_string(cfg_.max_len));
            }
        }
    }

    void init_matrix(Rng& rng, const std::string& name, std::size_t rows, std::size_t cols,
                     ParamGroup group, std::size_t fan_in = 0) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in ? fan_in : rows));
        std::vector<double> v(rows * cols);
        for (double& x : v) x = rng.uniform(-bound, bound);
        params_.add(name, Tensor::from_values(std::move(v), {rows, cols}), group);
    }

    void init_vector(Rng& rng, const std::string& name, std::size_t n, std::size_t fan_in,
                     ParamGroup group) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::vector<double> v(n);
        for (double& x : v) x = rng.uniform(-bound, bound);
        params_.add(name, Tensor::from_values(std::move(v), {n}), group);
    }

    ModelConfig cfg_;
    ParamStore params_;
    std::map<std::string, AdapterAttachment> adapters_;
    std::map<std::string, bool> pre_attach_mask_;

    using StageKey = std::tuple<std::shared_ptr<detail::Node>, std::shared_ptr<detail::Node>,
                                std::shared_ptr<detail::Node>, bool>;
    using PooledKey =
        std::pair<std::shared_ptr<const std::vector<std::vector<int>>>, std::shared_ptr<detail::Node>>;
    mutable std::map<StageKey, Tensor> stage_cache_;
    mutable std::map<PooledKey, Tensor> pooled_cache_;
};

// Cosine similarity matrix of unit-normalized embedding rows: S[i][j] =
// dot(V_i, T_j).
inline Tensor similarity_matrix(const Tensor& v, const Tensor& t) {
    if (v.rank() != 2 || t.rank() != 2 || v.cols() != t.cols()) {
        throw ShapeError("similarity_matrix: embedding dims differ: " + shape_string(v.shape()) +
                         " vs " + shape_string(t.shape()));
    }
    return matmul_nt(v, t);
}

// Symmetric InfoNCE over similarity/τ with diagonal targets:
// ½·(mean row cross-entropy + mean column cross-entropy).
inline Tensor contrastive_loss(const Tensor& v, const Tensor& t, const Tensor& tau) {
    if (v.rank() != 2 || t.rank() != 2 || v.rows() != t.rows() || v.cols() != t.cols()) {
        throw ShapeError("contrastive_loss: embedding batches " + shape_string(v.shape()) +
                         " and " + shape_string(t.shape()) + " do not conform");
    }
    if (!tau.is_scalar()) throw ParameterError("contrastive_loss: temperature must be a scalar");
    if (tau.at(0) <= 0.0) {
        throw ParameterError("contrastive_loss: temperature must be > 0, got " + fmt_full(tau.at(0)));
    }
    Tensor logits = div(similarity_matrix(v, t), tau);
    Tensor lse_rows = logsumexp(logits);
    Tensor lse_cols = logsumexp(transpose(logits));
    Tensor diag_logits = diag(logits);
    // ½(CE_rows + CE_cols) = ½·mean(lse_rows + lse_cols − 2·diag)
    return scale(mean(sub(add(lse_rows, lse_cols), scale(diag_logits, 2.0))), 0.5);
}

inline Tensor contrastive_loss(const Tensor& v, const Tensor& t, double tau) {
    return contrastive_loss(v, t, Tensor::scalar(tau));
}

// Batch task loss with the model's learnable temperature in the graph.
inline Tensor task_loss(const DualEncoder& model, const std::vector<const Pair*>& batch) {
    if (batch.empty()) throw ShapeError("task_loss: empty batch");
    Tensor v = model.embed_visual(batch);
    Tensor t = model.embed_text(batch);
    return contrastive_loss(v, t, model.temperature());
}

}  // namespace modalanchor
