#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "modalanchor/encoder.hpp"
#include "modalanchor/errors.hpp"
#include "modalanchor/rng.hpp"

namespace modalanchor {

struct AdapterSpec {
    std::size_t rank = 4;
    double scale = 1.0;  // α in W + (α/r)·B·A
    // Weight matrices to adapt; empty means the default set: both cross-modal
    // projections and the top hidden layer of each encoder stream.
    std::vector<std::string> targets;

    std::vector<std::string> resolved_targets() const {
        if (!targets.empty()) return targets;
        return {"c.proj_t", "c.proj_v", "t.w1", "v.w2"};
    }
};

enum class FreezeLevel { none, lower, all_but_adapters };

inline const char* to_string(FreezeLevel level) {
    switch (level) {
        case FreezeLevel::none: return "none";
        case FreezeLevel::lower: return "lower";
        case FreezeLevel::all_but_adapters: return "all-but-adapters";
    }
    return "?";
}

// Attaches a zero-initialized low-rank pair to each target matrix: host is
// frozen, A ~ uniform(−1/√r, 1/√r), B = 0, so the forward pass is unchanged
// until training moves B.
inline void attach_adapters(DualEncoder& model, const AdapterSpec& spec, std::uint64_t seed) {
    if (model.has_adapters()) throw ContractError("attach_adapters: adapters already attached");
    if (spec.rank < 1) throw ParameterError("attach_adapters: rank must be >= 1");
    const auto targets = spec.resolved_targets();

    for (const std::string& host : targets) {
        if (!model.params().contains(host)) {
            throw ParameterError("attach_adapters: no parameter named " + host);
        }
        const Tensor& w = model.params().value(host);
        if (w.rank() != 2) throw ParameterError("attach_adapters: target " + host + " is not a matrix");
        if (spec.rank > std::min(w.rows(), w.cols())) {
            throw ParameterError("attach_adapters: rank " + std::to_string(spec.rank) +
                                 " exceeds min dimension of " + host + " " + shape_string(w.shape()));
        }
    }

    model.pre_attach_mask() = model.params().trainable_mask();
    model.clear_stage_caches();
    Rng rng(derive_seed({seed, 0x61646170ULL}));
    for (const std::string& host : targets) {
        const Tensor& w = model.params().value(host);
        const std::size_t rows = w.rows(), cols = w.cols(), r = spec.rank;
        AdapterAttachment att;
        att.host = host;
        att.a_name = host + ".adapter_a";
        att.b_name = host + ".adapter_b";
        att.rank = r;
        att.scale = spec.scale;
        att.host_was_trainable = model.params().info(host).trainable;

        const double bound = 1.0 / std::sqrt(static_cast<double>(r));
        std::vector<double> a(r * cols);
        for (double& x : a) x = rng.uniform(-bound, bound);
        const ParamGroup group = model.params().info(host).group;
        model.params().add(att.a_name, Tensor::from_values(std::move(a), {r, cols}), group);
        model.params().add(att.b_name, Tensor::from_values(std::vector<double>(rows * r, 0.0), {rows, r}),
                           group);
        model.params().set_trainable(host, false);
        model.adapter_state().emplace(host, att);
    }
}

inline void freeze_hierarchy(DualEncoder& model, FreezeLevel level) {
    model.clear_stage_caches();
    switch (level) {
        case FreezeLevel::none:
            for (const auto& [name, p] : model.params()) model.params().set_trainable(name, true);
            break;
        case FreezeLevel::lower:
            // First layer of each stream: the visual input layer and the
            // token embedding table.
            model.params().set_trainable("v.w1", false);
            model.params().set_trainable("v.b1", false);
            model.params().set_trainable("t.embed", false);
            break;
        case FreezeLevel::all_but_adapters: {
            if (!model.has_adapters()) {
                throw ContractError("freeze_hierarchy: all-but-adapters requires attached adapters");
            }
            for (const auto& [name, p] : model.params()) {
                model.params().set_trainable(name, DualEncoder::is_adapter_param(name));
            }
            break;
        }
    }
}

// Bakes W ← W + (α/r)·B·A into every host, removes the adapter parameters,
// and restores the attach-time trainable mask. The delta uses the same kernel
// as the forward pass, so merged outputs match adapter-active outputs
// exactly.
inline void merge_adapters(DualEncoder& model) {
    if (!model.has_adapters()) throw ContractError("merge_adapters: no adapters attached");
    model.clear_stage_caches();
    for (const auto& [host, att] : model.adapter_state()) {
        Tensor merged = add(model.params().value(host),
                            scale(matmul(model.params().value(att.b_name),
                                         model.params().value(att.a_name)),
                                  att.scale / static_cast<double>(att.rank)));
        model.params().set_value(host, merged.values());
        model.params().remove(att.a_name);
        model.params().remove(att.b_name);
    }
    model.adapter_state().clear();
    for (const auto& [name, trainable] : model.pre_attach_mask()) {
        model.params().set_trainable(name, trainable);
    }
    model.pre_attach_mask().clear();
}

inline double trainable_fraction(const DualEncoder& model) {
    const std::size_t total = model.params().total_scalars();
    return total ? static_cast<double>(model.params().trainable_scalars()) /
                       static_cast<double>(total)
                 : 0.0;
}

}  // namespace modalanchor
