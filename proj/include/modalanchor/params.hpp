#pragma once

#include <map>
#include <string>
#include <vector>

#include "modalanchor/errors.hpp"
#include "modalanchor/tensor.hpp"

namespace modalanchor {

enum class ParamGroup { visual, textual, cross_modal };

inline const char* to_string(ParamGroup g) {
    switch (g) {
        case ParamGroup::visual: return "visual";
        case ParamGroup::textual: return "textual";
        case ParamGroup::cross_modal: return "cross_modal";
    }
    return "?";
}

inline ParamGroup param_group_from_string(const std::string& s) {
    if (s == "visual") return ParamGroup::visual;
    if (s == "textual") return ParamGroup::textual;
    if (s == "cross_modal") return ParamGroup::cross_modal;
    throw ParseError("unknown parameter group: " + s);
}

struct ParamInfo {
    Tensor value;
    ParamGroup group = ParamGroup::visual;
    bool trainable = true;
};

// Named parameters partitioned into modality groups. Iteration order is the
// (deterministic) lexicographic name order of std::map.
class ParamStore {
public:
    void add(const std::string& name, Tensor value, ParamGroup group, bool trainable = true) {
        if (entries_.count(name)) throw ContractError("ParamStore::add: duplicate parameter " + name);
        Tensor leaf = Tensor::parameter(name, value.values(), value.shape(), trainable);
        entries_.emplace(name, ParamInfo{std::move(leaf), group, trainable});
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    const ParamInfo& info(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("ParamStore: unknown parameter " + name);
        return it->second;
    }

    const Tensor& value(const std::string& name) const { return info(name).value; }

    // Replaces the stored tensor; group and mask are preserved and the new
    // leaf's requires_grad tracks the trainable flag.
    void set_value(const std::string& name, const std::vector<double>& values) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("ParamStore: unknown parameter " + name);
        if (values.size() != it->second.value.size()) {
            throw ContractError("ParamStore::set_value: size mismatch for " + name);
        }
        it->second.value =
            Tensor::parameter(name, values, it->second.value.shape(), it->second.trainable);
    }

    void set_trainable(const std::string& name, bool trainable) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("ParamStore: unknown parameter " + name);
        if (it->second.trainable == trainable) return;
        it->second.trainable = trainable;
        it->second.value = Tensor::parameter(name, it->second.value.values(),
                                             it->second.value.shape(), trainable);
    }

    void remove(const std::string& name) {
        if (entries_.erase(name) == 0) throw ContractError("ParamStore: unknown parameter " + name);
    }

    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    std::size_t count() const { return entries_.size(); }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& [name, p] : entries_) n += p.value.size();
        return n;
    }

    std::size_t trainable_scalars() const {
        std::size_t n = 0;
        for (const auto& [name, p] : entries_)
            if (p.trainable) n += p.value.size();
        return n;
    }

    std::map<std::string, bool> trainable_mask() const {
        std::map<std::string, bool> mask;
        for (const auto& [name, p] : entries_) mask.emplace(name, p.trainable);
        return mask;
    }

    std::map<std::string, std::vector<double>> snapshot_values() const {
        std::map<std::string, std::vector<double>> out;
        for (const auto& [name, p] : entries_) out.emplace(name, p.value.values());
        return out;
    }

private:
    std::map<std::string, ParamInfo> entries_;
};

using AnchorMap = std::map<std::string, std::vector<double>>;

// Plain gradient descent: θ ← θ − lr·(g + wd·(θ − θ_ref)). Frozen parameters
// are untouched; a trainable parameter without a gradient is a contract
// violation. θ_ref defaults to zero when no reference map is given.
inline void sgd_step(ParamStore& params, const GradientMap& grads, double lr,
                     double weight_decay = 0.0, const AnchorMap* reference = nullptr) {
    if (lr < 0.0) throw ParameterError("sgd_step: lr must be >= 0");
    if (weight_decay < 0.0) throw ParameterError("sgd_step: weight_decay must be >= 0");
    for (const auto& [name, p] : params) {
        if (!p.trainable) continue;
        auto git = grads.find(name);
        if (git == grads.end()) {
            throw ContractError("sgd_step: missing gradient for trainable parameter " + name);
        }
        const auto& g = git->second.values();
        if (g.size() != p.value.size()) {
            throw ContractError("sgd_step: gradient shape mismatch for " + name);
        }
        const std::vector<double>* ref = nullptr;
        if (weight_decay > 0.0 && reference) {
            auto rit = reference->find(name);
            if (rit != reference->end()) {
                if (rit->second.size() != p.value.size()) {
                    throw ContractError("sgd_step: reference shape mismatch for " + name);
                }
                ref = &rit->second;
            }
        }
        std::vector<double> updated = p.value.values();
        for (std::size_t i = 0; i < updated.size(); ++i) {
            const double anchor = ref ? (*ref)[i] : 0.0;
            const double decay = weight_decay != 0.0 ? weight_decay * (updated[i] - anchor) : 0.0;
            updated[i] -= lr * (g[i] + decay);
        }
        params.set_value(name, updated);
    }
}

}  // namespace modalanchor
