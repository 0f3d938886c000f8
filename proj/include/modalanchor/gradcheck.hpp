#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "modalanchor/errors.hpp"
#include "modalanchor/params.hpp"
#include "modalanchor/tensor.hpp"

namespace modalanchor {

using LossFn = std::function<Tensor(const ParamStore&)>;

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
};

// Central finite differences against the analytic gradient, over every
// trainable scalar. Relative error uses max(1, |numeric|) in the denominator
// so near-zero gradients are compared absolutely.
inline GradCheckReport check_gradient_report(const LossFn& fn, const ParamStore& params,
                                             double step) {
    if (step <= 0.0) throw ParameterError("check_gradient: step must be > 0");

    Tensor loss = fn(params);
    if (!std::isfinite(loss.scalar_value())) {
        throw NumericError("check_gradient: non-finite loss " + fmt_full(loss.scalar_value()));
    }
    GradientMap analytic = backward(loss);

    GradCheckReport report;
    for (const auto& [name, p] : params) {
        if (!p.trainable) continue;
        const auto ait = analytic.find(name);
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            ParamStore probe = params;
            std::vector<double> v = p.value.values();
            const double orig = v[i];
            v[i] = orig + step;
            probe.set_value(name, v);
            const double up = fn(probe).scalar_value();
            v[i] = orig - step;
            probe.set_value(name, v);
            const double down = fn(probe).scalar_value();
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw NumericError("check_gradient: non-finite probe at " + name + "[" +
                                   std::to_string(i) + "]");
            }
            const double numeric = (up - down) / (2.0 * step);
            const double a = ait == analytic.end() ? 0.0 : ait->second.values()[i];
            const double err = std::fabs(a - numeric) / std::max(1.0, std::fabs(numeric));
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_param = name;
                report.worst_index = i;
            }
        }
    }
    return report;
}

inline double check_gradient(const LossFn& fn, const ParamStore& params, double step) {
    return check_gradient_report(fn, params, step).max_rel_error;
}

// Test hook: identity in the forward pass, negated gradient in the backward
// pass. Wrapping an op's output with this simulates a sign error in that
// op's backward rule so the finite-difference suite can be shown to catch it.
inline Tensor negate_gradient(const Tensor& x) {
    std::vector<double> out = x.values();
    return make_op_node(x.shape(), std::move(out), {x},
        [](const detail::Node& self) {
            detail::Node& p = *self.parents[0];
            if (!p.requires_grad) return;
            detail::ensure_grad(p);
            for (std::size_t i = 0; i < self.values.size(); ++i) p.grad[i] -= self.grad[i];
        });
}

}  // namespace modalanchor
