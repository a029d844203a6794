#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "prodseek/tensor.hpp"

namespace prodseek {

// Central-difference gradient oracle. f must be a pure function of the params'
// current data (it may rebuild a fresh Tape internally on every call).
inline std::vector<std::vector<double>> finite_diff_grad(
    const std::function<double()>& f, const std::vector<TensorF*>& params, double eps = 1e-5) {
    if (eps <= 0.0) throw std::invalid_argument("finite_diff_grad: eps must be positive");
    std::vector<std::vector<double>> grads;
    grads.reserve(params.size());
    for (TensorF* p : params) {
        std::vector<double> g(p->data.size());
        for (std::size_t i = 0; i < p->data.size(); ++i) {
            const double orig = p->data[i];
            p->data[i] = orig + eps;
            const double fp = f();
            p->data[i] = orig - eps;
            const double fm = f();
            p->data[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw std::runtime_error("finite_diff_grad: f returned a non-finite value");
            }
            g[i] = (fp - fm) / (2.0 * eps);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

// |a−b| / max(|a|, |b|, floor); the floor keeps near-zero gradients from
// blowing up the ratio on finite-difference noise.
inline double grad_rel_err(double a, double b, double floor = 1e-4) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
};

// Compares backward() grads against finite differences for every param.
// `loss` runs a fresh forward pass and returns the scalar; `names` labels the
// params in the report (parallel to `params`).
inline GradCheckReport compare_grads(const std::function<double()>& loss,
                                     const std::vector<TensorF*>& params,
                                     const std::vector<std::vector<double>>& analytic,
                                     const std::vector<std::string>& names, double eps = 1e-5) {
    if (analytic.size() != params.size()) {
        throw std::invalid_argument("compare_grads: analytic grads / params length mismatch");
    }
    const auto numeric = finite_diff_grad(loss, params, eps);
    GradCheckReport rep;
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (analytic[p].size() != numeric[p].size()) {
            throw std::invalid_argument("compare_grads: grad size mismatch for param " +
                                        (p < names.size() ? names[p] : std::to_string(p)));
        }
        for (std::size_t i = 0; i < numeric[p].size(); ++i) {
            const double e = grad_rel_err(analytic[p][i], numeric[p][i]);
            if (e > rep.max_rel_err) {
                rep.max_rel_err = e;
                rep.worst_param = p < names.size() ? names[p] : std::to_string(p);
                rep.worst_index = i;
            }
        }
    }
    return rep;
}

}  // namespace prodseek
