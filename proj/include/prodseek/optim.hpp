#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "prodseek/tensor.hpp"

namespace prodseek {

inline void require_grads(const std::vector<TensorF*>& params) {
    for (const TensorF* p : params) {
        if (!p->grad) throw std::runtime_error("missing grad");
        if (p->grad->size() != p->data.size()) throw std::runtime_error("grad size mismatch");
    }
}

inline void sgd_step(const std::vector<TensorF*>& params, double lr) {
    require_grads(params);
    for (TensorF* p : params) {
        for (std::size_t i = 0; i < p->data.size(); ++i) p->data[i] -= lr * (*p->grad)[i];
    }
}

// First/second moment buffers, created lazily on the first step. The param
// list must keep the same order and sizes across steps.
struct AdamState {
    std::int64_t t = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

inline void adam_step(AdamState& state, const std::vector<TensorF*>& params, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    require_grads(params);
    if (state.t == 0) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t p = 0; p < params.size(); ++p) {
            state.m[p].assign(params[p]->data.size(), 0.0);
            state.v[p].assign(params[p]->data.size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw std::runtime_error("adam_step: param list changed size");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (state.m[p].size() != params[p]->data.size()) {
            throw std::runtime_error("adam_step: param shape changed");
        }
        auto& m = state.m[p];
        auto& v = state.v[p];
        const auto& g = *params[p]->grad;
        auto& x = params[p]->data;
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            x[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
}

// Drops grads entirely (not just zeros) so a step without a fresh backward
// fails loudly with "missing grad".
inline void zero_grads(const std::vector<TensorF*>& params) {
    for (TensorF* p : params) p->grad.reset();
}

// Cosine decay from base to 0 across total steps.
inline double cosine_lr(double base, std::int64_t step, std::int64_t total) {
    if (total <= 0) return base;
    if (step >= total) return 0.0;
    const double x = static_cast<double>(step) / static_cast<double>(total);
    return base * 0.5 * (1.0 + std::cos(M_PI * x));
}

}  // namespace prodseek
