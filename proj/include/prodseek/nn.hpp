#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "prodseek/autodiff.hpp"
#include "prodseek/rng.hpp"
#include "prodseek/tensor.hpp"

namespace prodseek {

// Linear layers draw from uniform(−1/√fan_in, 1/√fan_in); embeddings and
// learnable tokens from N(0, 0.02).
inline TensorF init_linear_weight(int in, int out, Rng& rng) {
    TensorF w({in, out});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& v : w.data) v = rng.uniform(-bound, bound);
    w.requires_grad = true;
    return w;
}

inline TensorF init_linear_bias(int in, int out, Rng& rng) {
    TensorF b({1, out});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& v : b.data) v = rng.uniform(-bound, bound);
    b.requires_grad = true;
    return b;
}

inline TensorF init_embedding(int rows, int cols, Rng& rng) {
    TensorF e({rows, cols});
    for (double& v : e.data) v = rng.normal(0.0, 0.02);
    e.requires_grad = true;
    return e;
}

// Grid position table initialised with fixed 2-D sinusoids (first half of the
// channels encodes the row, second half the column) so spatial location is
// linearly readable before any training; the table stays a learnable
// parameter. Channels beyond the last full sin/cos quartet are left at zero.
inline TensorF init_pos_sincos(int gh, int gw, int dim) {
    TensorF p({gh * gw, dim});
    p.requires_grad = true;
    const int quarter = dim / 4;
    if (quarter == 0) return p;
    for (int r = 0; r < gh; ++r) {
        for (int c = 0; c < gw; ++c) {
            const int row = r * gw + c;
            for (int i = 0; i < quarter; ++i) {
                const double omega = std::pow(10000.0, -static_cast<double>(i) / quarter);
                p.at(row, 2 * i) = std::sin(r * omega);
                p.at(row, 2 * i + 1) = std::cos(r * omega);
                p.at(row, 2 * quarter + 2 * i) = std::sin(c * omega);
                p.at(row, 2 * quarter + 2 * i + 1) = std::cos(c * omega);
            }
        }
    }
    return p;
}

struct LinearParams {
    TensorF w;  // in×out
    TensorF b;  // 1×out

    LinearParams() = default;
    LinearParams(int in, int out, Rng& rng)
        : w(init_linear_weight(in, out, rng)), b(init_linear_bias(in, out, rng)) {}

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".w", w);
        f(prefix + ".b", b);
    }
};

inline Value linear(Tape& t, LinearParams& p, Value x) {
    return t.add(t.matmul(x, t.leaf(p.w)), t.leaf(p.b));
}

// Affine layer-norm: normalize each row, then per-channel gain and bias.
struct NormParams {
    TensorF gain;  // 1×d, init 1
    TensorF bias;  // 1×d, init 0

    NormParams() = default;
    explicit NormParams(int d) : gain({1, d}, 1.0), bias({1, d}, 0.0) {
        gain.requires_grad = true;
        bias.requires_grad = true;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".gain", gain);
        f(prefix + ".bias", bias);
    }
};

inline Value layer_norm_affine(Tape& t, NormParams& p, Value x) {
    return t.add(t.mul(t.layer_norm(x), t.leaf(p.gain)), t.leaf(p.bias));
}

// Full (global) multi-head self-attention over an N×d token matrix.
struct AttentionParams {
    LinearParams q, k, v, o;
    int heads = 1;

    AttentionParams() = default;
    AttentionParams(int d, int heads_, Rng& rng)
        : q(d, d, rng), k(d, d, rng), v(d, d, rng), o(d, d, rng), heads(heads_) {
        if (heads_ <= 0 || d % heads_ != 0) {
            throw std::invalid_argument("attention: head count " + std::to_string(heads_) +
                                        " must divide width " + std::to_string(d));
        }
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        q.visit(prefix + ".q", f);
        k.visit(prefix + ".k", f);
        v.visit(prefix + ".v", f);
        o.visit(prefix + ".o", f);
    }
};

inline Value attention(Tape& t, AttentionParams& p, Value x) {
    const int d = t.shape(x)[1];
    const int dh = d / p.heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Value q = linear(t, p.q, x);
    Value k = linear(t, p.k, x);
    Value v = linear(t, p.v, x);
    std::vector<Value> head_outs;
    head_outs.reserve(static_cast<std::size_t>(p.heads));
    for (int h = 0; h < p.heads; ++h) {
        Value qh = t.slice(q, 1, h * dh, dh);
        Value kh = t.slice(k, 1, h * dh, dh);
        Value vh = t.slice(v, 1, h * dh, dh);
        Value scores = t.scale(t.matmul(qh, t.transpose(kh)), inv_scale);
        Value attn = t.softmax(scores, 1);
        head_outs.push_back(t.matmul(attn, vh));
    }
    Value merged = p.heads == 1 ? head_outs[0] : t.concat(head_outs, 1);
    return linear(t, p.o, merged);
}

// Pre-LN transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
// MLP expands 4× with GELU.
struct BlockParams {
    NormParams ln1, ln2;
    AttentionParams attn;
    LinearParams fc1, fc2;

    BlockParams() = default;
    BlockParams(int d, int heads, Rng& rng)
        : ln1(d), ln2(d), attn(d, heads, rng), fc1(d, 4 * d, rng), fc2(4 * d, d, rng) {}

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        ln1.visit(prefix + ".ln1", f);
        attn.visit(prefix + ".attn", f);
        ln2.visit(prefix + ".ln2", f);
        fc1.visit(prefix + ".fc1", f);
        fc2.visit(prefix + ".fc2", f);
    }
};

inline Value transformer_block(Tape& t, BlockParams& p, Value x) {
    Value h = t.add(x, attention(t, p.attn, layer_norm_affine(t, p.ln1, x)));
    Value m = linear(t, p.fc2, t.gelu(linear(t, p.fc1, layer_norm_affine(t, p.ln2, h))));
    return t.add(h, m);
}

}  // namespace prodseek
