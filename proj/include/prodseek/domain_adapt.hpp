#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "prodseek/autodiff.hpp"
#include "prodseek/encoder.hpp"
#include "prodseek/seekers.hpp"
#include "prodseek/tensor.hpp"

namespace prodseek {

// Gaussian RBF bank φ(a,b) = exp(−‖a−b‖² / (2σ²)) with σ² = base · multiplier.
// base defaults to the median heuristic over the pooled pair of sample sets,
// recomputed per call; fixed_base pins it (used by closed-form oracles).
struct KernelSpec {
    std::vector<double> multipliers = {0.25, 0.5, 1.0, 2.0, 4.0};
    std::optional<double> fixed_base;

    void validate() const {
        if (multipliers.empty()) throw std::invalid_argument("KernelSpec: no multipliers");
        for (double m : multipliers) {
            if (!(m > 0.0)) throw std::invalid_argument("KernelSpec: multipliers must be positive");
        }
        if (fixed_base && !(*fixed_base > 0.0)) {
            throw std::invalid_argument("KernelSpec: base bandwidth must be positive");
        }
    }
};

// Median of pairwise squared Euclidean distances over the pooled rows of X and
// Y (upper middle for even pair counts); 1.0 when the median is zero.
inline double median_bandwidth(const TensorF& X, const TensorF& Y) {
    if (X.shape.size() != 2 || Y.shape.size() != 2 || X.shape[1] != Y.shape[1]) {
        throw std::invalid_argument("median_bandwidth: need rank-2 inputs with equal dim");
    }
    const int d = X.shape[1];
    std::vector<const double*> rows;
    for (int i = 0; i < X.shape[0]; ++i) rows.push_back(X.data.data() + static_cast<std::size_t>(i) * d);
    for (int i = 0; i < Y.shape[0]; ++i) rows.push_back(Y.data.data() + static_cast<std::size_t>(i) * d);
    if (rows.size() < 2) throw std::invalid_argument("median_bandwidth: need at least 2 pooled points");
    std::vector<double> dists;
    dists.reserve(rows.size() * (rows.size() - 1) / 2);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = i + 1; j < rows.size(); ++j) {
            double s = 0.0;
            for (int c = 0; c < d; ++c) {
                const double diff = rows[i][c] - rows[j][c];
                s += diff * diff;
            }
            dists.push_back(s);
        }
    }
    const std::size_t mid = dists.size() / 2;
    std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
    const double med = dists[mid];
    return med > 0.0 ? med : 1.0;
}

namespace detail {

// n×m matrix of squared distances between the rows of X (n×d) and Y (m×d),
// clamped at zero against cancellation noise.
inline Value pairwise_sqdist(Tape& t, Value X, Value Y) {
    Value x2 = t.sum(t.mul(X, X), 1);               // n×1
    Value y2 = t.transpose(t.sum(t.mul(Y, Y), 1));  // 1×m
    Value cross = t.scale(t.matmul(X, t.transpose(Y)), -2.0);
    return t.maximum(t.add(t.add(x2, y2), cross), t.scalar(0.0));
}

inline Value mean_all(Tape& t, Value x) { return t.mean(t.mean(x, 0), 1); }

}  // namespace detail

// Biased (V-statistic) squared MMD with the diagonal self-terms kept,
// averaged over the kernel bank. Differentiable w.r.t. both sample sets.
inline Value mmd2(Tape& t, Value X, Value Y, const KernelSpec& spec) {
    spec.validate();
    const auto& xs = t.shape(X);
    const auto& ys = t.shape(Y);
    if (xs[1] != ys[1]) {
        throw std::invalid_argument("mmd2: sample dims differ, " + shape_str(xs) + " vs " + shape_str(ys));
    }
    double base;
    if (spec.fixed_base) {
        base = *spec.fixed_base;
    } else {
        TensorF xd(xs), yd(ys);
        xd.data = t.val(X);
        yd.data = t.val(Y);
        base = median_bandwidth(xd, yd);
    }
    Value d_xx = detail::pairwise_sqdist(t, X, X);
    Value d_yy = detail::pairwise_sqdist(t, Y, Y);
    Value d_xy = detail::pairwise_sqdist(t, X, Y);
    Value acc = t.scalar(0.0);
    for (double mult : spec.multipliers) {
        const double coef = -1.0 / (2.0 * base * mult);
        Value k_xx = detail::mean_all(t, t.exp(t.scale(d_xx, coef)));
        Value k_yy = detail::mean_all(t, t.exp(t.scale(d_yy, coef)));
        Value k_xy = detail::mean_all(t, t.exp(t.scale(d_xy, coef)));
        acc = t.add(acc, t.add(t.sub(k_xx, t.scale(k_xy, 2.0)), k_yy));
    }
    return t.scale(acc, 1.0 / static_cast<double>(spec.multipliers.size()));
}

// A batch of encodings stacked for distribution alignment: rep rows plus each
// instance's token matrix averaged over tokens.
struct EncodingBatch {
    Value reps;         // B×d
    Value token_means;  // B×d
};

inline EncodingBatch stack_encodings(Tape& t, const std::vector<Encoding>& encodings) {
    if (encodings.empty()) throw std::invalid_argument("stack_encodings: empty batch");
    std::vector<Value> reps, means;
    reps.reserve(encodings.size());
    means.reserve(encodings.size());
    for (const Encoding& e : encodings) {
        reps.push_back(e.rep);
        means.push_back(t.mean(e.tokens, 0));  // 1×d row per instance
    }
    return EncodingBatch{t.concat(reps, 0), t.concat(means, 0)};
}

inline Value stack_rows(Tape& t, const std::vector<Value>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty batch");
    return t.concat(rows, 0);
}

// Aligns the concentrated rep vectors and the token-mean summaries across
// domains; applies to either stream (visual ⇒ L_DisV, textual ⇒ L_DisQ).
inline Value l_dis_stream(Tape& t, const EncodingBatch& src, const EncodingBatch& tgt,
                          const KernelSpec& spec) {
    return t.add(mmd2(t, src.reps, tgt.reps, spec), mmd2(t, src.token_means, tgt.token_means, spec));
}

inline Value l_disv(Tape& t, const EncodingBatch& src, const EncodingBatch& tgt, const KernelSpec& spec) {
    return l_dis_stream(t, src, tgt, spec);
}

inline Value l_disq(Tape& t, const EncodingBatch& src, const EncodingBatch& tgt, const KernelSpec& spec) {
    return l_dis_stream(t, src, tgt, spec);
}

// Output-distribution alignment over the fusion LOC states.
inline Value l_diso(Tape& t, Value f_loc_src, Value f_loc_tgt, const KernelSpec& spec) {
    return mmd2(t, f_loc_src, f_loc_tgt, spec);
}

struct DAWeights {
    double lambda_dv = 1.0;
    double lambda_dq = 1.0;
    double lambda_po = 1.0;
    double lambda_o = 1.0;

    void validate() const {
        if (lambda_dv < 0 || lambda_dq < 0 || lambda_po < 0 || lambda_o < 0) {
            throw std::invalid_argument("DAWeights: weights must be >= 0");
        }
    }
};

inline Value l_da(Tape& t, Value disv, Value disq, Value diso, const DAWeights& w) {
    w.validate();
    return t.add(t.add(t.scale(disv, w.lambda_dv), t.scale(disq, w.lambda_dq)), diso);
}

// Cross-dataset cosine affinities from detached rep features.
struct CrossDatasetSimilarity {
    TensorF m_v;  // N_S×N_T
    TensorF m_q;
    TensorF m;  // (M_V + M_Q)/2 ∈ [−1,1]
};

inline TensorF cosine_cross(const std::vector<std::vector<double>>& a,
                            const std::vector<std::vector<double>>& b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("cosine_cross: empty dataset");
    const std::size_t d = a[0].size();
    auto norm = [&](const std::vector<double>& v, const char* side, std::size_t idx) {
        if (v.size() != d) throw std::invalid_argument("cosine_cross: inconsistent feature dims");
        double s = 0.0;
        for (double x : v) s += x * x;
        if (s == 0.0) {
            throw std::invalid_argument(std::string("cosine_cross: zero-norm ") + side + " feature at " +
                                        std::to_string(idx));
        }
        return std::sqrt(s);
    };
    TensorF out({static_cast<int>(a.size()), static_cast<int>(b.size())});
    std::vector<double> bn(b.size());
    for (std::size_t j = 0; j < b.size(); ++j) bn[j] = norm(b[j], "column", j);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double an = norm(a[i], "row", i);
        for (std::size_t j = 0; j < b.size(); ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += a[i][c] * b[j][c];
            out.at(static_cast<int>(i), static_cast<int>(j)) = dot / (an * bn[j]);
        }
    }
    return out;
}

inline CrossDatasetSimilarity build_similarity(const std::vector<std::vector<double>>& src_v,
                                               const std::vector<std::vector<double>>& src_q,
                                               const std::vector<std::vector<double>>& tgt_v,
                                               const std::vector<std::vector<double>>& tgt_q) {
    if (src_v.size() != src_q.size() || tgt_v.size() != tgt_q.size()) {
        throw std::invalid_argument("build_similarity: visual/textual feature counts differ");
    }
    CrossDatasetSimilarity sim;
    sim.m_v = cosine_cross(src_v, tgt_v);
    sim.m_q = cosine_cross(src_q, tgt_q);
    sim.m = TensorF(sim.m_v.shape);
    for (std::size_t i = 0; i < sim.m.data.size(); ++i) {
        sim.m.data[i] = 0.5 * (sim.m_v.data[i] + sim.m_q.data[i]);
    }
    return sim;
}

struct SelectionPolicy {
    double theta = 0.5;
    double k_percent = 20.0;

    void validate() const {
        if (!(theta > -1.0 && theta < 1.0)) {
            throw std::invalid_argument("SelectionPolicy: theta must lie in (-1,1)");
        }
        if (!(k_percent > 0.0 && k_percent <= 100.0)) {
            throw std::invalid_argument("SelectionPolicy: k must lie in (0,100]");
        }
    }
};

// Selection ratio schedule: starts at 20%, grows 10 points per epoch, capped
// at 60%.
inline double k_for_epoch(int epoch, double start = 20.0, double step = 10.0, double cap = 60.0) {
    if (epoch < 0) throw std::invalid_argument("k_for_epoch: epoch must be >= 0");
    return std::min(cap, start + step * epoch);
}

// Ranks target instances by how many source instances clear the similarity
// threshold; ties fall back to the best single similarity, then to index.
// Returns the first ⌈k%·N_T⌉ indices of that fixed order, so growing k only
// extends the selection.
inline std::vector<int> select_instances(const TensorF& m, const SelectionPolicy& policy) {
    policy.validate();
    if (m.shape.size() != 2) throw std::invalid_argument("select_instances: M must be rank 2");
    const int ns = m.shape[0], nt = m.shape[1];
    std::vector<int> counts(static_cast<std::size_t>(nt), 0);
    std::vector<double> best(static_cast<std::size_t>(nt), -2.0);
    for (int j = 0; j < nt; ++j) {
        for (int i = 0; i < ns; ++i) {
            const double v = m.at(i, j);
            if (v > policy.theta) ++counts[static_cast<std::size_t>(j)];
            if (v > best[static_cast<std::size_t>(j)]) best[static_cast<std::size_t>(j)] = v;
        }
    }
    std::vector<int> order(static_cast<std::size_t>(nt));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (counts[static_cast<std::size_t>(a)] != counts[static_cast<std::size_t>(b)]) {
            return counts[static_cast<std::size_t>(a)] > counts[static_cast<std::size_t>(b)];
        }
        if (best[static_cast<std::size_t>(a)] != best[static_cast<std::size_t>(b)]) {
            return best[static_cast<std::size_t>(a)] > best[static_cast<std::size_t>(b)];
        }
        return a < b;
    });
    const int take = static_cast<int>(std::ceil(policy.k_percent / 100.0 * nt));
    order.resize(static_cast<std::size_t>(std::min(take, nt)));
    return order;
}

// Self-training regression loss against a frozen pseudo box (a constant on
// the tape, so no gradient reaches the teacher output).
inline Value l_pobjs(Tape& t, Value pred, const BoxXYWH& pseudo) {
    check_box(pseudo, "l_pobjs");
    Value target = t.constant({1, 4}, {pseudo.x, pseudo.y, pseudo.w, pseudo.h});
    return object_seek_loss(t, pred, target);
}

inline Value l_kt(Tape& t, Value da, Value pobjs, double lambda_po) {
    if (lambda_po < 0.0) throw std::invalid_argument("l_kt: lambda_po must be >= 0");
    return t.add(da, t.scale(pobjs, lambda_po));
}

}  // namespace prodseek
