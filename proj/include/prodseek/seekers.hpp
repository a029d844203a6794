#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "prodseek/autodiff.hpp"
#include "prodseek/nn.hpp"
#include "prodseek/rng.hpp"
#include "prodseek/tensor.hpp"

namespace prodseek {

// Normalized center/extent box; corners live at x±w/2, y±h/2.
struct BoxXYWH {
    double x = 0.5, y = 0.5, w = 1.0, h = 1.0;
};

inline void check_box(const BoxXYWH& b, const char* who) {
    if (!(b.w > 0.0) || !(b.h > 0.0)) {
        throw std::invalid_argument(std::string(who) + ": box extents must be positive (w=" +
                                    std::to_string(b.w) + ", h=" + std::to_string(b.h) + ")");
    }
}

// GIoU value in (−1, 1]: IoU − (hull − union)/hull.
inline double giou(const BoxXYWH& a, const BoxXYWH& b) {
    check_box(a, "giou");
    check_box(b, "giou");
    const double ax1 = a.x - a.w / 2, ax2 = a.x + a.w / 2, ay1 = a.y - a.h / 2, ay2 = a.y + a.h / 2;
    const double bx1 = b.x - b.w / 2, bx2 = b.x + b.w / 2, by1 = b.y - b.h / 2, by2 = b.y + b.h / 2;
    const double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
    const double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
    const double inter = iw * ih;
    const double uni = a.w * a.h + b.w * b.h - inter;
    const double hull = (std::max(ax2, bx2) - std::min(ax1, bx1)) * (std::max(ay2, by2) - std::min(ay1, by1));
    return inter / uni - (hull - uni) / hull;
}

inline double iou(const BoxXYWH& a, const BoxXYWH& b) {
    check_box(a, "iou");
    check_box(b, "iou");
    const double iw = std::max(0.0, std::min(a.x + a.w / 2, b.x + b.w / 2) - std::max(a.x - a.w / 2, b.x - b.w / 2));
    const double ih = std::max(0.0, std::min(a.y + a.h / 2, b.y + b.h / 2) - std::max(a.y - a.h / 2, b.y - b.h / 2));
    const double inter = iw * ih;
    return inter / (a.w * a.h + b.w * b.h - inter);
}

// Differentiable GIoU on 1×4 (x,y,w,h) rows.
inline Value giou_value(Tape& t, Value pred, Value gt) {
    if (t.shape(pred) != std::vector<int>{1, 4} || t.shape(gt) != std::vector<int>{1, 4}) {
        throw std::invalid_argument("giou_value: boxes must be 1x4");
    }
    auto comp = [&](Value b, int i) { return t.slice(b, 1, i, 1); };
    Value half = t.scalar(0.5);
    Value zero = t.scalar(0.0);
    Value ax = comp(pred, 0), ay = comp(pred, 1), aw = comp(pred, 2), ah = comp(pred, 3);
    Value bx = comp(gt, 0), by = comp(gt, 1), bw = comp(gt, 2), bh = comp(gt, 3);
    for (double v : {t.scalar_value(aw), t.scalar_value(ah), t.scalar_value(bw), t.scalar_value(bh)}) {
        if (!(v > 0.0)) throw std::invalid_argument("giou_value: box extents must be positive");
    }
    Value ax1 = t.sub(ax, t.mul(aw, half)), ax2 = t.add(ax, t.mul(aw, half));
    Value ay1 = t.sub(ay, t.mul(ah, half)), ay2 = t.add(ay, t.mul(ah, half));
    Value bx1 = t.sub(bx, t.mul(bw, half)), bx2 = t.add(bx, t.mul(bw, half));
    Value by1 = t.sub(by, t.mul(bh, half)), by2 = t.add(by, t.mul(bh, half));
    Value iw = t.maximum(t.sub(t.minimum(ax2, bx2), t.maximum(ax1, bx1)), zero);
    Value ih = t.maximum(t.sub(t.minimum(ay2, by2), t.maximum(ay1, by1)), zero);
    Value inter = t.mul(iw, ih);
    Value uni = t.sub(t.add(t.mul(aw, ah), t.mul(bw, bh)), inter);
    Value hull = t.mul(t.sub(t.maximum(ax2, bx2), t.minimum(ax1, bx1)),
                       t.sub(t.maximum(ay2, by2), t.minimum(ay1, by1)));
    return t.sub(t.div(inter, uni), t.div(t.sub(hull, uni), hull));
}

// L1 + (1 − GIoU) regression loss on 1×4 boxes.
inline Value object_seek_loss(Tape& t, Value pred, Value gt) {
    return t.add(t.l1_distance(pred, gt), t.sub(t.scalar(1.0), giou_value(t, pred, gt)));
}

// S[i][j] = cosine(v_reps[i], q_reps[j]); rows are vision items, columns queries.
inline Value similarity_matrix(Tape& t, Value v_reps, Value q_reps) {
    const auto& vs = t.shape(v_reps);
    const auto& qs = t.shape(q_reps);
    if (vs[1] != qs[1]) {
        throw std::invalid_argument("similarity_matrix: dim mismatch " + shape_str(vs) + " vs " +
                                    shape_str(qs));
    }
    auto normalize = [&](Value x, const char* side) {
        Value norm = t.sqrt(t.sum(t.mul(x, x), 1));  // N×1
        const auto& nv = t.val(norm);
        for (std::size_t i = 0; i < nv.size(); ++i) {
            if (nv[i] == 0.0) {
                throw std::invalid_argument(std::string("similarity_matrix: zero-norm ") + side +
                                            " vector at row " + std::to_string(i));
            }
        }
        return t.div(x, norm);
    };
    return t.matmul(normalize(v_reps, "vision"), t.transpose(normalize(q_reps, "query")));
}

enum class PriorDirection { q2v, v2q };

// Gradient-stopped refinement weights. For q2v each vision item's weights over
// the query batch sum to 1 (rows of the vision×query layout); v2q normalizes
// over vision items (columns).
inline TensorF prior_matrix(const TensorF& S, double tau, PriorDirection dir) {
    if (S.shape.size() != 2) throw std::invalid_argument("prior_matrix: S must be rank 2");
    if (tau < 0.0) throw std::invalid_argument("prior_matrix: tau must be >= 0");
    const int n = S.shape[0], m = S.shape[1];
    TensorF out(S.shape);
    if (dir == PriorDirection::q2v) {
        for (int i = 0; i < n; ++i) {
            double mx = S.at(i, 0);
            for (int j = 1; j < m; ++j) mx = std::max(mx, S.at(i, j));
            double z = 0.0;
            for (int j = 0; j < m; ++j) z += std::exp(tau * (S.at(i, j) - mx));
            for (int j = 0; j < m; ++j) out.at(i, j) = std::exp(tau * (S.at(i, j) - mx)) / z;
        }
    } else {
        for (int j = 0; j < m; ++j) {
            double mx = S.at(0, j);
            for (int i = 1; i < n; ++i) mx = std::max(mx, S.at(i, j));
            double z = 0.0;
            for (int i = 0; i < n; ++i) z += std::exp(tau * (S.at(i, j) - mx));
            for (int i = 0; i < n; ++i) out.at(i, j) = std::exp(tau * (S.at(i, j) - mx)) / z;
        }
    }
    return out;
}

struct ImageSeekerParams {
    TensorF logit_scale;  // 1×1, init 1/0.07, kept in (0, 100] by the step clamp
    double tau = 5.0;

    ImageSeekerParams() : logit_scale({1, 1}, 14.2857) { logit_scale.requires_grad = true; }

    void clamp() {
        double& l = logit_scale.data[0];
        l = std::min(l, 100.0);
        if (l <= 0.0) l = 1e-6;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".logit_scale", logit_scale);
    }
};

// Symmetric InfoNCE over prior-refined cosine logits; diagonal pairs are the
// positives. Cross-entropy is computed as logsumexp − diagonal for stability.
// The overload taking explicit priors treats them as constants — this is the
// loss at a frozen prior, which is also the surface finite differences see.
inline Value image_seek_loss(Tape& t, Value S, ImageSeekerParams& params, const TensorF& prior_q2v,
                             const TensorF& prior_v2q) {
    const auto& ss = t.shape(S);
    if (ss[0] != ss[1] || ss[0] < 1) {
        throw std::invalid_argument("image_seek_loss: S must be square and non-empty, got " +
                                    shape_str(ss));
    }
    const int B = ss[0];
    if (prior_q2v.shape != ss || prior_v2q.shape != ss) {
        throw std::invalid_argument("image_seek_loss: prior shape mismatch");
    }
    Value m_q2v = t.constant(prior_q2v);
    Value m_v2q = t.constant(prior_v2q);
    Value l = t.leaf(params.logit_scale);
    TensorF eye({B, B});
    for (int i = 0; i < B; ++i) eye.at(i, i) = 1.0;
    Value eye_v = t.constant(eye);

    Value z_q2v = t.mul(t.mul(S, m_q2v), l);
    Value z_v2q = t.mul(t.mul(S, m_v2q), l);
    // q2v: distribution over vision items per query → reduce along axis 0.
    Value loss_q2v = t.mean(t.sub(t.logsumexp(z_q2v, 0), t.sum(t.mul(z_q2v, eye_v), 0)), 1);
    // v2q: distribution over queries per vision item → reduce along axis 1.
    Value loss_v2q = t.mean(t.sub(t.logsumexp(z_v2q, 1), t.sum(t.mul(z_v2q, eye_v), 1)), 0);
    return t.scale(t.add(loss_q2v, loss_v2q), 0.5);
}

inline Value image_seek_loss(Tape& t, Value S, ImageSeekerParams& params) {
    const auto& ss = t.shape(S);
    if (ss.size() != 2 || ss[0] != ss[1] || ss[0] < 1) {
        throw std::invalid_argument("image_seek_loss: S must be square and non-empty, got " +
                                    shape_str(ss));
    }
    TensorF s_const(ss);
    s_const.data = t.val(S);
    return image_seek_loss(t, S, params, prior_matrix(s_const, params.tau, PriorDirection::q2v),
                           prior_matrix(s_const, params.tau, PriorDirection::v2q));
}

inline Value coop_loss(Tape& t, Value img_loss, Value obj_loss, double lambda_co) {
    if (lambda_co < 0.0) throw std::invalid_argument("coop_loss: lambda_co must be >= 0");
    return t.add(t.scale(img_loss, lambda_co), obj_loss);
}

// Fusion transformer over [LOC; visual tokens; query tokens] with modal-type
// and per-layer position embeddings added to every layer input; a 3-layer MLP
// with sigmoid output regresses the box from the LOC state.
struct ObjectSeekerParams {
    int d = 0;
    int n_visual = 0;
    int max_query = 0;
    TensorF loc_token;  // 1×d
    TensorF modal_emb;  // 3×d: loc / visual / textual
    std::vector<TensorF> pos_emb;
    std::vector<BlockParams> layers;
    LinearParams head1, head2, head3;

    ObjectSeekerParams() = default;

    ObjectSeekerParams(int d_, int n_visual_, int max_query_, Rng& rng, int n_layers = 3, int heads = 4)
        : d(d_), n_visual(n_visual_), max_query(max_query_) {
        loc_token = init_embedding(1, d_, rng);
        modal_emb = init_embedding(3, d_, rng);
        for (int l = 0; l < n_layers; ++l) {
            pos_emb.push_back(init_embedding(1 + n_visual_ + max_query_, d_, rng));
            layers.emplace_back(d_, heads, rng);
        }
        head1 = LinearParams(d_, d_, rng);
        head2 = LinearParams(d_, d_, rng);
        head3 = LinearParams(d_, 4, rng);
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".loc_token", loc_token);
        f(prefix + ".modal_emb", modal_emb);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            f(prefix + ".pos_emb" + std::to_string(l), pos_emb[l]);
            layers[l].visit(prefix + ".layer" + std::to_string(l), f);
        }
        head1.visit(prefix + ".head1", f);
        head2.visit(prefix + ".head2", f);
        head3.visit(prefix + ".head3", f);
    }
};

struct ObjectSeekOut {
    Value box;    // 1×4 sigmoid (x,y,w,h)
    Value f_loc;  // 1×d LOC output state
};

inline ObjectSeekOut object_seek(Tape& t, ObjectSeekerParams& p, Value v_tokens, Value q_tokens) {
    const auto& vs = t.shape(v_tokens);
    const auto& qs = t.shape(q_tokens);
    if (vs[1] != p.d || qs[1] != p.d) {
        throw std::invalid_argument("object_seek: token dim mismatch, params expect d=" +
                                    std::to_string(p.d) + " got " + shape_str(vs) + " and " +
                                    shape_str(qs));
    }
    if (vs[0] != p.n_visual) {
        throw std::invalid_argument("object_seek: expected " + std::to_string(p.n_visual) +
                                    " visual tokens, got " + std::to_string(vs[0]));
    }
    if (qs[0] > p.max_query) {
        throw std::invalid_argument("object_seek: query length " + std::to_string(qs[0]) +
                                    " exceeds capacity " + std::to_string(p.max_query));
    }
    const int total = 1 + vs[0] + qs[0];
    std::vector<int> modal_rows(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i) modal_rows[static_cast<std::size_t>(i)] = i == 0 ? 0 : (i <= vs[0] ? 1 : 2);
    std::vector<int> pos_rows(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i) {
        // query positions start right after the visual capacity so they do not
        // shift when n_visual is fixed and the query is shorter than max.
        pos_rows[static_cast<std::size_t>(i)] = i <= vs[0] ? i : (1 + p.n_visual + (i - 1 - vs[0]));
    }
    // The locator row enters as loc_token + mean(query): seeding it with the
    // query summary makes its attention selective over visual content from
    // the first step, instead of waiting for a near-zero token to grow.
    Value x = t.concat(
        {t.add(t.leaf(p.loc_token), t.mean(q_tokens, 0)), v_tokens, q_tokens}, 0);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        Value modal = t.gather_rows(t.leaf(p.modal_emb), modal_rows);
        Value pos = t.gather_rows(t.leaf(p.pos_emb[l]), pos_rows);
        x = transformer_block(t, p.layers[l], t.add(t.add(x, modal), pos));
    }
    Value f_loc = t.slice(x, 0, 0, 1);
    Value h = t.gelu(linear(t, p.head1, f_loc));
    h = t.gelu(linear(t, p.head2, h));
    Value box = t.sigmoid(linear(t, p.head3, h));
    return ObjectSeekOut{box, f_loc};
}

// R@K per direction; ties rank the lower gallery index first. Results are
// percentages in [0,100].
inline std::map<int, double> rank_retrieval(const TensorF& sims, const std::vector<int>& truth,
                                            const std::vector<int>& ks) {
    if (sims.shape.size() != 2) throw std::invalid_argument("rank_retrieval: sims must be rank 2");
    const int nq = sims.shape[0], ng = sims.shape[1];
    if (static_cast<int>(truth.size()) != nq) {
        throw std::invalid_argument("rank_retrieval: truth size mismatch");
    }
    for (int t : truth) {
        if (t < 0 || t >= ng) {
            throw std::invalid_argument("rank_retrieval: truth index " + std::to_string(t) +
                                        " out of range for gallery size " + std::to_string(ng));
        }
    }
    std::map<int, double> out;
    for (int k : ks) out[k] = 0.0;
    for (int q = 0; q < nq; ++q) {
        const double s_true = sims.at(q, truth[q]);
        int rank = 1;
        for (int g = 0; g < ng; ++g) {
            if (g == truth[q]) continue;
            const double s = sims.at(q, g);
            if (s > s_true || (s == s_true && g < truth[q])) ++rank;
        }
        for (int k : ks) {
            if (rank <= k) out[k] += 1.0;
        }
    }
    for (int k : ks) out[k] = 100.0 * out[k] / nq;
    return out;
}

}  // namespace prodseek
