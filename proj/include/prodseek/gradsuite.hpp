#pragma once

#include <functional>
#include <string>
#include <vector>

#include "prodseek/gradcheck.hpp"
#include "prodseek/model.hpp"
#include "prodseek/pipeline.hpp"

namespace prodseek {

struct GradCaseResult {
    std::string name;
    double max_rel_err = 0.0;
};

// Finite-difference check of every training loss against the tape's analytic
// gradients, over all model parameters, on a deliberately tiny model. The MMD
// kernel base is pinned (the median heuristic is a stop-gradient by design,
// which central differences cannot represent).
inline std::vector<GradCaseResult> run_grad_suite(std::uint64_t seed = 9001) {
    ModelConfig mc;
    mc.enc.patch_size = 4;
    mc.enc.stages = 2;
    mc.enc.stage_dims = {4, 8};
    mc.enc.stage_heads = {1, 2};
    mc.enc.d = 8;
    mc.enc.text_layers = 1;
    mc.enc.text_heads = 2;
    mc.enc.vocab_size = 12;
    mc.enc.max_len = 5;
    mc.image_h = mc.image_w = 16;
    mc.fusion_layers = 1;
    mc.fusion_heads = 2;
    mc.l_init = 2.0;  // keep the contrastive softmax well away from saturation
    mc.validate();

    Rng rng(seed);
    Model model(mc, rng);
    std::vector<TensorF*> params = model.params();

    auto rand_image = [&] {
        Image img(mc.image_h, mc.image_w);
        for (double& v : img.data) v = rng.uniform();
        return img;
    };
    auto rand_query = [&] {
        std::vector<int> ids(static_cast<std::size_t>(rng.uniform_int(2, mc.enc.max_len)));
        for (int& id : ids) id = rng.uniform_int(0, mc.enc.vocab_size - 1);
        return ids;
    };
    auto rand_box = [&] {
        return BoxXYWH{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.15, 0.35),
                       rng.uniform(0.15, 0.35)};
    };

    const int B = 2;
    std::vector<Image> src_imgs, tgt_imgs;
    std::vector<std::vector<int>> src_qs, tgt_qs;
    std::vector<BoxXYWH> gt_boxes, pseudo_boxes;
    for (int i = 0; i < B; ++i) {
        src_imgs.push_back(rand_image());
        tgt_imgs.push_back(rand_image());
        src_qs.push_back(rand_query());
        tgt_qs.push_back(rand_query());
        gt_boxes.push_back(rand_box());
        pseudo_boxes.push_back(rand_box());
    }

    KernelSpec kernels;
    kernels.fixed_base = 1.5;
    DAWeights weights;
    weights.lambda_dv = 0.8;
    weights.lambda_dq = 1.1;
    weights.lambda_po = 0.9;
    const double lambda_co = 0.7;

    struct SideGraph {
        std::vector<Encoding> vis, txt;
        std::vector<Value> boxes, f_locs;
    };
    auto encode_side = [&](Tape& t, const std::vector<Image>& imgs,
                           const std::vector<std::vector<int>>& qs) {
        SideGraph g;
        for (int i = 0; i < B; ++i) {
            Encoding ev = encode_image(t, model.visual, mc.enc, imgs[static_cast<std::size_t>(i)]);
            Encoding eq = encode_query(t, model.text, mc.enc, qs[static_cast<std::size_t>(i)]);
            ObjectSeekOut os = object_seek(t, model.object_seeker, ev.tokens, eq.tokens);
            g.boxes.push_back(os.box);
            g.f_locs.push_back(os.f_loc);
            g.vis.push_back(std::move(ev));
            g.txt.push_back(std::move(eq));
        }
        return g;
    };
    auto reps_of = [&](Tape& t, const std::vector<Encoding>& es) {
        std::vector<Value> rows;
        for (const Encoding& e : es) rows.push_back(e.rep);
        return t.concat(rows, 0);
    };

    // The dual-softmax prior is gradient-stopped inside the retrieval loss, so
    // the checkable surface is the loss at the prior frozen to its value at
    // the unperturbed parameters.
    TensorF frozen_q2v, frozen_v2q;
    {
        Tape t;
        SideGraph g = encode_side(t, src_imgs, src_qs);
        Value S = similarity_matrix(t, reps_of(t, g.vis), reps_of(t, g.txt));
        TensorF sc({B, B});
        sc.data = t.val(S);
        frozen_q2v = prior_matrix(sc, model.image_seeker.tau, PriorDirection::q2v);
        frozen_v2q = prior_matrix(sc, model.image_seeker.tau, PriorDirection::v2q);
    }
    auto imgs_loss = [&](Tape& t, const SideGraph& g) {
        return image_seek_loss(t, similarity_matrix(t, reps_of(t, g.vis), reps_of(t, g.txt)),
                               model.image_seeker, frozen_q2v, frozen_v2q);
    };
    auto objs_loss = [&](Tape& t, const SideGraph& g) {
        std::vector<Value> ls;
        for (int i = 0; i < B; ++i) {
            const BoxXYWH& b = gt_boxes[static_cast<std::size_t>(i)];
            ls.push_back(object_seek_loss(t, g.boxes[static_cast<std::size_t>(i)],
                                          t.constant({1, 4}, {b.x, b.y, b.w, b.h})));
        }
        return t.mean(t.concat(ls, 0), 0);
    };
    auto pobjs_loss = [&](Tape& t, const SideGraph& g) {
        std::vector<Value> ls;
        for (int i = 0; i < B; ++i) {
            ls.push_back(l_pobjs(t, g.boxes[static_cast<std::size_t>(i)],
                                 pseudo_boxes[static_cast<std::size_t>(i)]));
        }
        return t.mean(t.concat(ls, 0), 0);
    };
    auto disv_loss = [&](Tape& t, const SideGraph& s, const SideGraph& g) {
        return l_disv(t, stack_encodings(t, s.vis), stack_encodings(t, g.vis), kernels);
    };
    auto disq_loss = [&](Tape& t, const SideGraph& s, const SideGraph& g) {
        return l_disq(t, stack_encodings(t, s.txt), stack_encodings(t, g.txt), kernels);
    };
    auto diso_loss = [&](Tape& t, const SideGraph& s, const SideGraph& g) {
        return l_diso(t, stack_rows(t, s.f_locs), stack_rows(t, g.f_locs), kernels);
    };
    auto da_loss = [&](Tape& t, const SideGraph& s, const SideGraph& g) {
        return l_da(t, disv_loss(t, s, g), disq_loss(t, s, g), diso_loss(t, s, g), weights);
    };

    using Builder = std::function<Value(Tape&)>;
    std::vector<std::pair<std::string, Builder>> cases;
    cases.emplace_back("image_seek", [&](Tape& t) { return imgs_loss(t, encode_side(t, src_imgs, src_qs)); });
    cases.emplace_back("object_seek", [&](Tape& t) { return objs_loss(t, encode_side(t, src_imgs, src_qs)); });
    cases.emplace_back("coop", [&](Tape& t) {
        SideGraph g = encode_side(t, src_imgs, src_qs);
        return coop_loss(t, imgs_loss(t, g), objs_loss(t, g), lambda_co);
    });
    cases.emplace_back("dis_visual", [&](Tape& t) {
        return disv_loss(t, encode_side(t, src_imgs, src_qs), encode_side(t, tgt_imgs, tgt_qs));
    });
    cases.emplace_back("dis_query", [&](Tape& t) {
        return disq_loss(t, encode_side(t, src_imgs, src_qs), encode_side(t, tgt_imgs, tgt_qs));
    });
    cases.emplace_back("dis_object", [&](Tape& t) {
        return diso_loss(t, encode_side(t, src_imgs, src_qs), encode_side(t, tgt_imgs, tgt_qs));
    });
    cases.emplace_back("domain_align", [&](Tape& t) {
        return da_loss(t, encode_side(t, src_imgs, src_qs), encode_side(t, tgt_imgs, tgt_qs));
    });
    cases.emplace_back("pseudo_object", [&](Tape& t) {
        return pobjs_loss(t, encode_side(t, tgt_imgs, tgt_qs));
    });
    cases.emplace_back("knowledge_transfer", [&](Tape& t) {
        SideGraph s = encode_side(t, src_imgs, src_qs);
        SideGraph g = encode_side(t, tgt_imgs, tgt_qs);
        return l_kt(t, da_loss(t, s, g), pobjs_loss(t, g), weights.lambda_po);
    });

    std::vector<GradCaseResult> results;
    for (auto& [name, build] : cases) {
        // Analytic pass: every parameter is a leaf so untouched ones report
        // exact zero gradients, matching the finite-difference view.
        std::vector<std::vector<double>> analytic;
        {
            Tape t;
            for (TensorF* p : params) t.leaf(*p);
            Value loss = build(t);
            zero_grads(params);
            t.backward(loss);
            for (TensorF* p : params) analytic.push_back(*p->grad);
        }
        auto f = [&]() {
            Tape t;
            return t.scalar_value(build(t));
        };
        std::vector<std::vector<double>> numeric = finite_diff_grad(f, params);
        double worst = 0.0;
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            for (std::size_t k = 0; k < analytic[pi].size(); ++k) {
                worst = std::max(worst, grad_rel_err(analytic[pi][k], numeric[pi][k]));
            }
        }
        results.push_back({name, worst});
    }
    return results;
}

}  // namespace prodseek
