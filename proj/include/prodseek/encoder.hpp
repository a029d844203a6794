#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "prodseek/autodiff.hpp"
#include "prodseek/image.hpp"
#include "prodseek/nn.hpp"
#include "prodseek/rng.hpp"
#include "prodseek/tensor.hpp"

namespace prodseek {

struct EncoderConfig {
    int patch_size = 4;
    int stages = 4;
    std::vector<int> stage_dims = {16, 32, 64, 128};
    std::vector<int> stage_heads = {2, 2, 4, 4};
    int d = 64;  // common space both streams project into
    int text_layers = 2;
    int text_heads = 4;
    int vocab_size = 0;
    int max_len = 0;

    void validate() const {
        if (stages < 1) throw std::invalid_argument("EncoderConfig: stages must be >= 1");
        if (static_cast<int>(stage_dims.size()) != stages) {
            throw std::invalid_argument("EncoderConfig: stage_dims length must equal stages");
        }
        if (static_cast<int>(stage_heads.size()) != stages) {
            throw std::invalid_argument("EncoderConfig: stage_heads length must equal stages");
        }
        for (int s = 0; s + 1 < stages; ++s) {
            if (stage_dims[s + 1] != 2 * stage_dims[s]) {
                throw std::invalid_argument("EncoderConfig: stage_dims must double each stage");
            }
        }
        for (int s = 0; s < stages; ++s) {
            if (stage_dims[s] <= 0 || stage_heads[s] <= 0 || stage_dims[s] % stage_heads[s] != 0) {
                throw std::invalid_argument("EncoderConfig: stage " + std::to_string(s) +
                                            " heads must divide its width");
            }
        }
        if (patch_size <= 0) throw std::invalid_argument("EncoderConfig: patch_size must be positive");
        if (d <= 0) throw std::invalid_argument("EncoderConfig: d must be positive");
        if (text_layers < 1) throw std::invalid_argument("EncoderConfig: text_layers must be >= 1");
        if (text_heads <= 0 || d % text_heads != 0) {
            throw std::invalid_argument("EncoderConfig: text_heads must divide d");
        }
        if (vocab_size <= 0) throw std::invalid_argument("EncoderConfig: vocab_size must be set");
        if (max_len <= 0) throw std::invalid_argument("EncoderConfig: max_len must be set");
    }
};

// Flattens non-overlapping patch_size×patch_size patches into rows
// (row-major over the patch grid; pixels row-major, channel-last inside a
// patch). Projection to the first stage width happens in the encoder.
inline TensorF patchify(const Image& img, int patch_size) {
    if (patch_size <= 0) throw std::invalid_argument("patchify: patch_size must be positive");
    if (img.height % patch_size != 0 || img.width % patch_size != 0) {
        throw std::invalid_argument("patchify: image " + std::to_string(img.height) + "x" +
                                    std::to_string(img.width) + " not divisible by patch size " +
                                    std::to_string(patch_size));
    }
    const int gh = img.height / patch_size;
    const int gw = img.width / patch_size;
    const int cin = patch_size * patch_size * 3;
    TensorF out({gh * gw, cin});
    std::size_t o = 0;
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            for (int py = 0; py < patch_size; ++py) {
                for (int px = 0; px < patch_size; ++px) {
                    for (int c = 0; c < 3; ++c) {
                        out.data[o++] = img.at(gy * patch_size + py, gx * patch_size + px, c);
                    }
                }
            }
        }
    }
    return out;
}

// Concatenates each 2×2 grid neighborhood (4C) and projects to 2C.
inline Value patch_merge(Tape& t, Value tokens, int h, int w, LinearParams& proj) {
    const auto& s = t.shape(tokens);
    if (s[0] != h * w) {
        throw std::invalid_argument("patch_merge: token count " + std::to_string(s[0]) +
                                    " does not match grid " + std::to_string(h) + "x" + std::to_string(w));
    }
    if (h % 2 != 0 || w % 2 != 0) {
        throw std::invalid_argument("patch_merge: grid " + std::to_string(h) + "x" + std::to_string(w) +
                                    " must have even sides");
    }
    std::vector<int> order;
    order.reserve(static_cast<std::size_t>(h) * w);
    for (int gy = 0; gy < h / 2; ++gy) {
        for (int gx = 0; gx < w / 2; ++gx) {
            const int r = 2 * gy * w + 2 * gx;
            order.push_back(r);
            order.push_back(r + 1);
            order.push_back(r + w);
            order.push_back(r + w + 1);
        }
    }
    Value grouped = t.reshape(t.gather_rows(tokens, order), {h * w / 4, 4 * s[1]});
    return linear(t, proj, grouped);
}

// rep: 1×d, tokens: N×d; the rep row is never part of tokens.
struct Encoding {
    Value rep;
    Value tokens;
};

// Hierarchical visual stream: per-stage learned position embeddings + one
// pre-LN attention block per stage, patch merging between stages, and a
// learnable rep token that joins attention only in the last stage.
struct VisualEncoderParams {
    int image_h = 0;
    int image_w = 0;
    LinearParams patch_proj;
    std::vector<TensorF> pos;  // stage s: N_s × stage_dims[s]
    std::vector<BlockParams> blocks;
    std::vector<LinearParams> merges;  // 4·C_s → C_{s+1}
    TensorF rep_token;                 // 1 × stage_dims.back()
    LinearParams out_proj;             // stage_dims.back() → d

    VisualEncoderParams() = default;

    VisualEncoderParams(const EncoderConfig& cfg, int image_h_, int image_w_, Rng& rng)
        : image_h(image_h_), image_w(image_w_) {
        cfg.validate();
        const int down = cfg.patch_size << (cfg.stages - 1);
        if (image_h_ % down != 0 || image_w_ % down != 0) {
            throw std::invalid_argument("VisualEncoderParams: image " + std::to_string(image_h_) + "x" +
                                        std::to_string(image_w_) + " not divisible by " +
                                        std::to_string(down));
        }
        patch_proj = LinearParams(cfg.patch_size * cfg.patch_size * 3, cfg.stage_dims[0], rng);
        int gh = image_h_ / cfg.patch_size;
        int gw = image_w_ / cfg.patch_size;
        for (int s = 0; s < cfg.stages; ++s) {
            pos.push_back(init_pos_sincos(gh, gw, cfg.stage_dims[s]));
            blocks.emplace_back(cfg.stage_dims[s], cfg.stage_heads[s], rng);
            if (s + 1 < cfg.stages) {
                merges.emplace_back(4 * cfg.stage_dims[s], cfg.stage_dims[s + 1], rng);
                gh /= 2;
                gw /= 2;
            }
        }
        rep_token = init_embedding(1, cfg.stage_dims.back(), rng);
        out_proj = LinearParams(cfg.stage_dims.back(), cfg.d, rng);
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        patch_proj.visit(prefix + ".patch_proj", f);
        for (std::size_t s = 0; s < pos.size(); ++s) {
            f(prefix + ".pos" + std::to_string(s), pos[s]);
            blocks[s].visit(prefix + ".block" + std::to_string(s), f);
            if (s < merges.size()) merges[s].visit(prefix + ".merge" + std::to_string(s), f);
        }
        f(prefix + ".rep_token", rep_token);
        out_proj.visit(prefix + ".out_proj", f);
    }
};

inline Encoding encode_image(Tape& t, VisualEncoderParams& p, const EncoderConfig& cfg,
                             const Image& img) {
    if (img.height != p.image_h || img.width != p.image_w) {
        throw std::invalid_argument("encode_image: image " + std::to_string(img.height) + "x" +
                                    std::to_string(img.width) + " does not match encoder built for " +
                                    std::to_string(p.image_h) + "x" + std::to_string(p.image_w));
    }
    Value x = linear(t, p.patch_proj, t.constant(patchify(img, cfg.patch_size)));
    int gh = p.image_h / cfg.patch_size;
    int gw = p.image_w / cfg.patch_size;
    for (int s = 0; s < cfg.stages; ++s) {
        x = t.add(x, t.leaf(p.pos[s]));
        if (s + 1 < cfg.stages) {
            x = transformer_block(t, p.blocks[s], x);
            x = patch_merge(t, x, gh, gw, p.merges[s]);
            gh /= 2;
            gw /= 2;
        } else {
            x = t.concat({t.leaf(p.rep_token), x}, 0);
            x = transformer_block(t, p.blocks[s], x);
        }
    }
    Value projected = linear(t, p.out_proj, x);
    const int n = gh * gw;
    return Encoding{t.slice(projected, 0, 0, 1), t.slice(projected, 0, 1, n)};
}

// Query stream: token + position embeddings, rep token prepended before every
// layer's attention, final projection to the common space.
struct TextEncoderParams {
    TensorF token_emb;  // vocab × d
    TensorF pos_emb;    // (1+max_len) × d, row 0 belongs to the rep slot
    TensorF rep_token;  // 1 × d
    std::vector<BlockParams> blocks;
    LinearParams out_proj;

    TextEncoderParams() = default;

    TextEncoderParams(const EncoderConfig& cfg, Rng& rng) {
        cfg.validate();
        token_emb = init_embedding(cfg.vocab_size, cfg.d, rng);
        pos_emb = init_embedding(1 + cfg.max_len, cfg.d, rng);
        rep_token = init_embedding(1, cfg.d, rng);
        for (int l = 0; l < cfg.text_layers; ++l) blocks.emplace_back(cfg.d, cfg.text_heads, rng);
        out_proj = LinearParams(cfg.d, cfg.d, rng);
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".token_emb", token_emb);
        f(prefix + ".pos_emb", pos_emb);
        f(prefix + ".rep_token", rep_token);
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            blocks[l].visit(prefix + ".block" + std::to_string(l), f);
        }
        out_proj.visit(prefix + ".out_proj", f);
    }
};

inline Encoding encode_query(Tape& t, TextEncoderParams& p, const EncoderConfig& cfg,
                             const std::vector<int>& ids) {
    if (ids.empty()) throw std::invalid_argument("encode_query: empty query");
    if (static_cast<int>(ids.size()) > cfg.max_len) {
        throw std::invalid_argument("encode_query: query length " + std::to_string(ids.size()) +
                                    " exceeds max_len " + std::to_string(cfg.max_len));
    }
    for (int id : ids) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw std::invalid_argument("encode_query: id " + std::to_string(id) +
                                        " outside vocabulary of size " + std::to_string(cfg.vocab_size));
        }
    }
    const int n = static_cast<int>(ids.size());
    Value x = t.embedding(t.leaf(p.token_emb), ids);
    x = t.concat({t.leaf(p.rep_token), x}, 0);
    x = t.add(x, t.slice(t.leaf(p.pos_emb), 0, 0, n + 1));
    for (auto& block : p.blocks) x = transformer_block(t, block, x);
    Value projected = linear(t, p.out_proj, x);
    return Encoding{t.slice(projected, 0, 0, 1), t.slice(projected, 0, 1, n)};
}

}  // namespace prodseek
