#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prodseek/dtsr.hpp"
#include "prodseek/encoder.hpp"
#include "prodseek/rng.hpp"
#include "prodseek/seekers.hpp"
#include "prodseek/tensor.hpp"

namespace prodseek {

struct ModelConfig {
    EncoderConfig enc;
    int image_h = 64;
    int image_w = 64;
    int fusion_layers = 3;
    int fusion_heads = 4;
    double l_init = 14.2857;
    double tau = 5.0;

    int n_visual_tokens() const {
        const int down = enc.patch_size << (enc.stages - 1);
        return (image_h / down) * (image_w / down);
    }

    void validate() const {
        enc.validate();
        const int down = enc.patch_size << (enc.stages - 1);
        if (image_h % down != 0 || image_w % down != 0) {
            throw std::invalid_argument("ModelConfig: image size must be divisible by " +
                                        std::to_string(down));
        }
        if (fusion_layers < 1 || fusion_heads < 1 || enc.d % fusion_heads != 0) {
            throw std::invalid_argument("ModelConfig: fusion heads must divide d");
        }
        if (!(l_init > 0.0 && l_init <= 100.0)) {
            throw std::invalid_argument("ModelConfig: l_init must lie in (0,100]");
        }
        if (tau < 0.0) throw std::invalid_argument("ModelConfig: tau must be >= 0");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["patch_size"] = enc.patch_size;
        j["stages"] = enc.stages;
        j["stage_dims"] = enc.stage_dims;
        j["stage_heads"] = enc.stage_heads;
        j["d"] = enc.d;
        j["text_layers"] = enc.text_layers;
        j["text_heads"] = enc.text_heads;
        j["vocab_size"] = enc.vocab_size;
        j["max_len"] = enc.max_len;
        j["image_h"] = image_h;
        j["image_w"] = image_w;
        j["fusion_layers"] = fusion_layers;
        j["fusion_heads"] = fusion_heads;
        j["l_init"] = l_init;
        j["tau"] = tau;
        return j;
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.enc.patch_size = j.value("patch_size", c.enc.patch_size);
        c.enc.stages = j.value("stages", c.enc.stages);
        c.enc.stage_dims = j.value("stage_dims", c.enc.stage_dims);
        c.enc.stage_heads = j.value("stage_heads", c.enc.stage_heads);
        c.enc.d = j.value("d", c.enc.d);
        c.enc.text_layers = j.value("text_layers", c.enc.text_layers);
        c.enc.text_heads = j.value("text_heads", c.enc.text_heads);
        c.enc.vocab_size = j.value("vocab_size", c.enc.vocab_size);
        c.enc.max_len = j.value("max_len", c.enc.max_len);
        c.image_h = j.value("image_h", c.image_h);
        c.image_w = j.value("image_w", c.image_w);
        c.fusion_layers = j.value("fusion_layers", c.fusion_layers);
        c.fusion_heads = j.value("fusion_heads", c.fusion_heads);
        c.l_init = j.value("l_init", c.l_init);
        c.tau = j.value("tau", c.tau);
        c.validate();
        return c;
    }
};

// Both encoders plus both seekers; parameter traversal order is fixed by the
// visit sequence, which also fixes optimizer and checkpoint ordering.
struct Model {
    ModelConfig cfg;
    VisualEncoderParams visual;
    TextEncoderParams text;
    ImageSeekerParams image_seeker;
    ObjectSeekerParams object_seeker;

    Model() = default;

    Model(const ModelConfig& cfg_, Rng& rng) : cfg(cfg_) {
        cfg.validate();
        visual = VisualEncoderParams(cfg.enc, cfg.image_h, cfg.image_w, rng);
        text = TextEncoderParams(cfg.enc, rng);
        image_seeker.logit_scale.data[0] = cfg.l_init;
        image_seeker.tau = cfg.tau;
        object_seeker = ObjectSeekerParams(cfg.enc.d, cfg.n_visual_tokens(), cfg.enc.max_len, rng,
                                           cfg.fusion_layers, cfg.fusion_heads);
    }

    template <typename F>
    void visit_params(F&& f) {
        visual.visit("visual", f);
        text.visit("text", f);
        image_seeker.visit("image_seeker", f);
        object_seeker.visit("object_seeker", f);
    }

    std::vector<TensorF*> params() {
        std::vector<TensorF*> out;
        visit_params([&](const std::string&, TensorF& t) { out.push_back(&t); });
        return out;
    }

    std::vector<std::pair<std::string, TensorF*>> named_params() {
        std::vector<std::pair<std::string, TensorF*>> out;
        visit_params([&](const std::string& name, TensorF& t) { out.emplace_back(name, &t); });
        return out;
    }

    // Deep copy used for frozen teacher snapshots (shares no tensors).
    Model clone() const {
        Model m = *this;
        return m;
    }
};

struct Checkpoint {
    Model model;
    nlohmann::json manifest;

    std::string stage() const { return manifest.value("stage", std::string()); }
    int epoch() const { return manifest.value("epoch", 0); }
};

// Layout: <dir>/manifest.json + <dir>/tensors/<param-name>.dtsr, one file per
// named parameter. Payloads are raw f64, so a load reproduces forwards
// bit-identically.
inline void save_checkpoint(Model& model, const std::filesystem::path& dir, const std::string& stage,
                            int epoch, const std::string& rng_state,
                            const nlohmann::json& config_echo = nlohmann::json::object()) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "tensors", ec);
    if (ec) throw std::runtime_error("save_checkpoint: cannot create " + dir.string());
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["stage"] = stage;
    manifest["epoch"] = epoch;
    manifest["rng_state"] = rng_state;
    manifest["model"] = model.cfg.to_json();
    manifest["config"] = config_echo;
    nlohmann::json tensors = nlohmann::json::object();
    model.visit_params([&](const std::string& name, TensorF& t) {
        const std::string rel = "tensors/" + name + ".dtsr";
        dtsr::write(dir / rel, t);
        tensors[name] = rel;
    });
    manifest["tensors"] = tensors;
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot write manifest in " + dir.string());
    out << manifest.dump(2) << '\n';
    if (!out.good()) throw std::runtime_error("save_checkpoint: manifest write failed");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const std::exception& e) {
        throw std::runtime_error("load_checkpoint: bad manifest: " + std::string(e.what()));
    }
    Checkpoint ckpt;
    ckpt.manifest = manifest;
    const ModelConfig cfg = ModelConfig::from_json(manifest.at("model"));
    Rng scratch(0);
    ckpt.model = Model(cfg, scratch);
    const auto& tensors = manifest.at("tensors");
    ckpt.model.visit_params([&](const std::string& name, TensorF& t) {
        if (!tensors.contains(name)) {
            throw std::runtime_error("load_checkpoint: tensor " + name + " missing from manifest");
        }
        TensorF loaded = dtsr::read(dir / tensors.at(name).get<std::string>());
        if (loaded.shape != t.shape) {
            throw std::runtime_error("load_checkpoint: tensor " + name + " has shape " +
                                     shape_str(loaded.shape) + ", expected " + shape_str(t.shape));
        }
        t.data = std::move(loaded.data);
    });
    ckpt.model.image_seeker.tau = cfg.tau;
    return ckpt;
}

}  // namespace prodseek
