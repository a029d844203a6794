#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prodseek/domain_adapt.hpp"
#include "prodseek/model.hpp"
#include "prodseek/optim.hpp"
#include "prodseek/synth_data.hpp"

namespace prodseek {

// ---- dataset plumbing -------------------------------------------------------

struct Dataset {
    DatasetManifest manifest;
    std::vector<Instance> instances;
    std::vector<int> train, val, test;

    const std::vector<int>& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw std::invalid_argument("Dataset: unknown split " + name);
    }

    bool all_have_boxes(const std::vector<int>& idx) const {
        for (int i : idx) {
            if (!instances[static_cast<std::size_t>(i)].box) return false;
        }
        return true;
    }

    bool any_have_boxes() const {
        for (const Instance& inst : instances) {
            if (inst.box) return true;
        }
        return false;
    }
};

inline Dataset load_split_dataset(const std::filesystem::path& manifest_path, bool load_images = true) {
    Dataset ds;
    auto [man, instances] = load_dataset(manifest_path, load_images);
    ds.manifest = std::move(man);
    ds.instances = std::move(instances);
    for (int i = 0; i < static_cast<int>(ds.instances.size()); ++i) {
        const std::string& s = ds.instances[static_cast<std::size_t>(i)].split;
        (s == "train" ? ds.train : s == "val" ? ds.val : ds.test).push_back(i);
    }
    return ds;
}

// ---- config ------------------------------------------------------------------

struct TrainConfig {
    ModelConfig model;
    int batch_size = 32;
    double lr = 1e-3;
    bool cosine_decay = true;
    int supervised_epochs = 10;
    int stage1_epochs = 10;
    int stage2_epochs = 10;
    int stage3_epochs = 10;
    double lambda_co = 1.0;
    DAWeights da;
    KernelSpec kernels;
    double theta = 0.5;
    double k_start = 20.0;
    double k_step = 10.0;
    double k_cap = 60.0;
    std::uint64_t seed = 1;
    std::string source_manifest;
    std::string target_manifest;
    std::string out_dir = "run_out";
    bool use_aligner = true;       // ablation switch: drop the MMD terms entirely
    bool test_select_none = false;  // test hook: force an empty stage-3 selection

    TrainConfig() {
        model.enc.vocab_size = static_cast<int>(default_vocabulary().words.size());
        model.enc.max_len = 8;
    }

    void validate() const {
        model.validate();
        da.validate();
        kernels.validate();
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (!(lr > 0)) throw std::invalid_argument("TrainConfig: lr must be positive");
        if (supervised_epochs < 1 || stage1_epochs < 1) {
            throw std::invalid_argument("TrainConfig: supervised/stage1 epochs must be >= 1");
        }
        // Stages 2 and 3 accept zero epochs so ablation arms (source-only,
        // MMD-only, pseudo-only) are expressible as configs.
        if (stage2_epochs < 0 || stage3_epochs < 0) {
            throw std::invalid_argument("TrainConfig: stage epochs must be >= 0");
        }
        if (lambda_co < 0) throw std::invalid_argument("TrainConfig: lambda_co must be >= 0");
        SelectionPolicy{theta, k_start}.validate();
        if (k_step < 0 || k_cap < k_start) throw std::invalid_argument("TrainConfig: bad k schedule");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["model"] = model.to_json();
        j["batch_size"] = batch_size;
        j["lr"] = lr;
        j["cosine_decay"] = cosine_decay;
        j["supervised_epochs"] = supervised_epochs;
        j["stage1_epochs"] = stage1_epochs;
        j["stage2_epochs"] = stage2_epochs;
        j["stage3_epochs"] = stage3_epochs;
        j["lambda_co"] = lambda_co;
        j["lambda_o"] = da.lambda_o;
        j["lambda_dv"] = da.lambda_dv;
        j["lambda_dq"] = da.lambda_dq;
        j["lambda_po"] = da.lambda_po;
        j["kernel_multipliers"] = kernels.multipliers;
        j["theta"] = theta;
        j["k_start"] = k_start;
        j["k_step"] = k_step;
        j["k_cap"] = k_cap;
        j["seed"] = seed;
        j["source_manifest"] = source_manifest;
        j["target_manifest"] = target_manifest;
        j["out_dir"] = out_dir;
        j["use_aligner"] = use_aligner;
        j["test_select_none"] = test_select_none;
        return j;
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
        c.batch_size = j.value("batch_size", c.batch_size);
        c.lr = j.value("lr", c.lr);
        c.cosine_decay = j.value("cosine_decay", c.cosine_decay);
        c.supervised_epochs = j.value("supervised_epochs", c.supervised_epochs);
        c.stage1_epochs = j.value("stage1_epochs", c.stage1_epochs);
        c.stage2_epochs = j.value("stage2_epochs", c.stage2_epochs);
        c.stage3_epochs = j.value("stage3_epochs", c.stage3_epochs);
        c.lambda_co = j.value("lambda_co", c.lambda_co);
        c.da.lambda_o = j.value("lambda_o", c.da.lambda_o);
        c.da.lambda_dv = j.value("lambda_dv", c.da.lambda_dv);
        c.da.lambda_dq = j.value("lambda_dq", c.da.lambda_dq);
        c.da.lambda_po = j.value("lambda_po", c.da.lambda_po);
        if (j.contains("kernel_multipliers")) {
            c.kernels.multipliers = j.at("kernel_multipliers").get<std::vector<double>>();
        }
        c.theta = j.value("theta", c.theta);
        c.k_start = j.value("k_start", c.k_start);
        c.k_step = j.value("k_step", c.k_step);
        c.k_cap = j.value("k_cap", c.k_cap);
        c.seed = j.value("seed", c.seed);
        c.source_manifest = j.value("source_manifest", c.source_manifest);
        c.target_manifest = j.value("target_manifest", c.target_manifest);
        c.out_dir = j.value("out_dir", c.out_dir);
        c.use_aligner = j.value("use_aligner", c.use_aligner);
        c.test_select_none = j.value("test_select_none", c.test_select_none);
        c.validate();
        return c;
    }
};

// ---- batch graphs --------------------------------------------------------------

// One tape-resident forward over a batch of instances. Reps are stacked for
// the retrieval loss; fusion adds per-instance predicted boxes and LOC states.
struct BatchGraph {
    std::vector<int> idx;
    std::vector<Encoding> vis, txt;
    Value v_reps, q_reps;
    std::vector<Value> pred_boxes;
    std::vector<Value> f_locs;
};

inline BatchGraph build_batch_graph(Tape& t, Model& m, const Dataset& ds, const std::vector<int>& idx,
                                    bool fusion) {
    if (idx.empty()) throw std::invalid_argument("build_batch_graph: empty batch");
    BatchGraph g;
    g.idx = idx;
    std::vector<Value> vr, qr;
    for (int i : idx) {
        const Instance& inst = ds.instances[static_cast<std::size_t>(i)];
        Encoding ev = encode_image(t, m.visual, m.cfg.enc, inst.image);
        Encoding eq = encode_query(t, m.text, m.cfg.enc, inst.query_ids);
        vr.push_back(ev.rep);
        qr.push_back(eq.rep);
        if (fusion) {
            ObjectSeekOut os = object_seek(t, m.object_seeker, ev.tokens, eq.tokens);
            g.pred_boxes.push_back(os.box);
            g.f_locs.push_back(os.f_loc);
        }
        g.vis.push_back(std::move(ev));
        g.txt.push_back(std::move(eq));
    }
    g.v_reps = t.concat(vr, 0);
    g.q_reps = t.concat(qr, 0);
    return g;
}

inline Value graph_objs_loss(Tape& t, const BatchGraph& g, const Dataset& ds) {
    if (g.pred_boxes.empty()) throw std::logic_error("graph_objs_loss: batch built without fusion");
    std::vector<Value> losses;
    for (std::size_t k = 0; k < g.idx.size(); ++k) {
        const Instance& inst = ds.instances[static_cast<std::size_t>(g.idx[k])];
        if (!inst.box) throw std::invalid_argument("graph_objs_loss: instance " + inst.id + " has no box");
        Value gt = t.constant({1, 4}, {inst.box->x, inst.box->y, inst.box->w, inst.box->h});
        losses.push_back(object_seek_loss(t, g.pred_boxes[k], gt));
    }
    return t.mean(t.concat(losses, 0), 0);
}

inline Value graph_imgs_loss(Tape& t, Model& m, const BatchGraph& g) {
    Value s = similarity_matrix(t, g.v_reps, g.q_reps);
    return image_seek_loss(t, s, m.image_seeker);
}

inline Value graph_pobjs_loss(Tape& t, const BatchGraph& g, const std::vector<BoxXYWH>& pseudo) {
    if (g.pred_boxes.size() != pseudo.size()) {
        throw std::invalid_argument("graph_pobjs_loss: pseudo box count mismatch");
    }
    std::vector<Value> losses;
    for (std::size_t k = 0; k < pseudo.size(); ++k) {
        losses.push_back(l_pobjs(t, g.pred_boxes[k], pseudo[k]));
    }
    return t.mean(t.concat(losses, 0), 0);
}

inline Value graph_da_loss(Tape& t, const BatchGraph& src, const BatchGraph& tgt, const KernelSpec& spec,
                           const DAWeights& w) {
    if (src.f_locs.empty() || tgt.f_locs.empty()) {
        throw std::logic_error("graph_da_loss: both batches need fusion outputs");
    }
    Value disv = l_disv(t, stack_encodings(t, src.vis), stack_encodings(t, tgt.vis), spec);
    Value disq = l_disq(t, stack_encodings(t, src.txt), stack_encodings(t, tgt.txt), spec);
    Value diso = l_diso(t, stack_rows(t, src.f_locs), stack_rows(t, tgt.f_locs), spec);
    return l_da(t, disv, disq, diso, w);
}

// ---- evaluation ------------------------------------------------------------------

struct RetrievalResult {
    std::map<int, double> t2v;
    std::map<int, double> v2t;
};

struct GroundingResult {
    double miou = 0.0;
    double pr1 = 0.0;
};

// Metric core shared with its oracle tests: mean IoU ×100 and the percentage
// of pairs with IoU strictly above 0.5.
inline GroundingResult grounding_from_pairs(const std::vector<BoxXYWH>& pred,
                                            const std::vector<BoxXYWH>& gt) {
    if (pred.size() != gt.size() || pred.empty()) {
        throw std::invalid_argument("grounding_from_pairs: need equal non-empty box lists");
    }
    GroundingResult r;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double v = iou(pred[i], gt[i]);
        r.miou += v;
        if (v > 0.5) r.pr1 += 1.0;
    }
    r.miou = 100.0 * r.miou / static_cast<double>(pred.size());
    r.pr1 = 100.0 * r.pr1 / static_cast<double>(pred.size());
    return r;
}

// Detached rep features, one forward per instance.
inline std::pair<std::vector<std::vector<double>>, std::vector<std::vector<double>>> encode_reps(
    Model& m, const Dataset& ds, const std::vector<int>& idx) {
    std::vector<std::vector<double>> v_reps, q_reps;
    v_reps.reserve(idx.size());
    q_reps.reserve(idx.size());
    for (int i : idx) {
        const Instance& inst = ds.instances[static_cast<std::size_t>(i)];
        Tape t;
        v_reps.push_back(t.val(encode_image(t, m.visual, m.cfg.enc, inst.image).rep));
        q_reps.push_back(t.val(encode_query(t, m.text, m.cfg.enc, inst.query_ids).rep));
    }
    return {std::move(v_reps), std::move(q_reps)};
}

inline BoxXYWH predict_box(Tape& t, Model& m, const Instance& inst, Value* f_loc_out = nullptr) {
    Encoding ev = encode_image(t, m.visual, m.cfg.enc, inst.image);
    Encoding eq = encode_query(t, m.text, m.cfg.enc, inst.query_ids);
    ObjectSeekOut os = object_seek(t, m.object_seeker, ev.tokens, eq.tokens);
    if (f_loc_out) *f_loc_out = os.f_loc;
    const auto& b = t.val(os.box);
    return BoxXYWH{b[0], b[1], b[2], b[3]};
}

inline RetrievalResult evaluate_retrieval(Model& m, const Dataset& ds, const std::vector<int>& idx,
                                          const std::vector<int>& ks = {1, 5, 10, 50}) {
    if (idx.size() < 2) throw std::invalid_argument("evaluate_retrieval: split needs at least 2 items");
    auto [v_reps, q_reps] = encode_reps(m, ds, idx);
    std::vector<int> truth(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) truth[i] = static_cast<int>(i);
    RetrievalResult r;
    r.t2v = rank_retrieval(cosine_cross(q_reps, v_reps), truth, ks);
    r.v2t = rank_retrieval(cosine_cross(v_reps, q_reps), truth, ks);
    return r;
}

inline GroundingResult evaluate_grounding(Model& m, const Dataset& ds, const std::vector<int>& idx,
                                          const std::map<std::string, BoxXYWH>* sealed = nullptr) {
    if (idx.empty()) throw std::invalid_argument("evaluate_grounding: empty split");
    std::vector<BoxXYWH> pred, gt;
    pred.reserve(idx.size());
    gt.reserve(idx.size());
    for (int i : idx) {
        const Instance& inst = ds.instances[static_cast<std::size_t>(i)];
        if (inst.box) {
            gt.push_back(*inst.box);
        } else if (sealed) {
            auto it = sealed->find(inst.id);
            if (it == sealed->end()) {
                throw std::invalid_argument("evaluate_grounding: no sealed box for " + inst.id);
            }
            gt.push_back(it->second);
        } else {
            throw std::invalid_argument("evaluate_grounding: instance " + inst.id + " has no box");
        }
        Tape t;
        pred.push_back(predict_box(t, m, inst));
    }
    return grounding_from_pairs(pred, gt);
}

// ---- reports ----------------------------------------------------------------------

namespace detail {

inline void flatten_json(const nlohmann::json& j, const std::string& prefix,
                         std::vector<std::pair<std::string, std::string>>& rows) {
    if (j.is_object()) {
        for (auto it = j.begin(); it != j.end(); ++it) {
            flatten_json(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), rows);
        }
    } else if (j.is_array()) {
        for (std::size_t i = 0; i < j.size(); ++i) {
            flatten_json(j[i], prefix + "[" + std::to_string(i) + "]", rows);
        }
    } else {
        rows.emplace_back(prefix, j.is_string() ? j.get<std::string>() : j.dump());
    }
}

}  // namespace detail

// report.json plus a flat key,value report.csv with identical content.
inline void write_report(const std::filesystem::path& dir, const nlohmann::json& report) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("write_report: cannot create " + dir.string());
    {
        std::ofstream out(dir / "report.json", std::ios::trunc);
        if (!out) throw std::runtime_error("write_report: cannot write report.json");
        out << report.dump(2) << '\n';
    }
    std::vector<std::pair<std::string, std::string>> rows;
    detail::flatten_json(report, "", rows);
    std::ofstream csv(dir / "report.csv", std::ios::trunc);
    if (!csv) throw std::runtime_error("write_report: cannot write report.csv");
    csv << "key,value\n";
    for (const auto& [k, v] : rows) csv << k << ',' << v << '\n';
}

inline nlohmann::json retrieval_json(const RetrievalResult& r) {
    nlohmann::json j;
    for (const auto& [k, v] : r.t2v) j["t2v_r" + std::to_string(k)] = v;
    for (const auto& [k, v] : r.v2t) j["v2t_r" + std::to_string(k)] = v;
    return j;
}

inline nlohmann::json grounding_json(const GroundingResult& g) {
    return nlohmann::json{{"miou", g.miou}, {"pr1", g.pr1}};
}

// ---- training loops -----------------------------------------------------------------

struct TrainResult {
    std::filesystem::path checkpoint_dir;
    nlohmann::json report;
};

namespace detail {

inline std::vector<std::vector<int>> make_batches(const std::vector<int>& order, int batch) {
    std::vector<std::vector<int>> out;
    for (std::size_t pos = 0; pos + static_cast<std::size_t>(batch) <= order.size();
         pos += static_cast<std::size_t>(batch)) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(pos),
                         order.begin() + static_cast<std::ptrdiff_t>(pos + static_cast<std::size_t>(batch)));
    }
    return out;
}

inline std::vector<std::vector<double>> snapshot_params(const std::vector<TensorF*>& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const TensorF* p : params) out.push_back(p->data);
    return out;
}

inline void restore_params(const std::vector<TensorF*>& params,
                           const std::vector<std::vector<double>>& snap) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->data = snap[i];
}

struct EpochLog {
    std::ofstream file;

    EpochLog(const std::filesystem::path& path, const std::string& header) {
        file.open(path, std::ios::trunc);
        if (!file) throw std::runtime_error("cannot open training log " + path.string());
        file << header << '\n';
    }
};

// Runs one optimization step: binds every parameter as a leaf (so unused ones
// get zero grads rather than optimizer errors), builds the loss, backprops,
// steps Adam, clamps the logit scale.
inline double optimizer_step(Model& model, const std::vector<TensorF*>& params, AdamState& adam,
                             double lr, const std::function<Value(Tape&)>& build) {
    Tape t;
    for (TensorF* p : params) t.leaf(*p);
    Value loss = build(t);
    const double value = t.scalar_value(loss);
    zero_grads(params);
    t.backward(loss);
    adam_step(adam, params, lr);
    model.image_seeker.clamp();
    return value;
}

}  // namespace detail

// Fully-supervised cooperative training on a source-domain dataset with
// boxes. Returns the best-val checkpoint (selection: mean of val mIoU and val
// t2v R@1).
inline TrainResult train_supervised(const TrainConfig& cfg) {
    cfg.validate();
    Dataset src = load_split_dataset(cfg.source_manifest);
    if (!src.all_have_boxes(src.train) || !src.all_have_boxes(src.val)) {
        throw std::invalid_argument("train_supervised: dataset without boxes");
    }
    const std::filesystem::path out(cfg.out_dir);
    std::error_code ec;
    std::filesystem::create_directories(out, ec);
    if (ec) throw std::runtime_error("train_supervised: cannot create " + out.string());

    Rng param_rng(derive_seed(cfg.seed, 1));
    Rng order_rng(derive_seed(cfg.seed, 2));
    Model model(cfg.model, param_rng);
    std::vector<TensorF*> params = model.params();
    AdamState adam;

    const auto epoch_batches = [&] {
        std::vector<int> order = src.train;
        order_rng.shuffle(order);
        return detail::make_batches(order, cfg.batch_size);
    };
    const std::int64_t steps_per_epoch = static_cast<std::int64_t>(src.train.size()) / cfg.batch_size;
    const std::int64_t total_steps = steps_per_epoch * cfg.supervised_epochs;

    detail::EpochLog log(out / "train_log.csv",
                         "epoch,stage,loss_imgs,loss_objs,val_miou,val_pr1,val_t2v_r1,selection");
    nlohmann::json curves = nlohmann::json::array();
    double best_sel = -1.0;
    int best_epoch = -1;
    std::vector<std::vector<double>> best_snap;
    std::int64_t step = 0;

    for (int epoch = 1; epoch <= cfg.supervised_epochs; ++epoch) {
        double sum_imgs = 0.0, sum_objs = 0.0;
        std::int64_t n_steps = 0;
        for (const std::vector<int>& batch : epoch_batches()) {
            const double lr = cfg.cosine_decay ? cosine_lr(cfg.lr, step, total_steps) : cfg.lr;
            double imgs_val = 0.0, objs_val = 0.0;
            detail::optimizer_step(model, params, adam, lr, [&](Tape& t) {
                BatchGraph g = build_batch_graph(t, model, src, batch, true);
                Value objs = graph_objs_loss(t, g, src);
                objs_val = t.scalar_value(objs);
                if (cfg.lambda_co == 0.0) return objs;
                Value imgs = graph_imgs_loss(t, model, g);
                imgs_val = t.scalar_value(imgs);
                return coop_loss(t, imgs, objs, cfg.lambda_co);
            });
            sum_imgs += imgs_val;
            sum_objs += objs_val;
            ++step;
            ++n_steps;
        }
        const double mean_imgs = n_steps ? sum_imgs / static_cast<double>(n_steps) : 0.0;
        const double mean_objs = n_steps ? sum_objs / static_cast<double>(n_steps) : 0.0;

        RetrievalResult vr = evaluate_retrieval(model, src, src.val);
        GroundingResult vg = evaluate_grounding(model, src, src.val);
        const double sel = 0.5 * (vg.miou + vr.t2v.at(1));
        log.file << epoch << ",supervised,";
        if (cfg.lambda_co == 0.0) {
            log.file << "";
        } else {
            log.file << mean_imgs;
        }
        log.file << ',' << mean_objs << ',' << vg.miou << ',' << vg.pr1 << ',' << vr.t2v.at(1) << ','
                 << sel << '\n';
        nlohmann::json row;
        row["epoch"] = epoch;
        if (cfg.lambda_co != 0.0) row["loss_imgs"] = mean_imgs;
        row["loss_objs"] = mean_objs;
        row["val"] = {{"miou", vg.miou}, {"pr1", vg.pr1}, {"t2v_r1", vr.t2v.at(1)}};
        curves.push_back(row);
        if (sel > best_sel) {
            best_sel = sel;
            best_epoch = epoch;
            best_snap = detail::snapshot_params(params);
        }
    }
    if (!best_snap.empty()) detail::restore_params(params, best_snap);

    const std::filesystem::path ckpt = out / "checkpoint";
    save_checkpoint(model, ckpt, "supervised", best_epoch, order_rng.save_state(), cfg.to_json());

    nlohmann::json report;
    report["mode"] = "supervised";
    report["config"] = cfg.to_json();
    report["best_epoch"] = best_epoch;
    report["curves"] = curves;
    report["val"]["retrieval"] = retrieval_json(evaluate_retrieval(model, src, src.val));
    report["val"]["grounding"] = grounding_json(evaluate_grounding(model, src, src.val));
    if (src.test.size() >= 2 && src.all_have_boxes(src.test)) {
        report["test"]["retrieval"] = retrieval_json(evaluate_retrieval(model, src, src.test));
        report["test"]["grounding"] = grounding_json(evaluate_grounding(model, src, src.test));
    }
    write_report(out, report);
    return TrainResult{ckpt, report};
}

// Three-stage adaptation: source warm-up on the grounding loss, MMD alignment
// with paired batches, then dynamic pseudo-box self-training with a teacher
// frozen at the end of stage 2. Target boxes must be absent everywhere the
// trainer can see.
inline TrainResult train_pgda(const TrainConfig& cfg) {
    cfg.validate();
    Dataset src = load_split_dataset(cfg.source_manifest);
    Dataset tgt = load_split_dataset(cfg.target_manifest);
    if (!src.all_have_boxes(src.train)) {
        throw std::invalid_argument("train_pgda: source dataset without boxes");
    }
    if (tgt.any_have_boxes()) {
        throw std::invalid_argument("train_pgda: target manifest contains boxes (label leak)");
    }
    const std::filesystem::path out(cfg.out_dir);
    std::error_code ec;
    std::filesystem::create_directories(out, ec);
    if (ec) throw std::runtime_error("train_pgda: cannot create " + out.string());

    Rng param_rng(derive_seed(cfg.seed, 1));
    Rng order_rng(derive_seed(cfg.seed, 2));
    Model model(cfg.model, param_rng);
    std::vector<TensorF*> params = model.params();
    AdamState adam;

    const std::int64_t steps_per_epoch = static_cast<std::int64_t>(src.train.size()) / cfg.batch_size;
    detail::EpochLog log(out / "train_log.csv",
                         "epoch,stage,loss_objs,loss_da,loss_pobjs,loss_total,selected");
    nlohmann::json curves = nlohmann::json::array();

    auto shuffled = [&](const std::vector<int>& idx) {
        std::vector<int> order = idx;
        order_rng.shuffle(order);
        return order;
    };
    auto log_epoch = [&](int epoch, const std::string& stage, double objs, std::optional<double> da_v,
                         std::optional<double> pobjs_v, double total, std::optional<int> selected) {
        log.file << epoch << ',' << stage << ',' << objs << ',';
        if (da_v) log.file << *da_v;
        log.file << ',';
        if (pobjs_v) log.file << *pobjs_v;
        log.file << ',' << total << ',';
        if (selected) log.file << *selected;
        log.file << '\n';
        nlohmann::json row;
        row["epoch"] = epoch;
        row["stage"] = stage;
        row["loss_objs"] = objs;
        if (da_v) row["loss_da"] = *da_v;
        if (pobjs_v) row["loss_pobjs"] = *pobjs_v;
        row["loss_total"] = total;
        if (selected) row["selected"] = *selected;
        curves.push_back(row);
    };

    // Stage 1: cooperative warm-up on source only. Box regression alone never
    // generalizes at this scale — the retrieval term is what teaches the
    // encoders which object a query names — so the warm-up trains the same
    // composite objective as the supervised path.
    {
        const std::int64_t total_steps = steps_per_epoch * cfg.stage1_epochs;
        std::int64_t step = 0;
        for (int epoch = 1; epoch <= cfg.stage1_epochs; ++epoch) {
            double sum_objs = 0.0, sum_total = 0.0;
            std::int64_t n = 0;
            for (const std::vector<int>& batch : detail::make_batches(shuffled(src.train), cfg.batch_size)) {
                const double lr = cfg.cosine_decay ? cosine_lr(cfg.lr, step, total_steps) : cfg.lr;
                double objs_val = 0.0;
                const double v = detail::optimizer_step(model, params, adam, lr, [&](Tape& t) {
                    BatchGraph g = build_batch_graph(t, model, src, batch, true);
                    Value objs = graph_objs_loss(t, g, src);
                    objs_val = t.scalar_value(objs);
                    if (cfg.lambda_co == 0.0) return objs;
                    return t.add(objs, t.scale(graph_imgs_loss(t, model, g), cfg.lambda_co));
                });
                sum_objs += objs_val;
                sum_total += v;
                ++step;
                ++n;
            }
            const double dn = n ? static_cast<double>(n) : 1.0;
            const double mean = sum_objs / dn;
            log_epoch(epoch, "stage1", mean, std::nullopt, std::nullopt, sum_total / dn, std::nullopt);
        }
    }
    save_checkpoint(model, out / "ckpt_stage1", "stage1", cfg.stage1_epochs, order_rng.save_state(),
                    cfg.to_json());

    // Stage 2: add distribution alignment over paired source/target batches.
    {
        const std::int64_t total_steps = steps_per_epoch * cfg.stage2_epochs;
        std::int64_t step = 0;
        for (int epoch = 1; epoch <= cfg.stage2_epochs; ++epoch) {
            double sum_objs = 0.0, sum_da = 0.0, sum_total = 0.0;
            std::int64_t n = 0;
            std::vector<std::vector<int>> tgt_batches =
                detail::make_batches(shuffled(tgt.train), cfg.batch_size);
            if (cfg.use_aligner && tgt_batches.empty()) {
                throw std::invalid_argument("train_pgda: target train split smaller than one batch");
            }
            std::size_t tcur = 0;
            for (const std::vector<int>& batch : detail::make_batches(shuffled(src.train), cfg.batch_size)) {
                const double lr = cfg.cosine_decay ? cosine_lr(cfg.lr, step, total_steps) : cfg.lr;
                double objs_val = 0.0, da_val = 0.0;
                const double total = detail::optimizer_step(model, params, adam, lr, [&](Tape& t) {
                    BatchGraph gs = build_batch_graph(t, model, src, batch, true);
                    Value objs = graph_objs_loss(t, gs, src);
                    objs_val = t.scalar_value(objs);
                    Value loss = t.scale(objs, cfg.da.lambda_o);
                    if (cfg.use_aligner) {
                        BatchGraph gt_ = build_batch_graph(t, model, tgt, tgt_batches[tcur], true);
                        Value da = graph_da_loss(t, gs, gt_, cfg.kernels, cfg.da);
                        da_val = t.scalar_value(da);
                        loss = t.add(loss, da);
                    }
                    return loss;
                });
                if (!tgt_batches.empty()) tcur = (tcur + 1) % tgt_batches.size();
                sum_objs += objs_val;
                sum_da += da_val;
                sum_total += total;
                ++step;
                ++n;
            }
            const double dn = n ? static_cast<double>(n) : 1.0;
            log_epoch(epoch, "stage2", sum_objs / dn,
                      cfg.use_aligner ? std::optional<double>(sum_da / dn) : std::nullopt, std::nullopt,
                      sum_total / dn, std::nullopt);
        }
    }
    save_checkpoint(model, out / "ckpt_stage2", "stage2", cfg.stage2_epochs, order_rng.save_state(),
                    cfg.to_json());

    // Teacher for pseudo boxes: frozen snapshot at the end of stage 2.
    Model teacher = model.clone();

    // Stage 3: dynamic pseudo-box self-training (+ alignment).
    {
        const std::int64_t total_steps = steps_per_epoch * cfg.stage3_epochs;
        std::int64_t step = 0;
        for (int epoch = 1; epoch <= cfg.stage3_epochs; ++epoch) {
            // Cross-dataset similarity over the full training sets, student features.
            auto [sv, sq] = encode_reps(model, src, src.train);
            auto [tv, tq] = encode_reps(model, tgt, tgt.train);
            CrossDatasetSimilarity sim = build_similarity(sv, sq, tv, tq);
            SelectionPolicy policy{cfg.theta, k_for_epoch(epoch - 1, cfg.k_start, cfg.k_step, cfg.k_cap)};
            std::vector<int> selected = select_instances(sim.m, policy);
            if (cfg.test_select_none) selected.clear();

            // Teacher pseudo boxes for the selected target instances.
            std::vector<int> pseudo_ids;
            std::vector<BoxXYWH> pseudo_boxes;
            for (int s : selected) {
                const int inst_idx = tgt.train[static_cast<std::size_t>(s)];
                Tape t;
                pseudo_ids.push_back(inst_idx);
                pseudo_boxes.push_back(
                    predict_box(t, teacher, tgt.instances[static_cast<std::size_t>(inst_idx)]));
            }

            double sum_objs = 0.0, sum_da = 0.0, sum_pobjs = 0.0, sum_total = 0.0;
            std::int64_t n = 0;
            std::vector<std::vector<int>> tgt_batches =
                detail::make_batches(shuffled(tgt.train), cfg.batch_size);
            if (cfg.use_aligner && tgt_batches.empty()) {
                throw std::invalid_argument("train_pgda: target train split smaller than one batch");
            }
            std::size_t tcur = 0;
            std::vector<int> pseudo_order(pseudo_ids.size());
            for (std::size_t i = 0; i < pseudo_order.size(); ++i) pseudo_order[i] = static_cast<int>(i);
            order_rng.shuffle(pseudo_order);
            std::size_t pcur = 0;

            for (const std::vector<int>& batch : detail::make_batches(shuffled(src.train), cfg.batch_size)) {
                const double lr = cfg.cosine_decay ? cosine_lr(cfg.lr, step, total_steps) : cfg.lr;
                double objs_val = 0.0, da_val = 0.0, pobjs_val = 0.0;
                const double total = detail::optimizer_step(model, params, adam, lr, [&](Tape& t) {
                    BatchGraph gs = build_batch_graph(t, model, src, batch, true);
                    Value objs = graph_objs_loss(t, gs, src);
                    objs_val = t.scalar_value(objs);
                    Value loss = t.scale(objs, cfg.da.lambda_o);
                    if (cfg.use_aligner) {
                        BatchGraph gt_ = build_batch_graph(t, model, tgt, tgt_batches[tcur], true);
                        Value da = graph_da_loss(t, gs, gt_, cfg.kernels, cfg.da);
                        da_val = t.scalar_value(da);
                        loss = t.add(loss, da);
                    }
                    if (!pseudo_order.empty()) {
                        const std::size_t take =
                            std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                                  pseudo_order.size());
                        std::vector<int> pbatch;
                        std::vector<BoxXYWH> pboxes;
                        for (std::size_t k = 0; k < take; ++k) {
                            const int ord = pseudo_order[(pcur + k) % pseudo_order.size()];
                            pbatch.push_back(pseudo_ids[static_cast<std::size_t>(ord)]);
                            pboxes.push_back(pseudo_boxes[static_cast<std::size_t>(ord)]);
                        }
                        BatchGraph gp = build_batch_graph(t, model, tgt, pbatch, true);
                        Value pobjs = graph_pobjs_loss(t, gp, pboxes);
                        pobjs_val = t.scalar_value(pobjs);
                        loss = t.add(loss, t.scale(pobjs, cfg.da.lambda_po));
                    }
                    return loss;
                });
                if (!tgt_batches.empty()) tcur = (tcur + 1) % tgt_batches.size();
                if (!pseudo_order.empty()) {
                    pcur = (pcur + std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                                         pseudo_order.size())) %
                           pseudo_order.size();
                }
                sum_objs += objs_val;
                sum_da += da_val;
                sum_pobjs += pobjs_val;
                sum_total += total;
                ++step;
                ++n;
            }
            const double dn = n ? static_cast<double>(n) : 1.0;
            log_epoch(epoch, "stage3", sum_objs / dn,
                      cfg.use_aligner ? std::optional<double>(sum_da / dn) : std::nullopt,
                      std::optional<double>(sum_pobjs / dn), sum_total / dn,
                      static_cast<int>(selected.size()));
        }
    }

    const std::filesystem::path ckpt = out / "checkpoint";
    save_checkpoint(model, ckpt, "stage3", cfg.stage3_epochs, order_rng.save_state(), cfg.to_json());

    nlohmann::json report;
    report["mode"] = "pgda";
    report["config"] = cfg.to_json();
    report["curves"] = curves;
    report["source_val"]["grounding"] = grounding_json(evaluate_grounding(model, src, src.val));
    report["checkpoints"] = {{"stage1", "ckpt_stage1"}, {"stage2", "ckpt_stage2"}, {"final", "checkpoint"}};
    write_report(out, report);
    return TrainResult{ckpt, report};
}

}  // namespace prodseek
