#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "prodseek/pipeline.hpp"

using namespace prodseek;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("prodseek_pipe_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ModelConfig tiny_model() {
    ModelConfig m;
    m.enc.patch_size = 4;
    m.enc.stages = 2;
    m.enc.stage_dims = {4, 8};
    m.enc.stage_heads = {1, 2};
    m.enc.d = 8;
    m.enc.text_layers = 1;
    m.enc.text_heads = 2;
    m.enc.vocab_size = static_cast<int>(default_vocabulary().words.size());
    m.enc.max_len = 8;
    m.image_h = 32;
    m.image_w = 32;
    m.fusion_layers = 1;
    m.fusion_heads = 2;
    return m;
}

fs::path gen_source(const std::string& tag, int n, std::uint64_t seed = 21) {
    fs::path dir = fresh_dir("src_" + tag);
    DomainSpec spec = mall_spec();
    spec.image_size = 32;
    gen_dataset(spec, n, seed, dir);
    return dir / "manifest.jsonl";
}

fs::path gen_target(const std::string& tag, int n, bool sealed, std::uint64_t seed = 22) {
    fs::path dir = fresh_dir("tgt_" + tag);
    DomainSpec spec = live_spec();
    spec.image_size = 32;
    gen_dataset(spec, n, seed, dir, sealed);
    return dir / "manifest.jsonl";
}

TrainConfig tiny_config(const fs::path& source, const fs::path& out) {
    TrainConfig cfg;
    cfg.model = tiny_model();
    cfg.batch_size = 8;
    cfg.supervised_epochs = 2;
    cfg.stage1_epochs = 1;
    cfg.stage2_epochs = 1;
    cfg.stage3_epochs = 1;
    cfg.source_manifest = source.string();
    cfg.out_dir = out.string();
    return cfg;
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in.good());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

// Independent IoU for the metric oracle — deliberately re-derived from corner
// coordinates rather than calling the library helper.
double oracle_iou(const BoxXYWH& a, const BoxXYWH& b) {
    const double ax1 = a.x - a.w / 2, ay1 = a.y - a.h / 2, ax2 = a.x + a.w / 2, ay2 = a.y + a.h / 2;
    const double bx1 = b.x - b.w / 2, by1 = b.y - b.h / 2, bx2 = b.x + b.w / 2, by2 = b.y + b.h / 2;
    const double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
    const double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
    const double inter = iw * ih;
    const double area_a = (ax2 - ax1) * (ay2 - ay1);
    const double area_b = (bx2 - bx1) * (by2 - by1);
    return inter / (area_a + area_b - inter);
}

}  // namespace

TEST_CASE("train config json round-trip") {
    TrainConfig cfg;
    cfg.model = tiny_model();
    cfg.batch_size = 5;
    cfg.lr = 3e-4;
    cfg.cosine_decay = false;
    cfg.supervised_epochs = 7;
    cfg.stage2_epochs = 0;
    cfg.lambda_co = 0.25;
    cfg.da.lambda_dv = 0.5;
    cfg.da.lambda_po = 2.0;
    cfg.kernels.multipliers = {1.0, 2.0};
    cfg.theta = 0.4;
    cfg.k_start = 30.0;
    cfg.seed = 77;
    cfg.source_manifest = "a/manifest.jsonl";
    cfg.use_aligner = false;

    TrainConfig back = TrainConfig::from_json(cfg.to_json());
    REQUIRE(back.batch_size == 5);
    REQUIRE(back.lr == Catch::Approx(3e-4));
    REQUIRE(back.cosine_decay == false);
    REQUIRE(back.supervised_epochs == 7);
    REQUIRE(back.stage2_epochs == 0);
    REQUIRE(back.lambda_co == Catch::Approx(0.25));
    REQUIRE(back.da.lambda_dv == Catch::Approx(0.5));
    REQUIRE(back.da.lambda_po == Catch::Approx(2.0));
    REQUIRE(back.kernels.multipliers == std::vector<double>{1.0, 2.0});
    REQUIRE(back.theta == Catch::Approx(0.4));
    REQUIRE(back.k_start == Catch::Approx(30.0));
    REQUIRE(back.seed == 77);
    REQUIRE(back.source_manifest == "a/manifest.jsonl");
    REQUIRE(back.use_aligner == false);
    REQUIRE(back.model.enc.d == 8);
    REQUIRE(back.model.image_h == 32);
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.model = tiny_model();
    cfg.batch_size = 0;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.model = tiny_model();
    cfg.lr = 0.0;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.model = tiny_model();
    cfg.supervised_epochs = 0;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.model = tiny_model();
    cfg.stage3_epochs = -1;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.model = tiny_model();
    cfg.lambda_co = -0.5;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.model = tiny_model();
    cfg.theta = 1.5;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.model = tiny_model();
    cfg.k_cap = 10.0;  // below k_start
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("split dataset loader") {
    fs::path man = gen_source("loader", 20);
    Dataset ds = load_split_dataset(man);
    REQUIRE(ds.instances.size() == 20);
    REQUIRE(ds.train.size() == 16);
    REQUIRE(ds.val.size() == 2);
    REQUIRE(ds.test.size() == 2);
    REQUIRE(&ds.split("train") == &ds.train);
    REQUIRE(&ds.split("val") == &ds.val);
    REQUIRE(&ds.split("test") == &ds.test);
    REQUIRE_THROWS_AS(ds.split("dev"), std::invalid_argument);
    REQUIRE(ds.all_have_boxes(ds.train));
    REQUIRE(ds.any_have_boxes());

    fs::path sealed = gen_target("loader", 10, true);
    Dataset tgt = load_split_dataset(sealed);
    REQUIRE(!tgt.any_have_boxes());
    REQUIRE(!tgt.all_have_boxes(tgt.train));
}

TEST_CASE("grounding metric worked examples") {
    Rng rng(41);
    std::vector<BoxXYWH> boxes;
    for (int i = 0; i < 20; ++i) {
        boxes.push_back(BoxXYWH{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.5),
                                rng.uniform(0.1, 0.5)});
    }
    GroundingResult perfect = grounding_from_pairs(boxes, boxes);
    REQUIRE(perfect.miou == Catch::Approx(100.0).margin(1e-9));
    REQUIRE(perfect.pr1 == Catch::Approx(100.0).margin(1e-12));

    // IoU exactly 0.5 must count as a miss under the strict inequality
    std::vector<BoxXYWH> a = {BoxXYWH{0.25, 0.5, 0.5, 1.0}};
    std::vector<BoxXYWH> b = {BoxXYWH{0.125, 0.5, 0.25, 1.0}};
    REQUIRE(oracle_iou(a[0], b[0]) == 0.5);
    GroundingResult half = grounding_from_pairs(a, b);
    REQUIRE(half.miou == Catch::Approx(50.0).margin(1e-12));
    REQUIRE(half.pr1 == 0.0);

    REQUIRE_THROWS_AS(grounding_from_pairs({}, {}), std::invalid_argument);
    REQUIRE_THROWS_AS(grounding_from_pairs(a, boxes), std::invalid_argument);
}

TEST_CASE("grounding metric matches an independent oracle on random pairs") {
    Rng rng(42);
    std::vector<BoxXYWH> pred(200, BoxXYWH{0.5, 0.5, 0.5, 0.5});
    std::vector<BoxXYWH> gt;
    for (int i = 0; i < 200; ++i) {
        gt.push_back(BoxXYWH{rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.05, 1.0),
                             rng.uniform(0.05, 1.0)});
    }
    GroundingResult got = grounding_from_pairs(pred, gt);
    double miou = 0.0;
    int hits = 0;
    for (int i = 0; i < 200; ++i) {
        const double v = oracle_iou(pred[static_cast<std::size_t>(i)], gt[static_cast<std::size_t>(i)]);
        miou += v;
        if (v > 0.5) ++hits;
    }
    REQUIRE(got.miou == Catch::Approx(100.0 * miou / 200.0).margin(1e-12));
    REQUIRE(got.pr1 == 100.0 * hits / 200.0);
}

TEST_CASE("rank retrieval matches an independent oracle on random galleries") {
    Rng rng(43);
    const int nq = 200, ng = 40;
    TensorF sims({nq, ng});
    for (double& v : sims.data) v = rng.uniform(-1.0, 1.0);
    // quantize a stripe of queries to force score ties through the tie-break
    for (int q = 0; q < 50; ++q) {
        for (int g = 0; g < ng; ++g) {
            sims.at(q, g) = std::round(sims.at(q, g) * 5.0) / 5.0;
        }
    }
    std::vector<int> truth(nq);
    for (int q = 0; q < nq; ++q) truth[static_cast<std::size_t>(q)] = rng.uniform_int(0, ng - 1);
    const std::vector<int> ks = {1, 5, 10, 50};
    auto got = rank_retrieval(sims, truth, ks);

    // oracle: stable sort by (score desc, index asc), rank = position of truth
    std::map<int, double> want;
    for (int k : ks) want[k] = 0.0;
    for (int q = 0; q < nq; ++q) {
        std::vector<int> order(static_cast<std::size_t>(ng));
        for (int g = 0; g < ng; ++g) order[static_cast<std::size_t>(g)] = g;
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (sims.at(q, a) != sims.at(q, b)) return sims.at(q, a) > sims.at(q, b);
            return a < b;
        });
        int rank = 0;
        for (int pos = 0; pos < ng; ++pos) {
            if (order[static_cast<std::size_t>(pos)] == truth[static_cast<std::size_t>(q)]) {
                rank = pos + 1;
                break;
            }
        }
        for (int k : ks) {
            if (rank <= k) want[k] += 1.0;
        }
    }
    for (int k : ks) {
        REQUIRE(got.at(k) == 100.0 * want.at(k) / nq);
    }
}

TEST_CASE("identical rep vectors for matching pairs give perfect retrieval") {
    Rng rng(44);
    std::vector<std::vector<double>> reps;
    for (int i = 0; i < 5; ++i) {
        std::vector<double> v(6);
        for (double& x : v) x = rng.uniform(-1.0, 1.0);
        reps.push_back(v);
    }
    TensorF sims = cosine_cross(reps, reps);
    std::vector<int> truth = {0, 1, 2, 3, 4};
    REQUIRE(rank_retrieval(sims, truth, {1}).at(1) == Catch::Approx(100.0));
}

TEST_CASE("checkpoint round-trip reproduces forwards bit-identically") {
    fs::path man = gen_source("ckpt", 10);
    Dataset ds = load_split_dataset(man);
    Rng rng(45);
    Model model(tiny_model(), rng);
    fs::path dir = fresh_dir("ckpt_store");
    save_checkpoint(model, dir / "ck", "supervised", 3, rng.save_state());

    Checkpoint loaded = load_checkpoint(dir / "ck");
    REQUIRE(loaded.stage() == "supervised");
    REQUIRE(loaded.epoch() == 3);
    REQUIRE(loaded.model.image_seeker.logit_scale.data == model.image_seeker.logit_scale.data);

    std::vector<int> idx = {0, 1, 2};
    auto [v0, q0] = encode_reps(model, ds, idx);
    auto [v1, q1] = encode_reps(loaded.model, ds, idx);
    REQUIRE(v0 == v1);
    REQUIRE(q0 == q1);
    for (int i : idx) {
        Tape t0, t1;
        BoxXYWH b0 = predict_box(t0, model, ds.instances[static_cast<std::size_t>(i)]);
        BoxXYWH b1 = predict_box(t1, loaded.model, ds.instances[static_cast<std::size_t>(i)]);
        REQUIRE(b0.x == b1.x);
        REQUIRE(b0.y == b1.y);
        REQUIRE(b0.w == b1.w);
        REQUIRE(b0.h == b1.h);
    }

    REQUIRE_THROWS_WITH(load_checkpoint(dir / "missing"),
                        Catch::Matchers::ContainsSubstring("cannot open"));
}

TEST_CASE("retrieval evaluation contracts") {
    fs::path man = gen_source("evalr", 20);
    Dataset ds = load_split_dataset(man);
    Rng rng(46);
    Model model(tiny_model(), rng);
    REQUIRE_THROWS_AS(evaluate_retrieval(model, ds, {0}), std::invalid_argument);

    RetrievalResult r = evaluate_retrieval(model, ds, ds.train);
    for (const auto& dir : {r.t2v, r.v2t}) {
        REQUIRE(dir.at(1) <= dir.at(5));
        REQUIRE(dir.at(5) <= dir.at(10));
        REQUIRE(dir.at(10) <= dir.at(50));
        for (const auto& [k, v] : dir) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 100.0);
        }
    }
}

TEST_CASE("untrained retrieval sits at chance level on a 1000-item gallery") {
    DomainSpec spec = mall_spec();
    spec.image_size = 32;
    Dataset ds;
    std::vector<int> idx;
    for (int i = 0; i < 1000; ++i) {
        Instance inst = gen_instance(spec, derive_seed(300, static_cast<std::uint64_t>(i)));
        inst.id = "u" + std::to_string(i);
        inst.split = "val";
        ds.instances.push_back(std::move(inst));
        idx.push_back(i);
    }
    Rng rng(47);
    Model model(tiny_model(), rng);
    RetrievalResult r = evaluate_retrieval(model, ds, idx, {1});
    REQUIRE(r.t2v.at(1) <= 1.0);  // chance is 0.1%
    REQUIRE(r.v2t.at(1) <= 1.0);
}

TEST_CASE("grounding evaluation uses open boxes or the sealed sidecar") {
    fs::path tgt_man = gen_target("evalg", 10, true);
    Dataset tgt = load_split_dataset(tgt_man);
    Rng rng(48);
    Model model(tiny_model(), rng);

    REQUIRE_THROWS_WITH(evaluate_grounding(model, tgt, tgt.val),
                        Catch::Matchers::ContainsSubstring("has no box"));

    auto sealed = load_sealed_boxes(tgt_man.parent_path() / "sealed_boxes.jsonl");
    GroundingResult g = evaluate_grounding(model, tgt, tgt.val, &sealed);
    REQUIRE(g.miou >= 0.0);
    REQUIRE(g.miou <= 100.0);
    REQUIRE(g.pr1 >= 0.0);
    REQUIRE(g.pr1 <= 100.0);

    std::map<std::string, BoxXYWH> incomplete;
    REQUIRE_THROWS_WITH(evaluate_grounding(model, tgt, tgt.val, &incomplete),
                        Catch::Matchers::ContainsSubstring("no sealed box"));
}

TEST_CASE("batching drops the unfilled tail") {
    std::vector<int> order = {5, 1, 9, 2, 8, 0, 7};
    auto batches = detail::make_batches(order, 3);
    REQUIRE(batches.size() == 2);
    REQUIRE(batches[0] == std::vector<int>{5, 1, 9});
    REQUIRE(batches[1] == std::vector<int>{2, 8, 0});
}

TEST_CASE("supervised training is deterministic given config and seed") {
    fs::path man = gen_source("det", 20);
    fs::path out = fresh_dir("det_out");
    TrainConfig cfg = tiny_config(man, out);
    cfg.batch_size = 4;

    train_supervised(cfg);
    std::string report1 = slurp(out / "report.json");
    std::string log1 = slurp(out / "train_log.csv");
    std::string tensor1 = slurp(out / "checkpoint" / "tensors" / "visual.patch_proj.w.dtsr");

    train_supervised(cfg);  // same out_dir so the config echo matches too
    REQUIRE(slurp(out / "report.json") == report1);
    REQUIRE(slurp(out / "train_log.csv") == log1);
    REQUIRE(slurp(out / "checkpoint" / "tensors" / "visual.patch_proj.w.dtsr") == tensor1);
}

TEST_CASE("supervised report carries metrics inside [0,100] and both loss terms") {
    fs::path man = gen_source("sup", 20);
    fs::path out = fresh_dir("sup_out");
    TrainConfig cfg = tiny_config(man, out);
    cfg.batch_size = 4;
    TrainResult res = train_supervised(cfg);

    REQUIRE(fs::exists(res.checkpoint_dir / "manifest.json"));
    const nlohmann::json& rep = res.report;
    REQUIRE(rep.at("mode") == "supervised");
    for (const char* key : {"miou", "pr1"}) {
        const double v = rep.at("val").at("grounding").at(key).get<double>();
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 100.0);
    }
    for (const auto& [k, v] : rep.at("val").at("retrieval").items()) {
        REQUIRE(v.get<double>() >= 0.0);
        REQUIRE(v.get<double>() <= 100.0);
    }
    REQUIRE(rep.at("curves").size() == 2);
    for (const auto& row : rep.at("curves")) {
        REQUIRE(row.contains("loss_imgs"));
        REQUIRE(row.contains("loss_objs"));
    }
    REQUIRE(fs::exists(out / "report.csv"));
    std::vector<std::string> log = read_lines(out / "train_log.csv");
    REQUIRE(log.at(0) == "epoch,stage,loss_imgs,loss_objs,val_miou,val_pr1,val_t2v_r1,selection");
}

TEST_CASE("disabling the retrieval term drops it from logs and curves") {
    fs::path man = gen_source("noimg", 20);
    fs::path out = fresh_dir("noimg_out");
    TrainConfig cfg = tiny_config(man, out);
    cfg.batch_size = 4;
    cfg.lambda_co = 0.0;
    TrainResult res = train_supervised(cfg);
    for (const auto& row : res.report.at("curves")) {
        REQUIRE(!row.contains("loss_imgs"));
        REQUIRE(row.contains("loss_objs"));
    }
    std::vector<std::string> log = read_lines(out / "train_log.csv");
    auto cells = split_csv(log.at(1));
    REQUIRE(cells.at(1) == "supervised");
    REQUIRE(cells.at(2).empty());   // loss_imgs column left blank
    REQUIRE(!cells.at(3).empty());  // loss_objs still reported
}

TEST_CASE("supervised training refuses datasets without boxes") {
    fs::path man = gen_target("nobox", 20, true);
    fs::path out = fresh_dir("nobox_out");
    TrainConfig cfg = tiny_config(man, out);
    REQUIRE_THROWS_AS(train_supervised(cfg), std::invalid_argument);
}

TEST_CASE("adaptation training rejects a boxed target manifest") {
    fs::path src = gen_source("leak", 20);
    fs::path tgt = gen_target("leak", 20, false);  // boxes present: leak
    fs::path out = fresh_dir("leak_out");
    TrainConfig cfg = tiny_config(src, out);
    cfg.target_manifest = tgt.string();
    REQUIRE_THROWS_WITH(train_pgda(cfg), Catch::Matchers::ContainsSubstring("label leak"));
}

TEST_CASE("adaptation training never touches the sealed box file") {
    fs::path src = gen_source("seal", 20);
    fs::path tgt = gen_target("seal", 20, true);
    fs::remove(tgt.parent_path() / "sealed_boxes.jsonl");  // prove it is never read
    fs::path out = fresh_dir("seal_out");
    TrainConfig cfg = tiny_config(src, out);
    cfg.batch_size = 4;
    cfg.target_manifest = tgt.string();
    TrainResult res = train_pgda(cfg);
    REQUIRE(res.report.at("mode") == "pgda");
    REQUIRE(res.report.contains("source_val"));
    REQUIRE(!res.report.contains("target"));  // nothing evaluated on target labels
    REQUIRE(fs::exists(out / "ckpt_stage1" / "manifest.json"));
    REQUIRE(fs::exists(out / "ckpt_stage2" / "manifest.json"));
    REQUIRE(fs::exists(out / "checkpoint" / "manifest.json"));
}

TEST_CASE("stage-3 objective reduces to the stage-2 objective when nothing is selected") {
    fs::path src_man = gen_source("comp", 20);
    fs::path tgt_man = gen_target("comp", 20, true);
    Dataset src = load_split_dataset(src_man);
    Dataset tgt = load_split_dataset(tgt_man);
    Rng rng(49);
    Model model(tiny_model(), rng);
    std::vector<int> sb(src.train.begin(), src.train.begin() + 4);
    std::vector<int> tb(tgt.train.begin(), tgt.train.begin() + 4);
    KernelSpec kernels;
    DAWeights w;
    w.lambda_o = 0.6;

    auto stage2_loss = [&](Tape& t) {
        BatchGraph gs = build_batch_graph(t, model, src, sb, true);
        BatchGraph gt_ = build_batch_graph(t, model, tgt, tb, true);
        return t.add(t.scale(graph_objs_loss(t, gs, src), w.lambda_o),
                     graph_da_loss(t, gs, gt_, kernels, w));
    };
    auto stage3_loss = [&](Tape& t, const std::vector<int>& pseudo_idx,
                           const std::vector<BoxXYWH>& pseudo_boxes) {
        BatchGraph gs = build_batch_graph(t, model, src, sb, true);
        BatchGraph gt_ = build_batch_graph(t, model, tgt, tb, true);
        Value loss = t.add(t.scale(graph_objs_loss(t, gs, src), w.lambda_o),
                           graph_da_loss(t, gs, gt_, kernels, w));
        if (!pseudo_idx.empty()) {
            BatchGraph gp = build_batch_graph(t, model, tgt, pseudo_idx, true);
            loss = t.add(loss, t.scale(graph_pobjs_loss(t, gp, pseudo_boxes), w.lambda_po));
        }
        return loss;
    };

    Tape t2, t3;
    const double v2 = t2.scalar_value(stage2_loss(t2));
    const double v3 = t3.scalar_value(stage3_loss(t3, {}, {}));
    REQUIRE(v3 == Catch::Approx(v2).margin(1e-9));

    // with a selected set, the difference is exactly the weighted pseudo loss
    Tape t4, t5;
    std::vector<int> pidx = {tgt.train[0], tgt.train[1]};
    std::vector<BoxXYWH> pboxes = {BoxXYWH{0.4, 0.4, 0.3, 0.3}, BoxXYWH{0.6, 0.6, 0.2, 0.2}};
    const double v_with = t4.scalar_value(stage3_loss(t4, pidx, pboxes));
    BatchGraph gp = build_batch_graph(t5, model, tgt, pidx, true);
    const double pobjs = t5.scalar_value(graph_pobjs_loss(t5, gp, pboxes));
    REQUIRE(v_with == Catch::Approx(v2 + w.lambda_po * pobjs).margin(1e-9));
}

TEST_CASE("forced-empty selection runs stage 3 without pseudo terms") {
    fs::path src = gen_source("hook", 20);
    fs::path tgt = gen_target("hook", 20, true);
    fs::path out = fresh_dir("hook_out");
    TrainConfig cfg = tiny_config(src, out);
    cfg.batch_size = 4;
    cfg.target_manifest = tgt.string();
    cfg.test_select_none = true;
    cfg.da.lambda_o = 0.5;
    TrainResult res = train_pgda(cfg);
    bool saw_stage3 = false;
    for (const auto& row : res.report.at("curves")) {
        if (row.at("stage") != "stage3") continue;
        saw_stage3 = true;
        REQUIRE(row.at("selected").get<int>() == 0);
        REQUIRE(row.at("loss_pobjs").get<double>() == 0.0);
        const double total = row.at("loss_total").get<double>();
        const double composed = 0.5 * row.at("loss_objs").get<double>() + row.at("loss_da").get<double>();
        REQUIRE(total == Catch::Approx(composed).margin(1e-9));
    }
    REQUIRE(saw_stage3);
}

TEST_CASE("selected-instance count follows the ceiling of the ratio schedule") {
    fs::path src = gen_source("count", 20);
    fs::path tgt = gen_target("count", 20, true);  // 16 target train instances
    fs::path out = fresh_dir("count_out");
    TrainConfig cfg = tiny_config(src, out);
    cfg.batch_size = 4;
    cfg.target_manifest = tgt.string();
    cfg.stage3_epochs = 2;
    cfg.theta = -0.99;  // everything clears the threshold; count still capped by k
    TrainResult res = train_pgda(cfg);
    std::vector<int> selected;
    for (const auto& row : res.report.at("curves")) {
        if (row.at("stage") == "stage3") selected.push_back(row.at("selected").get<int>());
    }
    REQUIRE(selected.size() == 2);
    REQUIRE(selected[0] == 4);  // ceil(20% of 16)
    REQUIRE(selected[1] == 5);  // ceil(30% of 16)
}

TEST_CASE("ablation arm without the aligner skips alignment terms") {
    fs::path src = gen_source("noalign", 20);
    fs::path tgt = gen_target("noalign", 20, true);
    fs::path out = fresh_dir("noalign_out");
    TrainConfig cfg = tiny_config(src, out);
    cfg.batch_size = 4;
    cfg.target_manifest = tgt.string();
    cfg.use_aligner = false;
    TrainResult res = train_pgda(cfg);
    for (const auto& row : res.report.at("curves")) {
        if (row.at("stage") == "stage2" || row.at("stage") == "stage3") {
            REQUIRE(!row.contains("loss_da"));
        }
    }
}

TEST_CASE("teacher predictions stay frozen while the student moves") {
    fs::path man = gen_source("teach", 10);
    Dataset ds = load_split_dataset(man);
    Rng rng(50);
    Model student(tiny_model(), rng);
    Model teacher = student.clone();
    const Instance& inst = ds.instances[0];

    Tape t0;
    BoxXYWH before = predict_box(t0, teacher, inst);
    {
        Tape ts;
        BoxXYWH sb = predict_box(ts, student, inst);
        REQUIRE(sb.x == before.x);  // clone starts identical
    }
    for (TensorF* p : student.params()) {
        for (double& v : p->data) v += 0.05;
    }
    Tape t1, t2;
    BoxXYWH after = predict_box(t1, teacher, inst);
    BoxXYWH moved = predict_box(t2, student, inst);
    REQUIRE(after.x == before.x);
    REQUIRE(after.y == before.y);
    REQUIRE(after.w == before.w);
    REQUIRE(after.h == before.h);
    REQUIRE(moved.x != before.x);

    Tape t3;
    BoxXYWH again = predict_box(t3, teacher, inst);
    REQUIRE(again.x == before.x);  // repeated calls are pure
}
