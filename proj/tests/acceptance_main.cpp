// Acceptance gate: one line per release criterion, exit 0 only if all hold.
// Artifacts (datasets, run dirs, reports) land under ./acceptance_artifacts or
// the directory given as argv[1].

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "prodseek/gradsuite.hpp"
#include "prodseek/pipeline.hpp"

using namespace prodseek;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// ---- calibration knobs -------------------------------------------------------

constexpr int kSupInstances = 2000;  // 1600/200/200 split
constexpr int kSupEpochs = 50;
constexpr int kSupBatch = 32;
const std::vector<std::uint64_t> kSupSeeds = {1, 2, 3};
constexpr double kSupTimeBudget = 1800.0;  // seconds, stated for 4 cores

constexpr int kDaInstances = 800;  // per domain; 640/80/80 split
constexpr int kDaStage1 = 80;
constexpr int kDaStage2 = 10;
constexpr int kDaStage3 = 8;
const std::vector<std::uint64_t> kDaSeeds = {11, 12, 13};
constexpr double kDaTimeBudget = 3600.0;

constexpr int kDetInstances = 200;
constexpr int kDetEpochs = 2;

// ---- small helpers -----------------------------------------------------------

double secs_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 2) {
    std::ostringstream ss;
    ss.setf(std::ios::fixed);
    ss.precision(prec);
    ss << v;
    return ss.str();
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct Line {
    std::string name;
    bool pass = false;
    std::string detail;
};

// Training model for the desk runs. A single encoder stage keeps the full
// 8×8 token grid: localization precision tracks grid pitch, and a merged 4×4
// grid caps val Pr@1 near 65 while 8×8 clears 90 on the same budget. One
// text layer, not two — box convergence is twice as fast off a shallow
// query encoding.
ModelConfig desk_model() {
    ModelConfig m;
    m.enc.patch_size = 8;
    m.enc.stages = 1;
    m.enc.stage_dims = {32};
    m.enc.stage_heads = {4};
    m.enc.d = 32;
    m.enc.text_layers = 1;
    m.enc.text_heads = 4;
    m.enc.vocab_size = static_cast<int>(default_vocabulary().words.size());
    m.enc.max_len = 8;
    m.image_h = m.image_w = 64;
    m.fusion_layers = 2;
    m.fusion_heads = 4;
    return m;
}

fs::path gen_domain(const fs::path& dir, const std::string& domain, int n, std::uint64_t seed,
                    bool sealed) {
    DomainSpec spec = domain == "mall" ? mall_spec() : live_spec();
    gen_dataset(spec, n, seed, dir, sealed);
    return dir / "manifest.jsonl";
}

// Independent corner-form IoU for the metric oracle.
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

// ---- criteria ------------------------------------------------------------------

Line criterion_grad_suite() {
    const auto t0 = Clock::now();
    std::vector<GradCaseResult> results = run_grad_suite();
    const double dt = secs_since(t0);
    double worst = 0.0;
    for (const GradCaseResult& r : results) worst = std::max(worst, r.max_rel_err);
    Line l{"gradient-suite", results.size() == 9 && worst < 1e-4 && dt < 120.0, ""};
    std::ostringstream ss;
    ss << results.size() << " losses, worst rel err " << worst << " (< 1e-4), " << fmt(dt, 1)
       << " s (< 120 s)";
    l.detail = ss.str();
    return l;
}

Line criterion_closed_forms() {
    bool ok = true;
    std::ostringstream ss;

    KernelSpec single;
    single.multipliers = {1.0};
    single.fixed_base = 1.0;
    double m1;
    {
        Tape t;
        m1 = t.scalar_value(mmd2(t, t.constant({1, 1}, {0.0}), t.constant({1, 1}, {1.0}), single));
    }
    ok = ok && std::abs(m1 - (2.0 - 2.0 * std::exp(-0.5))) <= 1e-6;

    KernelSpec bank;
    bank.multipliers = {0.5, 1.0};
    bank.fixed_base = 1.0;
    double m2;
    {
        Tape t;
        m2 = t.scalar_value(mmd2(t, t.constant({1, 1}, {0.0}), t.constant({1, 1}, {1.0}), bank));
    }
    ok = ok && std::abs(m2 - 1.025590) <= 1e-6;

    const double g_corner = giou(BoxXYWH{0.25, 0.25, 0.5, 0.5}, BoxXYWH{0.75, 0.75, 0.5, 0.5});
    const double g_nested = giou(BoxXYWH{0.5, 0.5, 1.0, 1.0}, BoxXYWH{0.5, 0.5, 0.5, 0.5});
    ok = ok && std::abs(g_corner - (-0.5)) <= 1e-9 && std::abs(g_nested - 0.25) <= 1e-9;

    double isl;
    {
        ImageSeekerParams p;
        p.logit_scale.data[0] = 1.0;
        p.tau = 0.0;
        Tape t;
        isl = t.scalar_value(image_seek_loss(t, t.constant({2, 2}, {1.0, 0.0, 0.0, 1.0}), p));
    }
    ok = ok && std::abs(isl - 0.4741) <= 1e-4;

    ss << "mmd2 " << fmt(m1, 6) << "/" << fmt(m2, 6) << ", giou " << fmt(g_corner, 3) << "/"
       << fmt(g_nested, 3) << ", image-seek " << fmt(isl, 4);
    return Line{"closed-form-oracles", ok, ss.str()};
}

Line criterion_metric_oracles() {
    const int n = 200;

    // rank_retrieval vs a sort-based recomputation, with injected score ties
    Rng rng(4242);
    TensorF sims({n, n});
    for (double& v : sims.data) v = rng.uniform(-1.0, 1.0);
    for (int q = 0; q < n; q += 2) {
        for (int g = 0; g < n; ++g) sims.at(q, g) = std::round(sims.at(q, g) * 8.0) / 8.0;
    }
    std::vector<int> truth(n);
    for (int& t : truth) t = rng.uniform_int(0, n - 1);
    const std::vector<int> ks = {1, 5, 10, 50};
    const std::map<int, double> got = rank_retrieval(sims, truth, ks);
    std::map<int, double> want;
    for (int k : ks) want[k] = 0.0;
    for (int q = 0; q < n; ++q) {
        std::vector<int> order(n);
        for (int g = 0; g < n; ++g) order[static_cast<std::size_t>(g)] = g;
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (sims.at(q, a) != sims.at(q, b)) return sims.at(q, a) > sims.at(q, b);
            return a < b;
        });
        int rank = 0;
        for (int pos = 0; pos < n; ++pos) {
            if (order[static_cast<std::size_t>(pos)] == truth[static_cast<std::size_t>(q)]) {
                rank = pos + 1;
                break;
            }
        }
        for (int k : ks) {
            if (rank <= k) want[k] += 1.0;
        }
    }
    bool retrieval_exact = true;
    for (int k : ks) retrieval_exact = retrieval_exact && got.at(k) == 100.0 * want.at(k) / n;

    // evaluate_grounding vs per-instance recomputation on generated scenes
    ModelConfig mc;
    mc.enc.patch_size = 4;
    mc.enc.stages = 2;
    mc.enc.stage_dims = {4, 8};
    mc.enc.stage_heads = {1, 2};
    mc.enc.d = 8;
    mc.enc.text_layers = 1;
    mc.enc.text_heads = 2;
    mc.enc.vocab_size = static_cast<int>(default_vocabulary().words.size());
    mc.enc.max_len = 8;
    mc.image_h = mc.image_w = 32;
    mc.fusion_layers = 1;
    mc.fusion_heads = 2;
    DomainSpec spec = mall_spec();
    spec.image_size = 32;
    Dataset ds;
    std::vector<int> idx;
    for (int i = 0; i < n; ++i) {
        Instance inst = gen_instance(spec, derive_seed(777, static_cast<std::uint64_t>(i)));
        inst.id = "m" + std::to_string(i);
        ds.instances.push_back(std::move(inst));
        idx.push_back(i);
    }
    Rng mr(55);
    Model model(mc, mr);
    const GroundingResult got_g = evaluate_grounding(model, ds, idx);
    double miou = 0.0;
    double hits = 0.0;
    for (int i : idx) {
        Tape t;
        const BoxXYWH p = predict_box(t, model, ds.instances[static_cast<std::size_t>(i)]);
        const double v = oracle_iou(p, *ds.instances[static_cast<std::size_t>(i)].box);
        miou += v;
        if (v > 0.5) hits += 1.0;
    }
    const double want_miou = 100.0 * miou / n;
    const double want_pr1 = 100.0 * hits / n;
    // Pr@1 and R@K derive from integer counts, so they must agree bitwise; the
    // mean IoU is a float accumulation whose last ulp depends on the formula,
    // hence the 1e-12 band.
    const bool grounding_ok =
        got_g.pr1 == want_pr1 && std::abs(got_g.miou - want_miou) <= 1e-12;

    std::ostringstream ss;
    ss << "retrieval " << (retrieval_exact ? "exact" : "MISMATCH") << ", Pr@1 "
       << (got_g.pr1 == want_pr1 ? "exact" : "MISMATCH") << ", mIoU delta "
       << std::abs(got_g.miou - want_miou) << " (<= 1e-12) on " << n << " instances";
    return Line{"metric-oracles", retrieval_exact && grounding_ok, ss.str()};
}

struct SupervisedOutcome {
    Line line;
    bool ran = false;
    std::vector<double> pr1;  // per seed, same order as kSupSeeds
    fs::path manifest;
};

SupervisedOutcome criterion_supervised(const fs::path& root) {
    SupervisedOutcome out;
    const auto t0 = Clock::now();
    out.manifest = gen_domain(root / "data_sup", "mall", kSupInstances, 101, false);

    const double val_size = kSupInstances / 10.0;
    const double r1_need = 20.0 * (100.0 / val_size);
    std::vector<double> r1s, pr1s;
    bool losses_decline = true;
    for (std::uint64_t seed : kSupSeeds) {
        TrainConfig cfg;
        cfg.model = desk_model();
        cfg.batch_size = kSupBatch;
        cfg.supervised_epochs = kSupEpochs;
        cfg.cosine_decay = false;
        cfg.seed = seed;
        cfg.source_manifest = out.manifest.string();
        cfg.out_dir = (root / ("sup_seed" + std::to_string(seed))).string();
        TrainResult res = train_supervised(cfg);
        pr1s.push_back(res.report.at("val").at("grounding").at("pr1").get<double>());
        r1s.push_back(res.report.at("val").at("retrieval").at("t2v_r1").get<double>());
        const auto& curves = res.report.at("curves");
        auto total = [](const nlohmann::json& row) {
            double v = row.at("loss_objs").get<double>();
            if (row.contains("loss_imgs")) v += row.at("loss_imgs").get<double>();
            return v;
        };
        losses_decline = losses_decline && total(curves.front()) > total(curves.back());
    }
    const double dt = secs_since(t0);

    bool ok = losses_decline && dt <= kSupTimeBudget;
    for (double v : pr1s) ok = ok && v >= 85.0;
    for (double v : r1s) ok = ok && v >= r1_need;
    out.ran = true;
    out.pr1 = pr1s;
    std::ostringstream ss;
    ss << "val Pr@1 {" << fmt(pr1s[0]) << ", " << fmt(pr1s[1]) << ", " << fmt(pr1s[2])
       << "} (each >= 85), t2v R@1 {" << fmt(r1s[0]) << ", " << fmt(r1s[1]) << ", " << fmt(r1s[2])
       << "} (each >= " << fmt(r1_need, 1) << " = 20x chance), loss declines: "
       << (losses_decline ? "yes" : "NO") << ", " << fmt(dt, 0) << " s (<= " << fmt(kSupTimeBudget, 0)
       << " s)";
    out.line = Line{"supervised-desk-run", ok, ss.str()};
    return out;
}

Line criterion_domain_adaptation(const fs::path& root) {
    const auto t0 = Clock::now();
    const fs::path src_man = gen_domain(root / "data_da_src", "mall", kDaInstances, 201, false);
    const fs::path tgt_man = gen_domain(root / "data_da_tgt", "live", kDaInstances, 202, true);
    Dataset src = load_split_dataset(src_man);
    Dataset tgt = load_split_dataset(tgt_man);
    const std::map<std::string, BoxXYWH> sealed =
        load_sealed_boxes(root / "data_da_tgt" / "sealed_boxes.jsonl");

    auto tgt_pr1 = [&](const fs::path& ckpt) {
        Checkpoint c = load_checkpoint(ckpt);
        return evaluate_grounding(c.model, tgt, tgt.val, &sealed).pr1;
    };
    auto src_pr1 = [&](const fs::path& ckpt) {
        Checkpoint c = load_checkpoint(ckpt);
        return evaluate_grounding(c.model, src, src.val).pr1;
    };

    std::vector<double> src_ref, arm_src_only, arm_mmd, arm_date, arm_pseudo;
    for (std::uint64_t seed : kDaSeeds) {
        TrainConfig cfg;
        cfg.model = desk_model();
        cfg.batch_size = kSupBatch;
        cfg.cosine_decay = false;
        cfg.stage1_epochs = kDaStage1;
        cfg.stage2_epochs = kDaStage2;
        cfg.stage3_epochs = kDaStage3;
        cfg.seed = seed;
        cfg.source_manifest = src_man.string();
        cfg.target_manifest = tgt_man.string();
        cfg.out_dir = (root / ("da_full_seed" + std::to_string(seed))).string();
        train_pgda(cfg);
        const fs::path full_out(cfg.out_dir);
        src_ref.push_back(src_pr1(full_out / "ckpt_stage1"));
        arm_src_only.push_back(tgt_pr1(full_out / "ckpt_stage1"));
        arm_mmd.push_back(tgt_pr1(full_out / "ckpt_stage2"));
        arm_date.push_back(tgt_pr1(full_out / "checkpoint"));

        TrainConfig pseudo = cfg;
        pseudo.stage2_epochs = 0;
        pseudo.use_aligner = false;
        pseudo.out_dir = (root / ("da_pseudo_seed" + std::to_string(seed))).string();
        train_pgda(pseudo);
        arm_pseudo.push_back(tgt_pr1(fs::path(pseudo.out_dir) / "checkpoint"));
    }
    const double dt = secs_since(t0);

    const double m_src = median(src_ref);
    const double m_only = median(arm_src_only);
    const double m_mmd = median(arm_mmd);
    const double m_date = median(arm_date);
    const double m_pseudo = median(arm_pseudo);
    const bool gap = m_only <= m_src - 15.0;
    const bool mmd_gain = m_mmd >= m_only + 2.0;
    const bool date_gain =
        m_date >= m_only + 5.0 && m_date >= m_mmd && m_date >= m_pseudo;
    const bool ok = gap && mmd_gain && date_gain && dt <= kDaTimeBudget;

    std::ostringstream ss;
    ss << "median Pr@1: source " << fmt(m_src) << "; target src-only " << fmt(m_only) << ", mmd "
       << fmt(m_mmd) << ", pseudo " << fmt(m_pseudo) << ", full " << fmt(m_date) << " | gap>=15: "
       << (gap ? "yes" : "NO") << ", mmd+2: " << (mmd_gain ? "yes" : "NO")
       << ", full+5 & top: " << (date_gain ? "yes" : "NO") << ", " << fmt(dt, 0) << " s (<= "
       << fmt(kDaTimeBudget, 0) << " s)";
    return Line{"domain-adaptation-ordering", ok, ss.str()};
}

Line criterion_cooperative_ablation(const fs::path& root, const SupervisedOutcome& sup) {
    if (!sup.ran) {
        return Line{"cooperative-ablation", false, "skipped: supervised baseline unavailable"};
    }
    std::vector<double> margins;
    for (std::size_t i = 0; i < kSupSeeds.size(); ++i) {
        TrainConfig cfg;
        cfg.model = desk_model();
        cfg.batch_size = kSupBatch;
        cfg.supervised_epochs = kSupEpochs;
        cfg.cosine_decay = false;
        cfg.lambda_co = 0.0;
        cfg.seed = kSupSeeds[i];
        cfg.source_manifest = sup.manifest.string();
        cfg.out_dir = (root / ("sup_nocoop_seed" + std::to_string(kSupSeeds[i]))).string();
        TrainResult res = train_supervised(cfg);
        const double pr1 = res.report.at("val").at("grounding").at("pr1").get<double>();
        margins.push_back(sup.pr1[i] - pr1);
    }
    const double m = median(margins);
    std::ostringstream ss;
    ss << "Pr@1 margins with vs without retrieval term {" << fmt(margins[0]) << ", " << fmt(margins[1])
       << ", " << fmt(margins[2]) << "}, median " << fmt(m) << " (> 0)";
    return Line{"cooperative-ablation", m > 0.0, ss.str()};
}

Line criterion_determinism(const fs::path& root) {
    const fs::path man = gen_domain(root / "data_det", "mall", kDetInstances, 301, false);
    TrainConfig cfg;
    cfg.model = desk_model();
    cfg.batch_size = kSupBatch;
    cfg.supervised_epochs = kDetEpochs;
    cfg.cosine_decay = false;
    cfg.seed = 5;
    cfg.source_manifest = man.string();
    cfg.out_dir = (root / "det_run").string();
    train_supervised(cfg);
    const std::string first = slurp(fs::path(cfg.out_dir) / "report.json");
    train_supervised(cfg);
    const std::string second = slurp(fs::path(cfg.out_dir) / "report.json");
    const bool ok = !first.empty() && first == second;
    return Line{"determinism", ok,
                ok ? "re-run with identical config+seed reproduced report.json byte-for-byte"
                   : "report.json differs between identical runs"};
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::current_path() / "acceptance_artifacts";
    std::error_code ec;
    fs::remove_all(root, ec);
    fs::create_directories(root);
    std::cout << "acceptance artifacts: " << root.string() << "\n" << std::flush;

    int failures = 0;
    auto emit = [&](Line l) {
        std::cout << (l.pass ? "[PASS] " : "[FAIL] ") << l.name << ": " << l.detail << "\n"
                  << std::flush;
        if (!l.pass) ++failures;
    };
    auto guarded = [&](const std::string& name, auto fn) {
        try {
            emit(fn());
        } catch (const std::exception& e) {
            emit(Line{name, false, std::string("exception: ") + e.what()});
        }
    };

    guarded("gradient-suite", criterion_grad_suite);
    guarded("closed-form-oracles", criterion_closed_forms);
    guarded("metric-oracles", criterion_metric_oracles);

    SupervisedOutcome sup;
    try {
        sup = criterion_supervised(root);
        emit(sup.line);
    } catch (const std::exception& e) {
        emit(Line{"supervised-desk-run", false, std::string("exception: ") + e.what()});
    }
    guarded("domain-adaptation-ordering", [&] { return criterion_domain_adaptation(root); });
    guarded("cooperative-ablation", [&] { return criterion_cooperative_ablation(root, sup); });
    guarded("determinism", [&] { return criterion_determinism(root); });

    std::cout << (failures == 0 ? "acceptance: all 7 criteria passed"
                                : "acceptance: " + std::to_string(failures) + " criterion(s) failed")
              << "\n";
    return failures == 0 ? 0 : 1;
}
