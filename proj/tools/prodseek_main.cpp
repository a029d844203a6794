#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "prodseek/dtsr.hpp"
#include "prodseek/gradsuite.hpp"
#include "prodseek/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void require_file(const std::string& path, const std::string& what) {
    if (!fs::exists(path)) {
        throw std::invalid_argument(what + " not found: " + path);
    }
}

prodseek::TrainConfig load_train_config(const std::string& config_path) {
    if (config_path.empty()) return prodseek::TrainConfig{};
    require_file(config_path, "config");
    std::ifstream in(config_path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::invalid_argument("config " + config_path + " is not valid JSON: " + e.what());
    }
    return prodseek::TrainConfig::from_json(j);
}

prodseek::DomainSpec spec_for(const std::string& domain) {
    if (domain == "mall") return prodseek::mall_spec();
    if (domain == "live") return prodseek::live_spec();
    throw std::invalid_argument("unknown domain '" + domain + "' (expected mall or live)");
}

int run_grad_check() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<prodseek::GradCaseResult> results = prodseek::run_grad_suite();
    const auto t1 = std::chrono::steady_clock::now();
    double worst = 0.0;
    for (const auto& r : results) {
        std::cout << r.name << ": max rel err " << r.max_rel_err << "\n";
        worst = std::max(worst, r.max_rel_err);
    }
    std::cout << "worst: " << worst << " (threshold 1e-4), "
              << std::chrono::duration<double>(t1 - t0).count() << " s\n";
    if (worst >= 1e-4) throw std::runtime_error("gradient check failed: worst rel err above 1e-4");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Joint product retrieval + grounding on synthetic two-domain data"};
    app.require_subcommand(1);
    std::function<void()> action;

    // gen-data
    {
        auto* cmd = app.add_subcommand("gen-data", "Generate a synthetic shapes dataset");
        auto domain = std::make_shared<std::string>("mall");
        auto n = std::make_shared<int>(2000);
        auto seed = std::make_shared<std::uint64_t>(1);
        auto out = std::make_shared<std::string>();
        auto seal = std::make_shared<bool>(false);
        auto image_size = std::make_shared<int>(0);
        cmd->add_option("--domain", *domain, "mall or live");
        cmd->add_option("--n", *n, "instance count")->check(CLI::PositiveNumber);
        cmd->add_option("--seed", *seed, "dataset seed");
        cmd->add_option("--out", *out, "output directory")->required();
        cmd->add_flag("--seal-boxes", *seal, "move boxes to a sidecar the trainer never reads");
        cmd->add_option("--image-size", *image_size, "override canvas size in pixels");
        cmd->callback([=, &action] {
            action = [=] {
                prodseek::DomainSpec spec = spec_for(*domain);
                if (*image_size > 0) spec.image_size = *image_size;
                prodseek::DatasetManifest man =
                    prodseek::gen_dataset(spec, *n, *seed, *out, *seal);
                std::cout << "wrote " << man.records.size() << " instances to " << *out
                          << (*seal ? " (boxes sealed)" : "") << "\n";
            };
        });
    }

    // train
    {
        auto* cmd = app.add_subcommand("train", "Fully-supervised retrieval + grounding training");
        auto config = std::make_shared<std::string>();
        auto source = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto seed = std::make_shared<std::uint64_t>(0);
        auto epochs = std::make_shared<int>(0);
        auto batch = std::make_shared<int>(0);
        auto lambda_co = std::make_shared<double>(-1.0);
        auto lr = std::make_shared<double>(0.0);
        cmd->add_option("--config", *config, "JSON config file");
        auto* o_source = cmd->add_option("--source", *source, "source manifest path");
        auto* o_out = cmd->add_option("--out", *out, "output directory");
        auto* o_seed = cmd->add_option("--seed", *seed, "training seed");
        auto* o_epochs = cmd->add_option("--epochs", *epochs, "supervised epochs");
        auto* o_batch = cmd->add_option("--batch", *batch, "batch size");
        auto* o_lco = cmd->add_option("--lambda-co", *lambda_co, "retrieval loss weight");
        auto* o_lr = cmd->add_option("--lr", *lr, "learning rate");
        cmd->callback([=, &action] {
            action = [=] {
                prodseek::TrainConfig cfg = load_train_config(*config);
                if (o_source->count()) cfg.source_manifest = *source;
                if (o_out->count()) cfg.out_dir = *out;
                if (o_seed->count()) cfg.seed = *seed;
                if (o_epochs->count()) cfg.supervised_epochs = *epochs;
                if (o_batch->count()) cfg.batch_size = *batch;
                if (o_lco->count()) cfg.lambda_co = *lambda_co;
                if (o_lr->count()) cfg.lr = *lr;
                cfg.validate();
                require_file(cfg.source_manifest, "source manifest");
                prodseek::TrainResult res = prodseek::train_supervised(cfg);
                std::cout << "checkpoint: " << res.checkpoint_dir.string() << "\n";
            };
        });
    }

    // train-da
    {
        auto* cmd = app.add_subcommand("train-da", "Three-stage domain-adaptive grounding training");
        auto config = std::make_shared<std::string>();
        auto source = std::make_shared<std::string>();
        auto target = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto seed = std::make_shared<std::uint64_t>(0);
        auto s1 = std::make_shared<int>(0);
        auto s2 = std::make_shared<int>(-1);
        auto s3 = std::make_shared<int>(-1);
        auto no_aligner = std::make_shared<bool>(false);
        cmd->add_option("--config", *config, "JSON config file");
        auto* o_source = cmd->add_option("--source", *source, "source manifest path");
        auto* o_target = cmd->add_option("--target", *target, "target manifest path");
        auto* o_out = cmd->add_option("--out", *out, "output directory");
        auto* o_seed = cmd->add_option("--seed", *seed, "training seed");
        auto* o_s1 = cmd->add_option("--stage1-epochs", *s1, "stage-1 epochs");
        auto* o_s2 = cmd->add_option("--stage2-epochs", *s2, "stage-2 epochs");
        auto* o_s3 = cmd->add_option("--stage3-epochs", *s3, "stage-3 epochs");
        cmd->add_flag("--no-aligner", *no_aligner, "drop the distribution-alignment terms");
        cmd->callback([=, &action] {
            action = [=] {
                prodseek::TrainConfig cfg = load_train_config(*config);
                if (o_source->count()) cfg.source_manifest = *source;
                if (o_target->count()) cfg.target_manifest = *target;
                if (o_out->count()) cfg.out_dir = *out;
                if (o_seed->count()) cfg.seed = *seed;
                if (o_s1->count()) cfg.stage1_epochs = *s1;
                if (o_s2->count()) cfg.stage2_epochs = *s2;
                if (o_s3->count()) cfg.stage3_epochs = *s3;
                if (*no_aligner) cfg.use_aligner = false;
                cfg.validate();
                require_file(cfg.source_manifest, "source manifest");
                require_file(cfg.target_manifest, "target manifest");
                prodseek::TrainResult res = prodseek::train_pgda(cfg);
                std::cout << "checkpoint: " << res.checkpoint_dir.string() << "\n";
            };
        });
    }

    // eval
    {
        auto* cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
        auto ckpt = std::make_shared<std::string>();
        auto manifest = std::make_shared<std::string>();
        auto split = std::make_shared<std::string>("val");
        auto sealed = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto retrieval_only = std::make_shared<bool>(false);
        cmd->add_option("--checkpoint", *ckpt, "checkpoint directory")->required();
        cmd->add_option("--manifest", *manifest, "dataset manifest")->required();
        cmd->add_option("--split", *split, "train, val, or test");
        cmd->add_option("--sealed", *sealed, "sealed box sidecar for label-free datasets");
        cmd->add_option("--out", *out, "directory for report.json/report.csv")->required();
        cmd->add_flag("--retrieval-only", *retrieval_only, "skip grounding metrics");
        cmd->callback([=, &action] {
            action = [=] {
                require_file(*ckpt + "/manifest.json", "checkpoint");
                require_file(*manifest, "dataset manifest");
                prodseek::Checkpoint c = prodseek::load_checkpoint(*ckpt);
                prodseek::Dataset ds = prodseek::load_split_dataset(*manifest);
                const std::vector<int>& idx = ds.split(*split);
                json report;
                report["checkpoint"] = *ckpt;
                report["manifest"] = *manifest;
                report["split"] = *split;
                report["retrieval"] =
                    prodseek::retrieval_json(prodseek::evaluate_retrieval(c.model, ds, idx));
                if (!*retrieval_only) {
                    std::map<std::string, prodseek::BoxXYWH> sealed_boxes;
                    const std::map<std::string, prodseek::BoxXYWH>* boxes_ptr = nullptr;
                    if (!sealed->empty()) {
                        require_file(*sealed, "sealed box file");
                        sealed_boxes = prodseek::load_sealed_boxes(*sealed);
                        boxes_ptr = &sealed_boxes;
                    }
                    report["grounding"] = prodseek::grounding_json(
                        prodseek::evaluate_grounding(c.model, ds, idx, boxes_ptr));
                }
                prodseek::write_report(*out, report);
                std::cout << report.dump(2) << "\n";
            };
        });
    }

    // grad-check
    {
        auto* cmd = app.add_subcommand("grad-check", "Finite-difference check of every loss");
        cmd->callback([&] { action = [] { run_grad_check(); }; });
    }

    // dump-features
    {
        auto* cmd = app.add_subcommand("dump-features", "Write detached per-instance features");
        auto ckpt = std::make_shared<std::string>();
        auto manifest = std::make_shared<std::string>();
        auto split = std::make_shared<std::string>("all");
        auto out = std::make_shared<std::string>();
        cmd->add_option("--checkpoint", *ckpt, "checkpoint directory")->required();
        cmd->add_option("--manifest", *manifest, "dataset manifest")->required();
        cmd->add_option("--split", *split, "all, train, val, or test");
        cmd->add_option("--out", *out, "output directory")->required();
        cmd->callback([=, &action] {
            action = [=] {
                require_file(*ckpt + "/manifest.json", "checkpoint");
                require_file(*manifest, "dataset manifest");
                prodseek::Checkpoint c = prodseek::load_checkpoint(*ckpt);
                prodseek::Dataset ds = prodseek::load_split_dataset(*manifest);
                std::vector<int> idx;
                if (*split == "all") {
                    idx.resize(ds.instances.size());
                    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
                } else {
                    idx = ds.split(*split);
                }
                if (idx.empty()) throw std::invalid_argument("dump-features: empty split");
                const int d = c.model.cfg.enc.d;
                const int n = static_cast<int>(idx.size());
                prodseek::TensorF v_rep({n, d}), q_rep({n, d}), f_loc({n, d});
                std::vector<std::string> ids;
                for (int r = 0; r < n; ++r) {
                    const prodseek::Instance& inst =
                        ds.instances[static_cast<std::size_t>(idx[static_cast<std::size_t>(r)])];
                    ids.push_back(inst.id);
                    prodseek::Tape t;
                    prodseek::Encoding ev =
                        prodseek::encode_image(t, c.model.visual, c.model.cfg.enc, inst.image);
                    prodseek::Encoding eq =
                        prodseek::encode_query(t, c.model.text, c.model.cfg.enc, inst.query_ids);
                    prodseek::ObjectSeekOut os =
                        prodseek::object_seek(t, c.model.object_seeker, ev.tokens, eq.tokens);
                    const auto& vv = t.val(ev.rep);
                    const auto& qv = t.val(eq.rep);
                    const auto& fv = t.val(os.f_loc);
                    for (int k = 0; k < d; ++k) {
                        v_rep.at(r, k) = vv[static_cast<std::size_t>(k)];
                        q_rep.at(r, k) = qv[static_cast<std::size_t>(k)];
                        f_loc.at(r, k) = fv[static_cast<std::size_t>(k)];
                    }
                }
                fs::create_directories(*out);
                prodseek::dtsr::write(fs::path(*out) / "v_rep.dtsr", v_rep);
                prodseek::dtsr::write(fs::path(*out) / "q_rep.dtsr", q_rep);
                prodseek::dtsr::write(fs::path(*out) / "f_loc.dtsr", f_loc);
                json man;
                man["version"] = 1;
                man["count"] = n;
                man["split"] = *split;
                man["ids"] = ids;
                man["files"] = {{"v_rep", "v_rep.dtsr"}, {"q_rep", "q_rep.dtsr"}, {"f_loc", "f_loc.dtsr"}};
                std::ofstream mo(fs::path(*out) / "features.json", std::ios::trunc);
                mo << man.dump(2) << "\n";
                std::cout << "wrote features for " << n << " instances to " << *out << "\n";
            };
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        action();
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
