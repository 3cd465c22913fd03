#pragma once

// `nucssl` command line: synth, pretrain, finetune, eval, postprocess, version.
//
// Exit codes:
//   0 success            4 missing/unreadable/corrupt file, bad dataset layout
//   1 internal error     5 checkpoint schema or architecture mismatch
//   2 usage error        6 training diverged (non-finite loss)
//   3 invalid config     7 shape/size precondition violated
//
// Every run writes a manifest: comment lines naming the version, command and
// seeds, followed by the full effective config, so `--config <manifest>`
// reproduces the run.

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "nucssl/config.hpp"
#include "nucssl/dataio.hpp"
#include "nucssl/errors.hpp"
#include "nucssl/metrics.hpp"
#include "nucssl/postprocess.hpp"
#include "nucssl/pretrain.hpp"
#include "nucssl/segmenter.hpp"
#include "nucssl/synth.hpp"

#ifndef NUCSSL_VERSION
#define NUCSSL_VERSION "0.0.0"
#endif

namespace nucssl {

inline constexpr const char* kVersion = NUCSSL_VERSION;

enum ExitCode : int {
    kExitOk = 0,
    kExitInternal = 1,
    kExitUsage = 2,
    kExitConfig = 3,
    kExitIo = 4,
    kExitSchema = 5,
    kExitDivergence = 6,
    kExitShape = 7,
};

namespace detail {

namespace fs = std::filesystem;

inline std::string seeds_line(const RunConfig& c) {
    std::ostringstream s;
    s << "data.seed=" << c.data.seed << " encoder.init_seed=" << c.pretrain.encoder.init_seed
      << " pretrain.seed=" << c.pretrain.seed << " pretrain.heldout_seed=" << c.pretrain.heldout_seed
      << " segmenter.init_seed=" << c.segmenter.init_seed << " finetune.seed=" << c.finetune.seed
      << " synth.seed=" << c.synth.seed;
    return s.str();
}

inline void write_manifest(const fs::path& path, const std::string& command, const std::vector<std::string>& args,
                           const RunConfig& cfg) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write manifest '" + path.string() + "'");
    }
    out << "# nucssl manifest\n";
    out << "# version: " << kVersion << "\n";
    out << "# command:";
    for (const auto& a : args) {
        out << ' ' << a;
    }
    out << "\n# subcommand: " << command << "\n";
    out << "# seeds: " << seeds_line(cfg) << "\n";
    out << dump_config(cfg);
}

inline RunConfig config_from(const std::string& path) { return path.empty() ? RunConfig{} : load_config(path); }

inline RunConfig config_from_snapshot(const Checkpoint& c) {
    if (c.config_snapshot.empty()) {
        throw SchemaError("checkpoint carries no config snapshot");
    }
    return parse_config(c.config_snapshot);
}

} // namespace detail

// In-process entry point; `out` receives normal output, `err` diagnostics.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    namespace fs = std::filesystem;
    std::vector<std::string> args(argv, argv + argc);

    CLI::App app{"Instance-aware self-supervised pretraining for nuclei segmentation", "nucssl"};
    app.require_subcommand(0, 1);
    std::string top_config;
    bool top_dump = false;
    app.add_option("--config", top_config, "Config file (with --dump-config)");
    app.add_flag("--dump-config", top_dump, "Print the effective config in canonical form and exit");

    std::string config_path, out_path, data_root, encoder_ckpt, model_path, split_name = "test", mask_path, resume;
    bool from_scratch = false;
    bool dump = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "Config file");
        sub->add_flag("--dump-config", dump, "Print the effective config and exit");
    };

    CLI::App* synth = app.add_subcommand("synth", "Write a synthetic nuclei dataset");
    add_common(synth);
    synth->add_option("--out", out_path, "Output dataset directory")->required();

    CLI::App* pre = app.add_subcommand("pretrain", "Pretrain the encoder on the proxy tasks");
    add_common(pre);
    pre->add_option("--out", out_path, "Output run directory")->required();
    pre->add_option("--data", data_root, "Dataset root (overrides data.root)");
    pre->add_option("--resume", resume, "Resume from a pretraining checkpoint");

    CLI::App* ft = app.add_subcommand("finetune", "Fine-tune the three-class segmenter");
    add_common(ft);
    ft->add_option("--out", out_path, "Output run directory")->required();
    ft->add_option("--data", data_root, "Dataset root (overrides data.root)");
    ft->add_option("--encoder-ckpt", encoder_ckpt, "Pretrained encoder checkpoint");
    ft->add_flag("--from-scratch", from_scratch, "Skip encoder transfer");

    CLI::App* ev = app.add_subcommand("eval", "Evaluate a segmentation model (AJI, Dice)");
    add_common(ev);
    ev->add_option("--model", model_path, "Segmentation model checkpoint")->required();
    ev->add_option("--data", data_root, "Dataset root (overrides data.root)");
    ev->add_option("--split", split_name, "train, val or test")->capture_default_str();
    ev->add_option("--out", out_path, "Report CSV path")->required();

    CLI::App* pp = app.add_subcommand("postprocess", "Ternary mask PNG -> instance label map PNG");
    add_common(pp);
    pp->add_option("--mask", mask_path, "Ternary mask (8-bit PNG, values 0/1/2)")->required();
    pp->add_option("--out", out_path, "Output label map (16-bit PNG)")->required();

    CLI::App* ver = app.add_subcommand("version", "Print the version");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "nucssl: error: " << e.what() << "\n" << app.help();
        return kExitUsage;
    }

    try {
        if (*ver) {
            out << "nucssl " << kVersion << "\n";
            return kExitOk;
        }
        if (app.get_subcommands().empty()) {
            if (top_dump) {
                out << dump_config(detail::config_from(top_config));
                return kExitOk;
            }
            err << "nucssl: error: a subcommand is required\n" << app.help();
            return kExitUsage;
        }

        RunConfig cfg = detail::config_from(config_path);
        if (!data_root.empty()) {
            cfg.data.root = data_root;
        }
        if (dump) {
            out << dump_config(cfg);
            return kExitOk;
        }

        if (*synth) {
            write_synthetic_dataset(cfg.synth, out_path);
            detail::write_manifest(fs::path(out_path) / "manifest.ini", "synth", args, cfg);
            out << "wrote " << cfg.synth.num_images << " + " << cfg.synth.num_test_images << " images to " << out_path
                << "\n";
            return kExitOk;
        }

        if (*pre) {
            fs::create_directories(out_path);
            detail::write_manifest(fs::path(out_path) / "manifest.ini", "pretrain", args, cfg);
            const DatasetIndex ds = load_dataset(cfg.data.root, cfg.data.split_ratio, cfg.data.seed);
            PretrainOptions opts;
            opts.checkpoint_dir = fs::path(out_path);
            opts.config_snapshot = dump_config(cfg);
            if (!resume.empty()) {
                opts.resume = load_checkpoint(resume);
            }
            opts.on_record = [&](const PretrainRecord& r) {
                if (!std::isnan(r.msr)) {
                    err << "step " << r.step << " L=" << r.l_total << " L_ST=" << r.l_st << " L_CR=" << r.l_cr
                        << " msr=" << r.msr << "\n";
                }
            };
            const PretrainResult res = pretrain(ds, cfg.pretrain, opts);
            res.report.write_csv(fs::path(out_path) / "pretrain_report.csv");
            out << "initial msr " << res.report.initial_msr << ", final msr "
                << (res.report.records.empty() ? std::nan("") : res.report.records.back().msr) << "\n";
            return kExitOk;
        }

        if (*ft) {
            if (from_scratch == !encoder_ckpt.empty()) {
                err << "nucssl: error: finetune needs exactly one of --encoder-ckpt or --from-scratch\n";
                return kExitUsage;
            }
            fs::create_directories(out_path);
            detail::write_manifest(fs::path(out_path) / "manifest.ini", "finetune", args, cfg);
            const DatasetIndex ds = load_dataset(cfg.data.root, cfg.data.split_ratio, cfg.data.seed, true);
            SegModel<float> model = from_scratch
                                        ? SegModel<float>(cfg.seg_model())
                                        : transfer_encoder<float>(load_checkpoint(encoder_ckpt).encoder, cfg.seg_model());
            FinetuneOptions opts;
            opts.on_epoch = [&](const FinetuneRecord& r) {
                err << "epoch " << r.epoch << " loss=" << r.loss << " val_aji=" << r.val_aji << "\n";
            };
            const FinetuneReport rep = finetune(model, ds, cfg.finetune, cfg.post(), opts);
            rep.write_csv(fs::path(out_path) / "finetune_report.csv");
            save_checkpoint(model.to_checkpoint(dump_config(cfg), static_cast<std::uint64_t>(cfg.finetune.epochs)),
                            fs::path(out_path) / "model.ckpt");
            out << "trained on " << rep.used_images.size() << " labelled images\n";
            return kExitOk;
        }

        if (*ev) {
            const Checkpoint ckpt = load_checkpoint(model_path);
            const RunConfig model_cfg = detail::config_from_snapshot(ckpt);
            // Model architecture always comes from the checkpoint; data and
            // postprocess settings from --config when given.
            RunConfig run = config_path.empty() ? model_cfg : cfg;
            if (!data_root.empty()) {
                run.data.root = data_root;
            }
            run.segmenter = model_cfg.segmenter;
            run.pretrain.encoder = model_cfg.pretrain.encoder;
            SegModel<float> model(run.seg_model());
            model.load_checkpoint(ckpt);
            const DatasetIndex ds = load_dataset(run.data.root, run.data.split_ratio, run.data.seed);
            const EvalReport rep = evaluate_dataset(model, ds, parse_split(split_name), run.post());
            rep.write_csv(out_path);
            detail::write_manifest(fs::path(out_path).string() + ".manifest.ini", "eval", args, run);
            out << "mean aji " << rep.mean_aji() << ", mean dice " << rep.mean_dice() << " over " << rep.images.size()
                << " images\n";
            return kExitOk;
        }

        if (*pp) {
            const TernaryMask mask = read_ternary_mask(mask_path);
            const InstanceLabelMap labels = ternary_to_instances(mask, cfg.post());
            if (fs::path(out_path).has_parent_path()) {
                fs::create_directories(fs::path(out_path).parent_path());
            }
            write_label_map(out_path, labels);
            detail::write_manifest(fs::path(out_path).string() + ".manifest.ini", "postprocess", args, cfg);
            out << labels.instance_count() << " instances\n";
            return kExitOk;
        }
    } catch (const ConfigError& e) {
        err << "nucssl: config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        err << "nucssl: io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const SchemaError& e) {
        err << "nucssl: schema error: " << e.what() << "\n";
        return kExitSchema;
    } catch (const DivergenceError& e) {
        err << "nucssl: diverged: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const ShapeError& e) {
        err << "nucssl: shape error: " << e.what() << "\n";
        return kExitShape;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "nucssl: io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        err << "nucssl: internal error: " << e.what() << "\n";
        return kExitInternal;
    }
    return kExitInternal;
}

} // namespace nucssl
