// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "lsr/config.hpp"
#include "lsr/dataio.hpp"
#include "lsr/inference.hpp"
#include "lsr/metrics.hpp"
#include "lsr/pipeline.hpp"
#include "lsr/synthface.hpp"
#include "lsr/trainer.hpp"

namespace fs = std::filesystem;

namespace lsr::cli {

namespace {

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::optional<std::int64_t> seed;
    std::string out;
    bool resume = false;
    bool dry_run = false;
    std::optional<int> k;
    std::optional<std::int64_t> steps;
    std::optional<int> res;
    std::string data;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "INI config file");
    app->add_option("--set", c.sets, "KEY=VAL override (repeatable)")->allow_extra_args(false);
    app->add_option("--seed", c.seed, "master seed");
    app->add_option("--out", c.out, "output path");
    app->add_flag("--resume", c.resume, "resume from the latest checkpoint in --out");
    app->add_flag("--dry-run", c.dry_run, "print the resolved config and exit");
    app->add_option("--k", c.k, "number of source shots");
    app->add_option("--steps", c.steps, "step budget of the command's stage");
    app->add_option("--res", c.res, "resolution");
    app->add_option("--data", c.data, "dataset directory (data.root)");
}

// Which config keys --steps rewrites.
enum class StepsTarget { kNone, kPretrain, kFull, kFinetune, kBoth };

void set_steps(Config& cfg, const std::string& steps_key, const std::string& epochs_key, std::int64_t steps) {
    cfg.set(steps_key, std::to_string(steps));
    if (!epochs_key.empty() && cfg.get_int(epochs_key) > steps) cfg.set(epochs_key, std::to_string(steps));
}

Config resolve(const Common& c, StepsTarget target, const std::optional<Config>& base = std::nullopt) {
    Config cfg = base ? *base : Config();
    if (!c.config.empty()) cfg.merge_file(c.config);
    for (const auto& s : c.sets) cfg.apply_override(s);
    if (c.seed) cfg.set("schedule.seed", std::to_string(*c.seed));
    if (c.res) cfg.set("data.resolution", std::to_string(*c.res));
    if (c.k) cfg.set("data.k", std::to_string(*c.k));
    if (!c.data.empty()) cfg.set("data.root", c.data);
    if (c.steps) {
        if (*c.steps < 1) throw ConfigError("--steps must be positive");
        switch (target) {
            case StepsTarget::kPretrain: set_steps(cfg, "schedule.pretrain_steps", "schedule.pretrain_epochs", *c.steps); break;
            case StepsTarget::kFull: set_steps(cfg, "schedule.full_steps", "schedule.full_epochs", *c.steps); break;
            case StepsTarget::kBoth:
                set_steps(cfg, "schedule.pretrain_steps", "schedule.pretrain_epochs", *c.steps);
                set_steps(cfg, "schedule.full_steps", "schedule.full_epochs", *c.steps);
                break;
            case StepsTarget::kFinetune: cfg.set("schedule.finetune_steps_per_shot", std::to_string(*c.steps)); break;
            case StepsTarget::kNone: throw ConfigError("--steps does not apply to this command");
        }
    }
    variant_config(cfg);
    for (auto stage : {trainer::Stage::kPretrain, trainer::Stage::kFull, trainer::Stage::kFinetune}) {
        trainer::schedule_from_config(cfg, stage, static_cast<int>(cfg.get_int("data.k")));
    }
    return cfg;
}

dataio::FrameStore load_store(const Config& cfg) {
    const auto root = cfg.get_string("data.root");
    if (root.empty()) throw ConfigError("data.root is not set (use --data or --set data.root=DIR)");
    std::optional<dataio::SplitSpec> split;
    const auto split_path = cfg.get_string("data.split");
    if (!split_path.empty()) {
        split = dataio::read_split_spec(split_path);
    } else if (fs::exists(fs::path(root) / "split.json")) {
        split = dataio::read_split_spec(fs::path(root) / "split.json");
    } else if (cfg.get_int("data.test_ids") > 0) {
        auto ids = dataio::load_dataset(root).identity_ids();
        const auto n_test = static_cast<int>(cfg.get_int("data.test_ids"));
        if (n_test >= static_cast<int>(ids.size())) throw ConfigError("data.test_ids leaves no training identities");
        split = dataio::split_first_n(ids, static_cast<int>(ids.size()) - n_test);
    }
    return dataio::FrameStore(dataio::load_dataset(root, split), static_cast<int>(cfg.get_int("data.resolution")));
}

fs::path require_out(const Common& c) {
    if (c.out.empty()) throw ConfigError("--out is required");
    return c.out;
}

std::vector<dataio::LoadedFrame> first_frames(const dataio::FrameStore& store, int id, int k) {
    const auto& frames = store.frames_of(id);
    if (static_cast<int>(frames.size()) < k) {
        throw std::invalid_argument("identity " + std::to_string(id) + " has only " + std::to_string(frames.size()) + " frames");
    }
    return {frames.begin(), frames.begin() + k};
}

void print_progress(std::ostream& out, const trainer::RunResult& r) {
    if (!r.log.empty()) out << "last step: " << r.log.back().to_json().dump() << "\n";
    if (!r.final_checkpoint.empty()) out << "checkpoint: " << r.final_checkpoint.string() << "\n";
}

}  // namespace

std::vector<nets::Variant> parse_variant_list(const std::vector<std::string>& items) {
    std::vector<nets::Variant> out;
    auto add = [&](nets::Variant v) {
        if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
    };
    for (const auto& item : items) {
        if (item == "all") {
            for (auto v : nets::all_variants()) add(v);
        } else if (item == "latent") {
            add(nets::Variant::kLatentLayout);
        } else if (item == "upper") {
            add(nets::Variant::kUpperBound);
        } else {
            try {
                add(nets::parse_variant(item));
            } catch (const std::invalid_argument&) {
                throw ConfigError("unknown variant '" + item + "' (baseline, spade, learned_seg, latent, upper, all)");
            }
        }
    }
    if (out.empty()) throw ConfigError("--variants selects nothing");
    return out;
}

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Few-shot talking-head synthesis with latent spatial layouts", "lsr"};
    app.require_subcommand(1);

    Common c;
    auto* make_data = app.add_subcommand("make-data", "render a synthetic face dataset");
    int n_ids = 20, n_frames = 10, n_test = 0;
    add_common(make_data, c);
    make_data->add_option("--ids", n_ids, "identities");
    make_data->add_option("--frames", n_frames, "frames per identity");
    make_data->add_option("--test-ids", n_test, "last identities held out in split.json");

    auto* pretrain = app.add_subcommand("pretrain", "layout pre-training");
    add_common(pretrain, c);

    std::string init, checkpoint;
    auto* train = app.add_subcommand("train", "full pipeline training");
    add_common(train, c);
    train->add_option("--init", init, "pre-trained checkpoint");

    int identity = -1, driver = -1;
    auto* finetune = app.add_subcommand("finetune", "fine-tune on one subject's K shots");
    add_common(finetune, c);
    finetune->add_option("--checkpoint", checkpoint, "meta-learned checkpoint")->required();
    finetune->add_option("--identity", identity, "subject identity id")->required();

    auto* embed = app.add_subcommand("embed", "write avatar.bin from K shots");
    add_common(embed, c);
    embed->add_option("--checkpoint", checkpoint, "checkpoint")->required();
    embed->add_option("--identity", identity, "subject identity id")->required();

    std::string avatar;
    bool layouts = false, normalize_shape = false;
    auto* reenact = app.add_subcommand("reenact", "drive an avatar with another identity's landmarks");
    add_common(reenact, c);
    reenact->add_option("--checkpoint", checkpoint, "checkpoint")->required();
    reenact->add_option("--avatar", avatar, "avatar.bin")->required();
    reenact->add_option("--driver", driver, "identity whose frames drive the avatar (default: the avatar's own)");
    reenact->add_flag("--layouts", layouts, "also write layout_%04d.png");
    reenact->add_flag("--normalize-shape", normalize_shape, "match the driver's landmark centroid and scale to the source");

    std::string outputs, truths;
    bool do_finetune = false;
    auto* evaluate = app.add_subcommand("evaluate", "metrics on held-out identities or two image directories");
    add_common(evaluate, c);
    evaluate->add_option("--checkpoint", checkpoint, "checkpoint (embedder and backbones)")->required();
    evaluate->add_option("--outputs", outputs, "directory of generated images");
    evaluate->add_option("--truths", truths, "directory of ground-truth images");
    evaluate->add_flag("--finetune", do_finetune, "fine-tune on each subject's shots first");

    std::vector<std::string> checkpoints;
    int grid_frames = 4;
    auto* grid = app.add_subcommand("grid", "labeled comparison grid");
    add_common(grid, c);
    grid->add_option("--checkpoints", checkpoints, "one row per checkpoint")->required()->delimiter(',');
    grid->add_option("--identity", identity, "source identity")->required();
    grid->add_option("--driver", driver, "driving identity (default: the source)");
    grid->add_option("--frames", grid_frames, "driving frames");

    std::vector<std::string> variants{"all"};
    auto* ablate = app.add_subcommand("ablate", "train and compare the five variants");
    add_common(ablate, c);
    ablate->add_option("--variants", variants, "baseline,spade,learned_seg,latent,upper,all")->delimiter(',');

    std::vector<std::string> args(argv.begin() + (argv.empty() ? 0 : 1), argv.end());
    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kExitUsage;
    }

    try {
        auto dry = [&](const Config& cfg) {
            if (!c.dry_run) return false;
            out << cfg.to_json().dump(2) << "\n";
            return true;
        };

        if (make_data->parsed()) {
            Config cfg = resolve(c, StepsTarget::kNone);
            const auto dir = require_out(c);
            if (n_ids < 1 || n_frames < 2 || n_test < 0 || n_test >= n_ids) throw ConfigError("invalid --ids/--frames/--test-ids");
            if (dry(cfg)) return kExitOk;
            const auto m = synthface::make_dataset(n_ids, n_frames, static_cast<int>(cfg.get_int("data.resolution")), dir,
                                                   static_cast<std::uint64_t>(cfg.get_int("schedule.seed")));
            if (n_test > 0) {
                std::vector<int> ids(n_ids);
                for (int i = 0; i < n_ids; ++i) ids[i] = i;
                dataio::write_split_spec(dataio::split_first_n(ids, n_ids - n_test), dir / "split.json");
            }
            out << "wrote " << m.entries.size() << " frames to " << dir.string() << " checksum " << m.checksum << "\n";
            return kExitOk;
        }

        if (pretrain->parsed() || train->parsed()) {
            const bool pre = pretrain->parsed();
            Config cfg = resolve(c, pre ? StepsTarget::kPretrain : StepsTarget::kFull);
            trainer::RunOptions opts;
            opts.out_dir = require_out(c);
            opts.resume = c.resume;
            if (!init.empty()) opts.init_checkpoint = init;
            if (dry(cfg)) return kExitOk;
            const auto store = load_store(cfg);
            const auto r = pre ? trainer::pretrain_layout(cfg, store, opts) : trainer::train_full(cfg, store, opts);
            print_progress(out, r);
            return kExitOk;
        }

        if (finetune->parsed()) {
            const auto meta = trainer::Session::load(checkpoint);
            Config cfg = resolve(c, StepsTarget::kFinetune, meta.config);
            const auto dir = require_out(c);
            if (dry(cfg)) return kExitOk;
            const auto store = load_store(cfg);
            const auto shots = first_frames(store, identity, static_cast<int>(cfg.get_int("data.k")));
            trainer::FinetuneOptions fo;
            fo.steps_per_shot = cfg.get_int("schedule.finetune_steps_per_shot");
            fo.lr = cfg.get_double("schedule.finetune_lr");
            std::vector<trainer::StepLog> log;
            auto tuned = trainer::finetune_subject(meta, shots, fo, &log);
            tuned.save(dir);
            if (!log.empty()) out << "last step: " << log.back().to_json().dump() << "\n";
            out << "checkpoint: " << dir.string() << "\n";
            return kExitOk;
        }

        if (embed->parsed()) {
            const auto session = trainer::Session::load(checkpoint);
            Config cfg = resolve(c, StepsTarget::kNone, session.config);
            const auto path = require_out(c);
            if (dry(cfg)) return kExitOk;
            const auto store = load_store(cfg);
            const auto e = inference::embed(session, first_frames(store, identity, static_cast<int>(cfg.get_int("data.k"))));
            if (path.has_parent_path()) fs::create_directories(path.parent_path());
            inference::save_avatar(e, path);
            out << "avatar: " << path.string() << " (identity " << e.identity_id << ", K=" << e.k << ")\n";
            return kExitOk;
        }

        if (reenact->parsed()) {
            const auto session = trainer::Session::load(checkpoint);
            Config cfg = resolve(c, StepsTarget::kNone, session.config);
            const auto dir = require_out(c);
            if (dry(cfg)) return kExitOk;
            const auto store = load_store(cfg);
            inference::ReenactmentRequest req;
            req.embedding = inference::load_avatar(avatar);
            const int drive_id = driver >= 0 ? driver : req.embedding.identity_id;
            req.mode = drive_id == req.embedding.identity_id ? inference::Mode::kSelf : inference::Mode::kCross;
            for (const auto& f : store.frames_of(drive_id)) {
                req.driving.push_back(f.landmarks);
                if (f.segmentation.defined()) req.driving_segmentation.push_back(f.segmentation);
            }
            inference::ReenactOptions ro;
            if (normalize_shape) ro.normalize_to = store.frames_of(req.embedding.identity_id).front().landmarks;
            const auto r = inference::reenact(session, req, ro);
            inference::write_reenactment(r, dir, layouts);
            out << "wrote " << r.images.size() << " frames to " << dir.string() << "\n";
            return kExitOk;
        }

        if (evaluate->parsed()) {
            const auto session = trainer::Session::load(checkpoint);
            Config cfg = resolve(c, StepsTarget::kFinetune, session.config);
            const auto dir = require_out(c);
            if (outputs.empty() != truths.empty()) throw ConfigError("--outputs and --truths go together");
            if (!session.identity) throw ConfigError("checkpoint " + checkpoint + " has no identity backbone");
            if (dry(cfg)) return kExitOk;
            metrics::MetricReport report;
            if (!outputs.empty()) {
                report = metrics::evaluate_directory(outputs, truths, {}, *session.identity, *session.generic);
            } else {
                const auto store = load_store(cfg);
                pipeline::HeldOutOptions ho;
                ho.k = static_cast<int>(cfg.get_int("data.k"));
                if (do_finetune) {
                    trainer::FinetuneOptions fo;
                    fo.steps_per_shot = cfg.get_int("schedule.finetune_steps_per_shot");
                    fo.lr = cfg.get_double("schedule.finetune_lr");
                    ho.finetune = fo;
                }
                const auto samples = pipeline::held_out_samples(session, store, store.index().test_ids, ho);
                pipeline::write_eval_set(samples, dir / "outputs", dir / "truths");
                report = metrics::evaluate(samples, *session.identity, *session.generic);
            }
            report.write(dir);
            out << metrics::table_header() << "\n"
                << metrics::table_row(nets::variant_name(session.nets.cfg.variant), report.mean, report.fid) << "\n";
            return kExitOk;
        }

        if (grid->parsed()) {
            const auto dir = require_out(c);
            std::vector<trainer::Session> sessions;
            for (const auto& p : checkpoints) sessions.push_back(trainer::Session::load(p));
            Config cfg = resolve(c, StepsTarget::kNone, sessions.front().config);
            if (dry(cfg)) return kExitOk;
            const auto store = load_store(cfg);
            const int k = static_cast<int>(cfg.get_int("data.k"));
            const int drive_id = driver >= 0 ? driver : identity;
            const auto& drive_frames = store.frames_of(drive_id);
            const size_t first = drive_id == identity ? static_cast<size_t>(k) : 0;
            if (drive_frames.size() <= first) throw std::invalid_argument("not enough driving frames");
            const auto n = std::min(drive_frames.size() - first, static_cast<size_t>(std::max(grid_frames, 1)));
            std::vector<inference::GridRow> rows;
            const auto sources = first_frames(store, identity, k);
            inference::GridRow src{"source", {}}, drv{"driver", {}};
            for (size_t i = 0; i < n; ++i) {
                src.frames.push_back(tensor_to_image(sources[i % sources.size()].image));
                drv.frames.push_back(tensor_to_image(drive_frames[first + i].image));
            }
            rows.push_back(src);
            rows.push_back(drv);
            for (const auto& s : sessions) {
                inference::ReenactmentRequest req;
                req.embedding = inference::embed(s, sources);
                for (size_t i = 0; i < n; ++i) {
                    req.driving.push_back(drive_frames[first + i].landmarks);
                    if (drive_frames[first + i].segmentation.defined())
                        req.driving_segmentation.push_back(drive_frames[first + i].segmentation);
                }
                inference::GridRow row{nets::variant_name(s.nets.cfg.variant), {}};
                for (const auto& img : inference::reenact(s, req).images) row.frames.push_back(tensor_to_image(img));
                rows.push_back(row);
            }
            inference::emit_grid(rows, dir);
            out << "grid: " << dir.string() << "\n";
            return kExitOk;
        }

        if (ablate->parsed()) {
            Config cfg = resolve(c, StepsTarget::kBoth);
            pipeline::AblationOptions ao;
            ao.variants = parse_variant_list(variants);
            ao.out_dir = require_out(c);
            ao.k = static_cast<int>(cfg.get_int("data.k"));
            for (auto v : ao.variants) {
                auto vc = cfg;
                vc.set("variant.name", nets::variant_name(v));
                variant_config(vc);
            }
            if (dry(cfg)) return kExitOk;
            const auto store = load_store(cfg);
            const auto report = pipeline::run_ablation(cfg, store, ao);
            out << report.to_table();
            return kExitOk;
        }
    } catch (const ConfigError& e) {
        err << "lsr: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "lsr: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}

}  // namespace lsr::cli
