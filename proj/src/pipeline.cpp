// SPDX-License-Identifier: Apache-2.0

#include "lsr/pipeline.hpp"

#include <algorithm>
#include <fstream>

#include "lsr/inference.hpp"
#include "lsr/synthface.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lsr::pipeline {

std::vector<metrics::EvalSample> held_out_samples(const trainer::Session& session, const dataio::FrameStore& store,
                                                  const std::vector<int>& identity_ids, const HeldOutOptions& opts) {
    if (opts.k < 1) throw std::invalid_argument("K must be at least 1");
    std::vector<metrics::EvalSample> samples;
    for (int id : identity_ids) {
        const auto& frames = store.frames_of(id);
        if (static_cast<int>(frames.size()) <= opts.k) {
            throw std::invalid_argument("identity " + std::to_string(id) + " has " + std::to_string(frames.size()) +
                                        " frames, need more than K = " + std::to_string(opts.k));
        }
        const std::vector<dataio::LoadedFrame> sources(frames.begin(), frames.begin() + opts.k);
        std::optional<trainer::Session> tuned;
        if (opts.finetune) tuned = trainer::finetune_subject(session, sources, *opts.finetune);
        const auto& s = tuned ? *tuned : session;

        inference::ReenactmentRequest req;
        req.embedding = inference::embed(s, sources);
        std::vector<const dataio::LoadedFrame*> targets;
        for (size_t i = opts.k; i < frames.size(); ++i) {
            if (opts.max_targets > 0 && static_cast<int>(targets.size()) >= opts.max_targets) break;
            targets.push_back(&frames[i]);
            req.driving.push_back(frames[i].landmarks);
            if (frames[i].segmentation.defined()) req.driving_segmentation.push_back(frames[i].segmentation);
        }
        const auto out = inference::reenact(s, req);
        for (size_t i = 0; i < targets.size(); ++i) {
            metrics::EvalSample e;
            e.name = "id" + std::to_string(id) + "_f" + std::to_string(targets[i]->frame_index);
            e.output = out.images[i];
            e.truth = targets[i]->image;
            e.output_landmarks = targets[i]->landmarks;  // driving pose
            e.truth_landmarks = targets[i]->landmarks;
            e.source_landmarks = sources.front().landmarks;
            samples.push_back(std::move(e));
        }
    }
    return samples;
}

void write_eval_set(const std::vector<metrics::EvalSample>& samples, const fs::path& outputs, const fs::path& truths) {
    fs::create_directories(outputs);
    fs::create_directories(truths);
    for (const auto& s : samples) {
        write_png(tensor_to_image(s.output), outputs / (s.name + ".png"));
        write_landmarks(s.output_landmarks, outputs / (s.name + ".lmk.json"));
        write_png(tensor_to_image(s.truth), truths / (s.name + ".png"));
        write_landmarks(s.truth_landmarks, truths / (s.name + ".lmk.json"));
        if (s.source_landmarks) write_landmarks(*s.source_landmarks, truths / (s.name + ".src.lmk.json"));
    }
}

metrics::MetricReport evaluate_session(const trainer::Session& session, const dataio::FrameStore& store,
                                       const std::vector<int>& identity_ids, const HeldOutOptions& opts) {
    if (!session.identity) throw std::invalid_argument("evaluation needs a checkpoint with an identity backbone");
    return metrics::evaluate(held_out_samples(session, store, identity_ids, opts), *session.identity, *session.generic);
}

LayoutIou layout_iou(const trainer::Session& session, const dataio::FrameStore& store,
                     const std::vector<int>& identity_ids, const std::vector<int>& reference_ids, int k) {
    const auto classes = static_cast<std::int64_t>(synthface::kNumClasses);
    auto counts = torch::zeros({classes}, torch::kLong);
    for (int id : reference_ids)
        for (const auto& f : store.frames_of(id)) {
            if (!f.segmentation.defined()) throw std::runtime_error("reference frames need segmentation");
            counts += torch::bincount(f.segmentation.flatten().to(torch::kLong), {}, classes);
        }
    LayoutIou out;
    out.majority_class = static_cast<int>(counts.argmax().item<std::int64_t>());

    nets::Networks n = session.nets;
    n.train(false);
    if (!n.layout_gen || n.cfg.net.layout_channels == 0) throw std::invalid_argument("variant has no layout predictor");
    torch::NoGradGuard ng;
    for (int id : identity_ids) {
        const auto& frames = store.frames_of(id);
        if (static_cast<int>(frames.size()) <= k) throw std::invalid_argument("identity has too few frames for K");
        const std::vector<dataio::LoadedFrame> sources(frames.begin(), frames.begin() + k);
        const auto z = n.encode(trainer::stack_sources(sources));
        for (size_t i = k; i < frames.size(); ++i) {
            const auto& f = frames[i];
            if (!f.segmentation.defined()) throw std::runtime_error("held-out frames need segmentation");
            const auto pred = n.layout_gen->forward(f.contour.unsqueeze(0), z.z_layout).logits[0].argmax(0);
            out.model += metrics::mean_iou(pred, f.segmentation, classes);
            out.majority += metrics::mean_iou(torch::full_like(f.segmentation, out.majority_class), f.segmentation, classes);
            ++out.frames;
        }
    }
    if (out.frames == 0) throw std::invalid_argument("no held-out frames");
    out.model /= out.frames;
    out.majority /= out.frames;
    return out;
}

json AblationReport::to_json() const {
    json rows_json = json::array();
    for (const auto& r : rows) {
        rows_json.push_back({{"variant", nets::variant_name(r.variant)},
                             {"psnr", r.mean.psnr},
                             {"ssim", r.mean.ssim},
                             {"lpips", r.mean.lpips},
                             {"id_sim", r.mean.id_sim},
                             {"nmke", r.mean.nmke},
                             {"fid", r.fid},
                             {"count", r.mean.count},
                             {"checkpoint", r.checkpoint.string()}});
    }
    return {{"rows", rows_json}};
}

std::string AblationReport::to_table() const {
    std::string out = metrics::table_header() + "\n";
    for (const auto& r : rows) out += metrics::table_row(nets::variant_name(r.variant), r.mean, r.fid) + "\n";
    return out;
}

const AblationRow& AblationReport::row(nets::Variant v) const {
    for (const auto& r : rows)
        if (r.variant == v) return r;
    throw std::out_of_range("ablation report has no row for " + nets::variant_name(v));
}

AblationReport run_ablation(const Config& cfg, const dataio::FrameStore& store, const AblationOptions& opts) {
    std::vector<nets::Variant> order;
    for (auto v : nets::all_variants())
        if (std::find(opts.variants.begin(), opts.variants.end(), v) != opts.variants.end()) order.push_back(v);
    if (order.empty()) throw std::invalid_argument("no variants to run");
    const auto& test_ids = store.index().test_ids;
    if (test_ids.empty()) throw std::invalid_argument("ablation needs held-out test identities");
    // Every variant's config must be valid before anything trains.
    for (auto v : order) {
        auto c = cfg;
        c.set("variant.name", nets::variant_name(v));
        variant_config(c);
        trainer::schedule_from_config(c, trainer::Stage::kFull);
    }
    const bool write = !opts.out_dir.empty();
    if (write) fs::create_directories(opts.out_dir);
    auto dir = [&](const std::string& name) { return write ? opts.out_dir / name : fs::path(); };

    const auto identity = trainer::train_identity(cfg, store, store.index().train_ids);
    std::optional<fs::path> pretrained;
    AblationReport report;
    for (auto v : order) {
        const auto name = nets::variant_name(v);
        try {
            auto c = cfg;
            c.set("variant.name", name);
            trainer::RunOptions run;
            run.identity = identity;
            run.out_dir = dir(name);
            if (v == nets::Variant::kLearnedSeg || v == nets::Variant::kLatentLayout) {
                if (!pretrained) {
                    auto pc = cfg;
                    pc.set("variant.name", "latent_layout");
                    trainer::RunOptions pre;
                    pre.out_dir = write ? opts.out_dir / "pretrain" : fs::temp_directory_path() / "lsr_ablation_pretrain";
                    pretrained = trainer::pretrain_layout(pc, store, pre).final_checkpoint;
                }
                run.init_checkpoint = pretrained;
            }
            const auto result = trainer::train_full(c, store, run);
            AblationRow row;
            row.variant = v;
            row.checkpoint = result.final_checkpoint;
            HeldOutOptions ho;
            ho.k = opts.k;
            const auto m = evaluate_session(*result.session, store, test_ids, ho);
            row.mean = m.mean;
            row.fid = m.fid;
            report.rows.push_back(row);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw std::runtime_error("variant " + name + " failed: " + e.what());
        }
    }
    if (write) {
        std::ofstream(opts.out_dir / "ablation.json") << report.to_json().dump(2) << "\n";
        std::ofstream(opts.out_dir / "ablation.txt") << report.to_table();
    }
    return report;
}

}  // namespace lsr::pipeline
