// SPDX-License-Identifier: Apache-2.0
//
// End-to-end runs shared by the command line and the acceptance gate: held-out
// self-reenactment evaluation and the five-variant ablation.

#ifndef LSR_PIPELINE_HPP
#define LSR_PIPELINE_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lsr/metrics.hpp"
#include "lsr/trainer.hpp"

namespace lsr::pipeline {

struct HeldOutOptions {
    int k = 4;
    int max_targets = 0;  // per identity; 0 = every remaining frame
    std::optional<trainer::FinetuneOptions> finetune;  // fine-tune on the K sources first
};

/// For each identity the first K frames are the sources and the later frames the
/// targets; every target is reenacted from its landmarks. Sample names are
/// id<identity>_f<frame>.
std::vector<metrics::EvalSample> held_out_samples(const trainer::Session& session, const dataio::FrameStore& store,
                                                  const std::vector<int>& identity_ids, const HeldOutOptions& opts);

/// Writes outputs and ground truths as `<name>.png` plus landmark sidecars, the
/// layout evaluate_directory reads.
void write_eval_set(const std::vector<metrics::EvalSample>& samples, const std::filesystem::path& outputs,
                    const std::filesystem::path& truths);

/// Held-out metrics with the session's identity backbone as the ID-SIM embedder
/// and its generic backbone for LPIPS and FID features.
metrics::MetricReport evaluate_session(const trainer::Session& session, const dataio::FrameStore& store,
                                       const std::vector<int>& identity_ids, const HeldOutOptions& opts);

struct LayoutIou {
    double model = 0;     // mean IoU of the predicted layout argmax
    double majority = 0;  // mean IoU of predicting `majority_class` everywhere
    int majority_class = 0;
    int frames = 0;
};

/// Scores the predicted layouts of held-out frames (first K frames as sources, the
/// rest as targets) against the oracle segmentation. The majority class is the most
/// frequent label over the frames of `reference_ids`.
LayoutIou layout_iou(const trainer::Session& session, const dataio::FrameStore& store,
                     const std::vector<int>& identity_ids, const std::vector<int>& reference_ids, int k);

struct AblationOptions {
    std::vector<nets::Variant> variants;  // run in the fixed table order
    std::filesystem::path out_dir;
    int k = 4;
};

struct AblationRow {
    nets::Variant variant = nets::Variant::kBaseline;
    metrics::Aggregate mean;
    double fid = 0;
    std::filesystem::path checkpoint;
};

struct AblationReport {
    std::vector<AblationRow> rows;
    nlohmann::json to_json() const;
    std::string to_table() const;
    const AblationRow& row(nets::Variant v) const;
};

/// Trains every requested variant with the same config, seed and budget (one shared
/// identity backbone, one shared layout pre-training) and evaluates each on the
/// test identities. Writes <variant>/ checkpoints plus ablation.json / ablation.txt.
AblationReport run_ablation(const Config& cfg, const dataio::FrameStore& store, const AblationOptions& opts);

}  // namespace lsr::pipeline

#endif  // LSR_PIPELINE_HPP
