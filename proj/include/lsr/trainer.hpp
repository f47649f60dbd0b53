// SPDX-License-Identifier: Apache-2.0
//
// Three-stage training: layout pre-training, full pipeline training and subject
// fine-tuning, with checkpointing and exact resume.

#ifndef LSR_TRAINER_HPP
#define LSR_TRAINER_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "lsr/config.hpp"
#include "lsr/dataio.hpp"
#include "lsr/losses.hpp"
#include "lsr/nets.hpp"

namespace lsr::trainer {

enum class Stage { kPretrain, kFull, kFinetune };
std::string stage_name(Stage s);
Stage parse_stage(const std::string& s);

struct StageSchedule {
    Stage stage = Stage::kFull;
    std::int64_t steps = 1;
    std::int64_t epochs = 1;
    std::int64_t extra_steps = 0;  // appended after the decay at the final rate
    double lr = 1e-3;
    double beta1 = 0.0;
    double beta2 = 0.999;

    /// Throws ConfigError on non-positive durations or learning rate.
    void validate() const;
    std::int64_t total_steps() const { return steps + extra_steps; }
    std::int64_t steps_per_epoch() const;
    /// 0-based epoch of a 0-based step index.
    std::int64_t epoch_of(std::int64_t step) const;
    /// Constant until the final epoch, then linear down to lr / 100 at the last step.
    double lr_at(std::int64_t step) const;
};

StageSchedule schedule_from_config(const Config& cfg, Stage stage, int k = 1);

/// One JSON-lines record: {step, xent, rec_perc, rec_id, rec_l1, g_adv, d_adv, r1, latent_l2}.
struct StepLog {
    std::int64_t step = 0;
    double xent = 0, rec_perc = 0, rec_id = 0, rec_l1 = 0, g_adv = 0, d_adv = 0, r1 = 0, latent_l2 = 0;

    nlohmann::json to_json() const;
    static StepLog from_json(const nlohmann::json& j);
};

/// Networks, optimizers and frozen backbones of one run.
class Session {
public:
    /// Builds the variant's networks from schedule.seed plus the generic backbone.
    explicit Session(const Config& cfg);

    Config config;
    nets::Networks nets;
    std::shared_ptr<losses::GenericBackbone> generic;
    std::shared_ptr<losses::IdentityBackbone> identity;  // may be null
    std::map<std::string, std::unique_ptr<torch::optim::Adam>> optimizers;
    Stage stage = Stage::kFull;
    std::int64_t step = 0;  // completed steps in the current stage
    std::int64_t epoch = 0;

    /// Fresh Adam optimizers (betas from the schedule) for the named networks.
    void reset_optimizers(const std::vector<std::string>& names, const StageSchedule& schedule);
    void set_learning_rate(double lr);

    /// Writes the checkpoint directory: one blob per network, optimizer blobs,
    /// backbone blobs and manifest.json.
    void save(const std::filesystem::path& dir) const;
    /// Restores everything `save` wrote.
    static Session load(const std::filesystem::path& dir);
    /// Loads only the networks and identity backbone of a checkpoint into this session.
    /// Throws ConfigError when the architectures differ.
    void load_networks(const std::filesystem::path& dir);

    /// Deep copy (networks, backbones, optimizer state).
    Session clone() const;
};

/// Reads manifest.json of a checkpoint directory.
nlohmann::json read_manifest(const std::filesystem::path& dir);
/// ckpt_<step> directory with the largest step under out_dir, if any.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& out_dir);

/// Trains the identity backbone on the frames of the given identities.
std::shared_ptr<losses::IdentityBackbone> train_identity(const Config& cfg, const dataio::FrameStore& store,
                                                         const std::vector<int>& identity_ids);

struct RunOptions {
    std::filesystem::path out_dir;                     // empty: no files are written
    std::optional<std::filesystem::path> init_checkpoint;
    bool resume = false;
    std::int64_t stop_after = -1;  // stop (and checkpoint) once this many steps are complete
    std::shared_ptr<losses::IdentityBackbone> identity;  // reused instead of training one
    std::function<void(const StepLog&)> on_step;
};

struct RunResult {
    std::shared_ptr<Session> session;
    std::vector<StepLog> log;  // steps run by this call
    std::filesystem::path final_checkpoint;  // empty when no out_dir
};

/// Trains E and G^l on the pre-training objective. Requires a variant with a layout
/// predictor and segmentation for every training frame.
RunResult pretrain_layout(const Config& cfg, const dataio::FrameStore& store, const RunOptions& opts);

/// Full pipeline training with alternating discriminator / generator steps.
RunResult train_full(const Config& cfg, const dataio::FrameStore& store, const RunOptions& opts);

struct FinetuneOptions {
    std::int64_t steps_per_shot = 40;
    double lr = 1e-3;
    std::int64_t steps_override = -1;  // > 0 replaces steps_per_shot * K
};

/// Fine-tunes G^l, G^s and D of a copy of `meta` on one subject's K frames with the
/// encoders frozen and the latents computed once. Returns the fine-tuned session.
Session finetune_subject(const Session& meta, const std::vector<dataio::LoadedFrame>& shots,
                         const FinetuneOptions& opts, std::vector<StepLog>* log = nullptr);

/// Sources tensor (1, K, 6, H, W) from loaded frames.
torch::Tensor stack_sources(const std::vector<dataio::LoadedFrame>& shots);

}  // namespace lsr::trainer

#endif  // LSR_TRAINER_HPP
