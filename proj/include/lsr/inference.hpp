// SPDX-License-Identifier: Apache-2.0
//
// Few-shot embedding, landmark-driven reenactment, occluder probes and labeled
// comparison grids.

#ifndef LSR_INFERENCE_HPP
#define LSR_INFERENCE_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "lsr/dataio.hpp"
#include "lsr/image.hpp"
#include "lsr/landmarks.hpp"
#include "lsr/trainer.hpp"

namespace lsr::inference {

struct AvatarEmbedding {
    nets::LatentPair latents;  // each (1, D)
    int identity_id = 0;
    int k = 0;
    std::string checkpoint_hash;
};

/// Encodes each shot on its own in eval mode and aggregates over the shots.
/// Throws std::invalid_argument on no frames or mixed identities.
AvatarEmbedding embed(const trainer::Session& session, const std::vector<dataio::LoadedFrame>& shots);

/// avatar.bin: "LSRAVTR1", u32 little-endian manifest length, manifest JSON,
/// then z_layout and z_style as little-endian float32.
void save_avatar(const AvatarEmbedding& e, const std::filesystem::path& path);
AvatarEmbedding load_avatar(const std::filesystem::path& path);

enum class Mode { kSelf, kCross };

struct ReenactmentRequest {
    AvatarEmbedding embedding;
    std::vector<LandmarkSet> driving;
    Mode mode = Mode::kSelf;
    std::vector<torch::Tensor> driving_segmentation;  // (H, W) per frame; upper_bound only
};

struct ReenactOptions {
    // Move and scale every driving frame so its centroid and RMS radius match this
    // shape. Off unless set.
    std::optional<LandmarkSet> normalize_to;
    bool zero_spatial = false;
};

struct Reenactment {
    std::vector<torch::Tensor> images;   // (3, H, W) in [-1, 1]
    std::vector<torch::Tensor> layouts;  // (C, H, W) probabilities; empty without a layout head
};

/// Frame-by-frame: rasterize, predict the layout, synthesize. No state is carried
/// between frames. Throws ConfigError when the embedding came from another
/// architecture and std::invalid_argument on an empty driving sequence.
Reenactment reenact(const trainer::Session& session, const ReenactmentRequest& request,
                    const ReenactOptions& opts = {});

LandmarkSet match_shape(const LandmarkSet& driver, const LandmarkSet& reference);

/// Channel argmax painted with a fixed palette.
Image colorize_layout(const torch::Tensor& probs);
const std::vector<std::array<float, 3>>& layout_palette();

/// Writes %04d.png per frame and layout_%04d.png when layouts are present.
void write_reenactment(const Reenactment& r, const std::filesystem::path& out_dir, bool with_layouts);

struct OccluderProbe {
    double multi_shot_l1 = 0;   // K shots, one of them occluded
    double single_shot_l1 = 0;  // only the occluded shot
    double clean_distance = 0;  // latent distance between clean and occluded K-shot embeddings
    double mask_fraction = 0;
};

/// Occludes shots[index], reenacts that frame's clean landmarks from the K-shot and
/// the 1-shot embedding and measures L1 to the clean frame inside the occluder mask.
OccluderProbe occluder_probe(const trainer::Session& session, const std::vector<dataio::LoadedFrame>& shots,
                             std::size_t index, std::uint64_t seed);

struct GridRow {
    std::string label;
    std::vector<Image> frames;  // HxWx3 in [0, 1]
};

inline constexpr int kGridGutter = 4;
inline constexpr int kGridLabelHeight = 14;

/// Rows stacked top to bottom, each under a label band:
/// width = n*W + (n+1)*gutter, height = rows*(label + H + gutter) + gutter.
/// Throws std::invalid_argument on no rows, empty rows or unequal lengths/sizes.
Image compose_grid(const std::vector<GridRow>& rows);
void emit_grid(const std::vector<GridRow>& rows, const std::filesystem::path& out_path);

}  // namespace lsr::inference

#endif  // LSR_INFERENCE_HPP
