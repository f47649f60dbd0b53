// SPDX-License-Identifier: Apache-2.0
//
// Dataset indexing, landmark contour rasterization, segmentation merging and
// K-shot episode sampling.

#ifndef LSR_DATAIO_HPP
#define LSR_DATAIO_HPP

#include <array>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <thread>
#include <vector>

#include <torch/torch.h>

#include "lsr/image.hpp"
#include "lsr/landmarks.hpp"

namespace lsr::dataio {

using ContourImage = Image;

inline constexpr int kNumContourParts = 8;

/// One fixed color per face part: jaw, right brow, left brow, nose, right eye,
/// left eye, outer lips, inner lips.
const std::array<std::array<float, 3>, kNumContourParts>& contour_palette();

/// Draws the part polylines in their palette colors. Line width is one pixel at
/// 64x64 and scales with min(H, W). Points outside [0,1] are clipped to the border.
ContourImage rasterize_landmarks(const LandmarkSet& lmk, int height, int width);

/// Coarse map supplies hair/clothes/background, fine map supplies eyes/nose/mouth,
/// skin fills the rest. Throws std::invalid_argument on shape mismatch.
ClassMap merge_segmentations(const ClassMap& coarse, const ClassMap& fine);

struct FrameRecord {
    int identity_id = 0;
    int frame_index = 0;
    std::filesystem::path image;
    std::filesystem::path landmarks;
    std::filesystem::path segmentation;  // empty when the dataset has no segmentation for this frame
};

struct SplitSpec {
    std::vector<int> train;
    std::vector<int> test;
};

/// {"train": [ids...], "test": [ids...]}
SplitSpec read_split_spec(const std::filesystem::path& path);
void write_split_spec(const SplitSpec& split, const std::filesystem::path& path);
/// First n_train ids (ascending) go to train, the rest to test.
SplitSpec split_first_n(const std::vector<int>& ids, int n_train);

struct DatasetIndex {
    std::filesystem::path root;
    std::map<int, std::vector<FrameRecord>> frames;  // identity -> frames ordered by index
    std::vector<int> train_ids;
    std::vector<int> test_ids;

    std::vector<int> identity_ids() const;
    size_t num_frames() const;
    bool has_segmentation() const;
};

/// Scans root for <id>/<frame>.png with companion .lmk.json (and optional .seg.png).
/// Without a split every identity is a training identity.
DatasetIndex load_dataset(const std::filesystem::path& root, const std::optional<SplitSpec>& split = std::nullopt);

struct LoadedFrame {
    int identity_id = 0;
    int frame_index = 0;
    torch::Tensor image;    // 3xHxW in [-1, 1]
    torch::Tensor contour;  // 3xHxW in [0, 1]
    torch::Tensor segmentation;  // HxW int64, undefined when absent
    LandmarkSet landmarks;
};

/// Decoded frames of a dataset, held in memory. Read-only after construction.
class FrameStore {
public:
    FrameStore() = default;
    /// Decodes every indexed frame; errors name the offending file.
    FrameStore(DatasetIndex index, int resolution);

    const DatasetIndex& index() const { return index_; }
    int resolution() const { return resolution_; }
    const std::vector<LoadedFrame>& frames_of(int identity_id) const;

private:
    DatasetIndex index_;
    int resolution_ = 0;
    std::map<int, std::vector<LoadedFrame>> frames_;
};

struct Episode {
    int identity_id = 0;
    int k = 0;
    std::vector<int> source_frames;
    int target_frame = 0;
    std::vector<torch::Tensor> source_images;    // 3xHxW
    std::vector<torch::Tensor> source_contours;  // 3xHxW
    torch::Tensor target_contour;
    torch::Tensor target_image;
    torch::Tensor target_segmentation;  // may be undefined
    std::vector<LandmarkSet> source_landmarks;
    LandmarkSet target_landmarks;
};

/// Draws K+1 distinct frames; the first K are sources, the last is the target.
Episode sample_episode(const FrameStore& store, int identity_id, int k, std::mt19937_64& rng);
/// Builds an episode from explicit frame choices.
Episode make_episode(const FrameStore& store, int identity_id, const std::vector<int>& source_frames,
                     int target_frame);

struct Batch {
    torch::Tensor sources;  // N x K x 6 x H x W (RGB then contour)
    torch::Tensor target_contour;       // N x 3 x H x W
    torch::Tensor target_image;         // N x 3 x H x W
    torch::Tensor target_segmentation;  // N x H x W, undefined if any episode lacks it
    std::vector<int> identity_ids;
    int64_t size() const { return sources.size(0); }
    int64_t k() const { return sources.size(1); }
};

/// Throws std::invalid_argument on an empty list or mixed K / resolution.
Batch batch_episodes(const std::vector<Episode>& episodes);

/// A training batch for a given step, drawn from the given identity pool with an
/// RNG seeded from (seed, step) so the stream is independent of consumer timing.
Batch sample_batch(const FrameStore& store, const std::vector<int>& identity_pool, int batch_size, int k,
                   std::uint64_t seed, std::int64_t step);

/// Fixed-capacity reorder buffer between prefetch workers and the trainer.
/// Workers claim step numbers in increasing order; the consumer receives them in
/// order regardless of which worker finished first.
class BatchPrefetcher {
public:
    using Producer = std::function<Batch(std::int64_t step)>;

    BatchPrefetcher(Producer producer, std::int64_t first_step, std::int64_t end_step, int num_workers,
                    int capacity);
    ~BatchPrefetcher();
    BatchPrefetcher(const BatchPrefetcher&) = delete;
    BatchPrefetcher& operator=(const BatchPrefetcher&) = delete;

    /// Blocks until the batch for the next step is ready. Rethrows worker errors.
    Batch next();

private:
    void work();

    Producer producer_;
    std::int64_t next_claim_;
    std::int64_t next_deliver_;
    std::int64_t end_;
    int capacity_;
    bool stop_ = false;
    std::exception_ptr error_;
    std::map<std::int64_t, Batch> ready_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::vector<std::thread> workers_;
};

}  // namespace lsr::dataio

#endif  // LSR_DATAIO_HPP
