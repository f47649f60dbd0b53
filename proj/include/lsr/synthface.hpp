// SPDX-License-Identifier: Apache-2.0
//
// Procedural 2D faces with analytically exact landmarks and segmentations.
//
// A face is a stack of anti-aliased layers (hair, neck, clothes, head, features)
// drawn in normalized image coordinates. Facial features live on the unit head
// ellipsoid and are projected orthographically after yaw/pitch rotation, so the
// landmark set is exact and mirror-symmetric under yaw -> -yaw.

#ifndef LSR_SYNTHFACE_HPP
#define LSR_SYNTHFACE_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lsr/image.hpp"
#include "lsr/landmarks.hpp"

namespace lsr::synthface {

enum SegClass : std::uint8_t {
    kBackground = 0,
    kHair = 1,
    kSkin = 2,
    kEyes = 3,
    kNose = 4,
    kMouth = 5,
    kClothes = 6,
};
inline constexpr int kNumClasses = 7;

using Color = std::array<float, 3>;

struct IdentitySpec {
    int identity_id = 0;
    double head_a = 0.2;  // horizontal semi-axis, normalized image units
    double head_b = 0.25;  // vertical semi-axis
    double hair_extent = 0.5;
    Color skin{}, hair{}, clothes{}, background{};
    double eye_spacing = 0.36;  // eye centre offset from the midline, head-local units
    double nose_length = 1.0;
    double mouth_width = 0.32;  // half-width, head-local units

    bool operator==(const IdentitySpec&) const = default;
};

struct PoseSpec {
    double yaw = 0.0;    // [-0.6, 0.6] rad
    double pitch = 0.0;  // [-0.3, 0.3] rad
    double mouth_open = 0.0;
    double eyes_open = 1.0;
    double dx = 0.0;  // [-0.1, 0.1]
    double dy = 0.0;

    bool operator==(const PoseSpec&) const = default;
};

struct RenderedSample {
    Image image;  // HxWx3 in [0,1]
    LandmarkSet landmarks;
    ClassMap segmentation;  // labels in [0, kNumClasses)
    int identity_id = 0;
    PoseSpec pose;
};

struct OccludedSample {
    RenderedSample sample;
    ClassMap mask;  // 1 where pixels were overwritten
};

/// Ranges a sampled identity respects.
struct IdentityRanges {
    static constexpr double kHeadAMin = 0.17, kHeadAMax = 0.23;
    static constexpr double kHeadBMin = 0.22, kHeadBMax = 0.28;
    static constexpr double kHairMin = 0.1, kHairMax = 1.0;
    static constexpr double kEyeSpacingMin = 0.32, kEyeSpacingMax = 0.42;
    static constexpr double kNoseMin = 0.8, kNoseMax = 1.2;
    static constexpr double kMouthMin = 0.24, kMouthMax = 0.38;
};

IdentitySpec sample_identity(std::uint64_t seed);
IdentitySpec sample_identity(std::uint64_t seed, int identity_id);
PoseSpec sample_pose(std::uint64_t seed);

/// True if every field lies in its documented range.
bool valid(const IdentitySpec& id);
bool valid(const PoseSpec& pose);

/// Exact landmarks for (identity, pose), independent of resolution.
LandmarkSet face_landmarks(const IdentitySpec& id, const PoseSpec& pose);

/// Throws std::invalid_argument when height or width is below 32.
RenderedSample render(const IdentitySpec& id, const PoseSpec& pose, int height, int width);

/// Overwrites an opaque rectangle or horizontal bar covering 5-15% of the pixels.
OccludedSample inject_occluder(const RenderedSample& sample, std::uint64_t seed);

struct DatasetEntry {
    int identity_id = 0;
    int frame_index = 0;
    std::filesystem::path image;
    std::filesystem::path landmarks;
    std::filesystem::path segmentation;
};

struct DatasetManifest {
    std::filesystem::path root;
    std::vector<DatasetEntry> entries;
    std::string checksum;  // FNV-1a over every written file's bytes, in entry order
};

/// Writes ids.json and <id>/<frame>.{png,lmk.json,seg.png} under out_dir.
DatasetManifest make_dataset(int num_identities, int frames_per_identity, int resolution,
                             const std::filesystem::path& out_dir, std::uint64_t seed);

/// Stable seed derivation shared by every component that needs sub-streams.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace lsr::synthface

#endif  // LSR_SYNTHFACE_HPP
