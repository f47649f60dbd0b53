// SPDX-License-Identifier: Apache-2.0

#ifndef LSR_LANDMARKS_HPP
#define LSR_LANDMARKS_HPP

#include <array>
#include <filesystem>

namespace lsr {

inline constexpr int kNumLandmarks = 68;

/// Normalized image coordinates; (0,0) is the top-left corner, (1,1) the bottom-right.
struct Point2 {
    float x = 0.0f;
    float y = 0.0f;
    bool operator==(const Point2&) const = default;
};

/// The standard 68-point facial landmark layout:
/// jaw 0-16, brows 17-21 / 22-26, nose bridge 27-30, nose base 31-35,
/// eyes 36-41 / 42-47, outer lips 48-59, inner lips 60-67.
struct LandmarkSet {
    std::array<Point2, kNumLandmarks> points{};
    bool operator==(const LandmarkSet&) const = default;
};

/// Index of the horizontally mirrored partner of landmark i (e.g. 0 <-> 16, 36 <-> 45).
int mirror_partner(int i);

/// x -> 1 - x for every point, indices unchanged.
LandmarkSet mirror_coordinates(const LandmarkSet& lmk);

/// JSON array of 68 [x, y] pairs.
void write_landmarks(const LandmarkSet& lmk, const std::filesystem::path& path);
LandmarkSet read_landmarks(const std::filesystem::path& path);

}  // namespace lsr

#endif  // LSR_LANDMARKS_HPP
