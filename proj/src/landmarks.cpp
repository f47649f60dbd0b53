// SPDX-License-Identifier: Apache-2.0

#include "lsr/landmarks.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace lsr {

int mirror_partner(int i) {
    if (i < 0 || i >= kNumLandmarks) throw std::out_of_range("landmark index " + std::to_string(i));
    if (i <= 16) return 16 - i;
    if (i <= 26) return 43 - i;
    if (i <= 30) return i;
    if (i <= 35) return 66 - i;
    if (i <= 47) {
        static constexpr int kEyes[12] = {45, 44, 43, 42, 47, 46, 39, 38, 37, 36, 41, 40};
        return kEyes[i - 36];
    }
    if (i <= 54) return 102 - i;
    if (i <= 59) return 114 - i;
    if (i <= 64) return 124 - i;
    return 132 - i;
}

LandmarkSet mirror_coordinates(const LandmarkSet& lmk) {
    LandmarkSet out = lmk;
    for (auto& p : out.points) p.x = 1.0f - p.x;
    return out;
}

void write_landmarks(const LandmarkSet& lmk, const std::filesystem::path& path) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& p : lmk.points) j.push_back({p.x, p.y});
    std::ofstream out(path);
    if (!out) throw std::runtime_error("failed to open for writing: " + path.string());
    out << j.dump() << '\n';
    if (!out) throw std::runtime_error("failed to write: " + path.string());
}

LandmarkSet read_landmarks(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("failed to open landmarks: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("corrupt landmarks file " + path.string() + ": " + e.what());
    }
    if (!j.is_array() || j.size() != kNumLandmarks) {
        throw std::runtime_error("landmarks file must hold 68 points: " + path.string());
    }
    LandmarkSet lmk;
    for (int i = 0; i < kNumLandmarks; ++i) {
        const auto& p = j[i];
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
            throw std::runtime_error("malformed landmark " + std::to_string(i) + " in " + path.string());
        }
        lmk.points[i] = {p[0].get<float>(), p[1].get<float>()};
        if (!std::isfinite(lmk.points[i].x) || !std::isfinite(lmk.points[i].y)) {
            throw std::runtime_error("non-finite landmark in " + path.string());
        }
    }
    return lmk;
}

}  // namespace lsr
