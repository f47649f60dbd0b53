// SPDX-License-Identifier: Apache-2.0
//
// Plain-memory images and class maps, PNG I/O, and tensor conversion.

#ifndef LSR_IMAGE_HPP
#define LSR_IMAGE_HPP

#include <cstdint>
#include <filesystem>
#include <vector>

#include <torch/torch.h>

namespace lsr {

/// Interleaved HxWxC float image. Values are expected in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c), data(static_cast<size_t>(h) * w * c, fill) {}

    float& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
    float at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }

    bool operator==(const Image&) const = default;
};

/// HxW map of small integer class labels.
struct ClassMap {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> labels;

    ClassMap() = default;
    ClassMap(int h, int w, std::uint8_t fill = 0)
        : height(h), width(w), labels(static_cast<size_t>(h) * w, fill) {}

    std::uint8_t& at(int y, int x) { return labels[static_cast<size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return labels[static_cast<size_t>(y) * width + x]; }

    bool operator==(const ClassMap&) const = default;
};

// 8-bit PNG. RGB images are written with three channels, quantized by rounding.
void write_png(const Image& image, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

void write_class_png(const ClassMap& map, const std::filesystem::path& path);
/// Throws if any label is >= num_classes.
ClassMap read_class_png(const std::filesystem::path& path, int num_classes);

/// HWC [0,1] image -> CHW float tensor mapped to [lo, hi].
torch::Tensor image_to_tensor(const Image& image, float lo = -1.0f, float hi = 1.0f);
/// CHW tensor in [lo, hi] -> HWC image in [0,1] (values clamped).
Image tensor_to_image(const torch::Tensor& chw, float lo = -1.0f, float hi = 1.0f);

torch::Tensor class_map_to_tensor(const ClassMap& map);
ClassMap tensor_to_class_map(const torch::Tensor& hw);

/// Round-trip through 8-bit quantization, as PNG storage does.
Image quantize_8bit(const Image& image);

}  // namespace lsr

#endif  // LSR_IMAGE_HPP
