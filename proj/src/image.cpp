// SPDX-License-Identifier: Apache-2.0

#include "lsr/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>

namespace lsr {

namespace {

std::uint8_t to_byte(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

void write_png(const Image& image, const std::filesystem::path& path) {
    if (image.channels != 1 && image.channels != 3) {
        throw std::invalid_argument("write_png: unsupported channel count " + std::to_string(image.channels));
    }
    const int type = image.channels == 3 ? CV_8UC3 : CV_8UC1;
    cv::Mat mat(image.height, image.width, type);
    for (int y = 0; y < image.height; ++y) {
        auto* row = mat.ptr<std::uint8_t>(y);
        for (int x = 0; x < image.width; ++x) {
            if (image.channels == 3) {
                // OpenCV stores BGR.
                row[3 * x + 0] = to_byte(image.at(y, x, 2));
                row[3 * x + 1] = to_byte(image.at(y, x, 1));
                row[3 * x + 2] = to_byte(image.at(y, x, 0));
            } else {
                row[x] = to_byte(image.at(y, x, 0));
            }
        }
    }
    if (!cv::imwrite(path.string(), mat)) {
        throw std::runtime_error("failed to write image: " + path.string());
    }
}

Image read_png(const std::filesystem::path& path) {
    cv::Mat mat = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (mat.empty()) {
        throw std::runtime_error("failed to read image: " + path.string());
    }
    Image image(mat.rows, mat.cols, 3);
    for (int y = 0; y < mat.rows; ++y) {
        const auto* row = mat.ptr<std::uint8_t>(y);
        for (int x = 0; x < mat.cols; ++x) {
            image.at(y, x, 0) = row[3 * x + 2] / 255.0f;
            image.at(y, x, 1) = row[3 * x + 1] / 255.0f;
            image.at(y, x, 2) = row[3 * x + 0] / 255.0f;
        }
    }
    return image;
}

void write_class_png(const ClassMap& map, const std::filesystem::path& path) {
    cv::Mat mat(map.height, map.width, CV_8UC1);
    for (int y = 0; y < map.height; ++y) {
        std::copy_n(map.labels.begin() + static_cast<std::ptrdiff_t>(y) * map.width, map.width,
                    mat.ptr<std::uint8_t>(y));
    }
    if (!cv::imwrite(path.string(), mat)) {
        throw std::runtime_error("failed to write class map: " + path.string());
    }
}

ClassMap read_class_png(const std::filesystem::path& path, int num_classes) {
    cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (mat.empty()) {
        throw std::runtime_error("failed to read class map: " + path.string());
    }
    if (mat.type() != CV_8UC1) {
        throw std::runtime_error("class map is not 8-bit single channel: " + path.string());
    }
    ClassMap map(mat.rows, mat.cols);
    for (int y = 0; y < mat.rows; ++y) {
        const auto* row = mat.ptr<std::uint8_t>(y);
        for (int x = 0; x < mat.cols; ++x) {
            if (row[x] >= num_classes) {
                throw std::runtime_error("unknown class index " + std::to_string(row[x]) + " in " + path.string());
            }
            map.at(y, x) = row[x];
        }
    }
    return map;
}

torch::Tensor image_to_tensor(const Image& image, float lo, float hi) {
    auto hwc = torch::from_blob(const_cast<float*>(image.data.data()), {image.height, image.width, image.channels},
                                torch::kFloat32);
    return (hwc.permute({2, 0, 1}).contiguous() * (hi - lo) + lo).contiguous();
}

Image tensor_to_image(const torch::Tensor& chw, float lo, float hi) {
    TORCH_CHECK(chw.dim() == 3, "tensor_to_image expects CHW");
    auto hwc = ((chw.detach().to(torch::kFloat32) - lo) / (hi - lo)).clamp(0.0, 1.0).permute({1, 2, 0}).contiguous();
    Image image(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), static_cast<int>(hwc.size(2)));
    std::copy_n(hwc.data_ptr<float>(), image.data.size(), image.data.begin());
    return image;
}

torch::Tensor class_map_to_tensor(const ClassMap& map) {
    auto t = torch::empty({map.height, map.width}, torch::kInt64);
    auto* dst = t.data_ptr<std::int64_t>();
    for (size_t i = 0; i < map.labels.size(); ++i) dst[i] = map.labels[i];
    return t;
}

ClassMap tensor_to_class_map(const torch::Tensor& hw) {
    auto t = hw.detach().to(torch::kInt64).contiguous();
    ClassMap map(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)));
    const auto* src = t.data_ptr<std::int64_t>();
    for (size_t i = 0; i < map.labels.size(); ++i) map.labels[i] = static_cast<std::uint8_t>(src[i]);
    return map;
}

Image quantize_8bit(const Image& image) {
    Image out = image;
    for (auto& v : out.data) v = to_byte(v) / 255.0f;
    return out;
}

}  // namespace lsr
