// SPDX-License-Identifier: Apache-2.0
//
// PSNR, SSIM, LPIPS-like distance, ID-SIM, NMKE and FID, plus pose-variance
// bucketed reports over directories of output / ground-truth pairs.

#ifndef LSR_METRICS_HPP
#define LSR_METRICS_HPP

#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "lsr/landmarks.hpp"
#include "lsr/losses.hpp"

namespace lsr::metrics {

/// PSNR of identical inputs.
inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

/// 10 log10(max^2 / MSE). Throws std::invalid_argument on a shape mismatch.
double psnr(const torch::Tensor& x, const torch::Tensor& y, double max_val = 1.0);

/// Mean SSIM over channels and valid 11x11 windows (Gaussian, sigma 1.5),
/// K1 = 0.01, K2 = 0.03. Inputs (C, H, W) or (H, W), H and W at least 11.
double ssim(const torch::Tensor& x, const torch::Tensor& y, double max_val = 1.0);

/// Per-layer features unit-normalized over channels, squared differences summed over
/// channels, averaged spatially and summed over layers. Inputs (N, 3, H, W) in [-1, 1];
/// returns the batch mean.
double lpips_like(losses::PerceptualBackbone& backbone, const torch::Tensor& x, const torch::Tensor& y);

/// Cosine similarity of two vectors. Throws std::domain_error if either has zero norm.
double cosine(const torch::Tensor& a, const torch::Tensor& b);
/// Cosine of the embeddings of single images (3, H, W) or (1, 3, H, W) in [-1, 1].
double id_sim(losses::IdentityBackbone& embedder, const torch::Tensor& x, const torch::Tensor& y);

/// Mean over classes of |pred ∩ truth| / |pred ∪ truth| for integer label maps of
/// equal shape, skipping classes absent from both. Throws on a shape mismatch.
double mean_iou(const torch::Tensor& pred, const torch::Tensor& truth, std::int64_t num_classes);

enum class NmkeNorm { kImageSide, kInterocular };
/// Mean Euclidean distance over the 68 points in normalized image coordinates
/// (side normalization), or divided by the ground-truth outer eye-corner distance.
double nmke(const LandmarkSet& pred, const LandmarkSet& gt, NmkeNorm norm = NmkeNorm::kImageSide);

inline constexpr double kFidEpsilon = 1e-6;
/// Frechet distance between Gaussian fits of (N, d) and (M, d) feature sets.
/// Throws std::invalid_argument on non-finite features or mismatched widths.
double fid(const torch::Tensor& real, const torch::Tensor& fake, double eps = kFidEpsilon);
/// Global average pool of every backbone layer, concatenated: (N, sum of widths).
torch::Tensor fid_features(losses::PerceptualBackbone& backbone, const torch::Tensor& images);

enum class PoseBucket { kLow, kMedium, kHigh };
std::string bucket_name(PoseBucket b);

struct EvalSample {
    std::string name;
    torch::Tensor output;  // (3, H, W) in [-1, 1]
    torch::Tensor truth;
    LandmarkSet output_landmarks;
    LandmarkSet truth_landmarks;
    std::optional<LandmarkSet> source_landmarks;  // for pose-variance bucketing
};

struct SampleScores {
    std::string name;
    double psnr = 0, ssim = 0, lpips = 0, id_sim = 0, nmke = 0;
    double pose_nmke = 0;  // source vs target
    PoseBucket bucket = PoseBucket::kLow;
};

struct Aggregate {
    std::size_t count = 0;
    double psnr = 0, ssim = 0, lpips = 0, id_sim = 0, nmke = 0;
};

struct MetricReport {
    std::vector<SampleScores> samples;  // sorted by name
    Aggregate mean;
    double fid = 0;
    std::map<std::string, Aggregate> buckets;  // low / medium / high

    nlohmann::json to_json() const;
    std::string to_csv() const;
    /// Writes report.json and report.csv.
    void write(const std::filesystem::path& dir) const;
};

struct EvalOptions {
    NmkeNorm norm = NmkeNorm::kImageSide;
};

/// Scores every pair; buckets split at the 33rd / 66th percentile of the
/// source-target NMKE ranking (ties broken by name).
MetricReport evaluate(std::vector<EvalSample> samples, losses::IdentityBackbone& embedder,
                      losses::PerceptualBackbone& backbone, const EvalOptions& opts = {});

/// Landmarks of an image file; the default reads `<stem>.lmk.json` next to it.
using LandmarkFn = std::function<LandmarkSet(const std::filesystem::path& image)>;
LandmarkSet sidecar_landmarks(const std::filesystem::path& image);

/// Pairs `<name>.png` files of both directories. Output landmarks come from
/// `landmark_fn` when set, else the output's sidecar, else the ground truth's
/// sidecar (the driving pose). Source landmarks are read from `<stem>.src.lmk.json`
/// beside the ground truth when present. Unmatched files abort with a list.
MetricReport evaluate_directory(const std::filesystem::path& outputs, const std::filesystem::path& ground_truths,
                                const LandmarkFn& landmark_fn, losses::IdentityBackbone& embedder,
                                losses::PerceptualBackbone& backbone, const EvalOptions& opts = {});

/// "PSNR SSIM LPIPS ID-SIM NMKE FID" header and one formatted row.
std::string table_header();
std::string table_row(const std::string& label, const Aggregate& a, double fid);

}  // namespace lsr::metrics

#endif  // LSR_METRICS_HPP
