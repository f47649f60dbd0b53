// SPDX-License-Identifier: Apache-2.0
//
// Network building blocks and the four networks: the two-headed encoder, the
// layout generator (AdaIN UNet), the SPADE image generator and the
// discriminator, plus per-variant wiring.

#ifndef LSR_NETS_HPP
#define LSR_NETS_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace lsr::nets {

enum class Variant { kBaseline, kSpadeLandmarks, kLearnedSeg, kLatentLayout, kUpperBound };

/// Canonical names: baseline, spade_landmarks, learned_seg, latent_layout, upper_bound.
std::string variant_name(Variant v);
/// Accepts canonical names and the short CLI forms (spade, latent, upper).
Variant parse_variant(const std::string& name);
/// All five in report order.
const std::vector<Variant>& all_variants();

struct NetConfig {
    int resolution = 64;
    int layout_channels = 8;  // C
    int latent_dim = 512;
    int base_width = 32;
    int max_width = 512;
    int spade_hidden = 64;
    int disc_base_width = 32;
    int encoder_blocks = 5;
    bool separate_encoders = false;
    bool style_in_blocks = false;  // additionally modulate every SPADE block from z_style
};

struct LossWeights {
    double lambda_r = 0.1;     // weight of the auxiliary RGB term in pre-training
    double lambda_adv = 0.1;
    double lambda_l2 = 1e-4;   // latent regularizer
    double gamma_r1 = 10.0;
    double w_perceptual = 1.0;  // generic perceptual term inside the reconstruction loss
    double w_identity = 0.1;    // identity perceptual term
    double w_l1 = 1.0;
    double w_xent = 1.0;        // cross-entropy weight when segmentation supervision is active
};

struct VariantConfig {
    Variant variant = Variant::kLatentLayout;
    NetConfig net;
    LossWeights weights;

    bool uses_layout_generator() const;
    bool uses_image_generator() const;
    /// Channels of the spatial input fed to the SPADE blocks (layout ⧺ contour).
    int spatial_channels() const;
    /// Throws std::invalid_argument on negative weights or unusable sizes.
    void validate() const;
};

// ---------------------------------------------------------------------------
// Equalized learning rate layers: weights are stored as N(0,1) and multiplied by
// sqrt(2 / fan_in) on every forward pass.

class EqualizedLinearImpl : public torch::nn::Module {
public:
    EqualizedLinearImpl(int64_t in_features, int64_t out_features, bool bias = true, double bias_init = 0.0);
    torch::Tensor forward(const torch::Tensor& x);
    double scale() const { return scale_; }

    torch::Tensor weight;
    torch::Tensor bias;

private:
    double scale_;
};
TORCH_MODULE(EqualizedLinear);

class EqualizedConv2dImpl : public torch::nn::Module {
public:
    EqualizedConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel, bool bias = true);
    torch::Tensor forward(const torch::Tensor& x);
    double scale() const { return scale_; }

    torch::Tensor weight;
    torch::Tensor bias;

private:
    double scale_;
    int64_t padding_;
};
TORCH_MODULE(EqualizedConv2d);

/// Depthwise [1,2,1]x[1,2,1]/16 filter (reflect padding) then stride-2 subsampling.
/// Throws std::invalid_argument on odd height or width.
torch::Tensor blur_pool(const torch::Tensor& x);

/// Per-sample, per-channel normalization over space with biased variance.
torch::Tensor instance_norm(const torch::Tensor& x, double eps = 1e-5);

/// Instance-normalizes x (N,C,H,W) and imposes per-channel mean/std given as (N,C).
torch::Tensor adain(const torch::Tensor& x, const torch::Tensor& mean, const torch::Tensor& std, double eps = 1e-5);

/// Maps a latent to AdaIN (mean, std) for `channels` channels; std is softplus-positive
/// and starts at 1.
class AdaINParamsImpl : public torch::nn::Module {
public:
    AdaINParamsImpl(int64_t latent_dim, int64_t channels);
    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& z);

private:
    int64_t channels_;
    EqualizedLinear map_{nullptr};
};
TORCH_MODULE(AdaINParams);

/// Spatially-adaptive denormalization: instance norm, then x * (1 + gamma) + beta with
/// gamma/beta predicted per pixel from the spatial map by conv3x3 -> ReLU -> conv3x3.
class SpadeImpl : public torch::nn::Module {
public:
    SpadeImpl(int64_t feature_channels, int64_t spatial_channels, int64_t hidden = 64);
    /// The spatial map is resized (nearest) to the feature resolution.
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& spatial);
    std::pair<torch::Tensor, torch::Tensor> modulation(const torch::Tensor& spatial);

    EqualizedConv2d shared{nullptr};
    EqualizedConv2d gamma{nullptr};
    EqualizedConv2d beta{nullptr};
};
TORCH_MODULE(Spade);

enum class Resample { kNone, kDown, kUp };

/// Encoder / discriminator block: lrelu-conv x2 with blur-pool down, learnable skip.
class DownBlockImpl : public torch::nn::Module {
public:
    DownBlockImpl(int64_t in_channels, int64_t out_channels);
    torch::Tensor forward(const torch::Tensor& x);

private:
    EqualizedConv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
};
TORCH_MODULE(DownBlock);

/// conv-AdaIN-lrelu x2, learnable skip, optional blur-pool down or bilinear up.
class AdaINResBlockImpl : public torch::nn::Module {
public:
    AdaINResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t latent_dim, Resample resample);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& z);

private:
    Resample resample_;
    EqualizedConv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
    AdaINParams norm1_{nullptr}, norm2_{nullptr};
};
TORCH_MODULE(AdaINResBlock);

/// Upsample, conv-SPADE-lrelu x2, learnable skip. With a style latent dimension > 0
/// every SPADE output is further shifted/scaled per channel from z_style.
class SpadeResBlockImpl : public torch::nn::Module {
public:
    SpadeResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t spatial_channels, int64_t hidden,
                      bool upsample, int64_t style_dim = 0);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& spatial, const torch::Tensor& z_style = {});

private:
    bool upsample_;
    EqualizedConv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
    Spade spade1_{nullptr}, spade2_{nullptr};
    AdaINParams style1_{nullptr}, style2_{nullptr};
};
TORCH_MODULE(SpadeResBlock);

// ---------------------------------------------------------------------------

struct LatentPair {
    torch::Tensor z_layout;  // (N, D) or (D)
    torch::Tensor z_style;
};

struct LatentLayout {
    torch::Tensor logits;   // (N, C, H, W), undefined without a layout head
    torch::Tensor probs;    // softmax of logits across channels
    torch::Tensor aux_rgb;  // (N, 3, H, W) in [-1, 1]
};

/// Shared trunk (stem + down blocks + global average pool) with layout and style
/// heads, or two separate trunks when configured.
class EncoderImpl : public torch::nn::Module {
public:
    explicit EncoderImpl(const NetConfig& cfg);
    /// x: (N, 6, H, W) RGB ⧺ contour. Returns per-shot latents (N, D).
    LatentPair forward(const torch::Tensor& x);
    std::vector<torch::Tensor> layout_parameters() const;
    std::vector<torch::Tensor> style_parameters() const;

private:
    torch::Tensor trunk(int which, const torch::Tensor& x);

    NetConfig cfg_;
    std::vector<EqualizedConv2d> stems_;
    std::vector<std::vector<DownBlock>> blocks_;
    EqualizedLinear layout_head_{nullptr};
    EqualizedLinear style_head_{nullptr};
};
TORCH_MODULE(Encoder);

/// Mean over dimension `dim` (the shot axis), computed as min + mean(x - min) over
/// the sorted values so the result is bitwise independent of shot order and
/// equals the input exactly when all shots agree. Throws on an empty shot axis.
torch::Tensor aggregate_shots(const torch::Tensor& x, int64_t dim);
LatentPair aggregate_latents(const std::vector<LatentPair>& pairs);

/// UNet over the target contour with AdaIN modulation from a latent in every block.
/// Heads: C-way softmax layout (omitted when C = 0) and tanh RGB.
class LayoutGeneratorImpl : public torch::nn::Module {
public:
    LayoutGeneratorImpl(const NetConfig& cfg, int layout_channels);
    LatentLayout forward(const torch::Tensor& contour, const torch::Tensor& z);

private:
    int layout_channels_;
    EqualizedConv2d stem_{nullptr};
    std::vector<AdaINResBlock> down_;
    AdaINResBlock bottleneck_{nullptr};
    std::vector<AdaINResBlock> up_;
    EqualizedConv2d layout_head_{nullptr};
    EqualizedConv2d rgb_head_{nullptr};
};
TORCH_MODULE(LayoutGenerator);

/// z_style -> 4x4 tensor -> SPADE residual upsampling blocks -> tanh RGB.
class ImageGeneratorImpl : public torch::nn::Module {
public:
    ImageGeneratorImpl(const NetConfig& cfg, int spatial_channels);
    torch::Tensor forward(const torch::Tensor& spatial, const torch::Tensor& z_style);

private:
    NetConfig cfg_;
    int64_t start_width_;
    EqualizedLinear input_{nullptr};
    std::vector<SpadeResBlock> blocks_;
    EqualizedConv2d rgb_{nullptr};
};
TORCH_MODULE(ImageGenerator);

/// Appends the batch standard deviation (averaged over features) as one channel.
torch::Tensor minibatch_stddev(const torch::Tensor& x);

/// Residual discriminator: fromRGB, down blocks to 4x4, minibatch stddev, conv,
/// two fully connected layers. One logit per image.
class DiscriminatorImpl : public torch::nn::Module {
public:
    DiscriminatorImpl(int resolution, int base_width, int max_width);
    torch::Tensor forward(const torch::Tensor& x);

private:
    EqualizedConv2d from_rgb_{nullptr};
    std::vector<DownBlock> blocks_;
    EqualizedConv2d conv_{nullptr};
    EqualizedLinear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(Discriminator);

struct GenerateOptions {
    bool zero_spatial = false;  // replace the SPADE spatial input with zeros
};

struct GeneratorOutput {
    torch::Tensor image;  // (N, 3, H, W)
    LatentLayout layout;  // filled when a layout generator ran
    torch::Tensor spatial;  // SPADE spatial input, undefined for the baseline
};

/// The networks of one variant. Absent networks stay null.
struct Networks {
    VariantConfig cfg;
    Encoder encoder{nullptr};
    LayoutGenerator layout_gen{nullptr};
    ImageGenerator image_gen{nullptr};
    Discriminator discriminator{nullptr};

    Networks() = default;
    /// Seeds the torch generator with `seed` and initializes all networks.
    Networks(const VariantConfig& cfg, std::uint64_t seed);

    /// sources: (N, K, 6, H, W). Encodes every shot and averages over K.
    LatentPair encode(const torch::Tensor& sources);
    /// Runs the variant's generator path. `oracle_segmentation` (N, H, W) is
    /// required by upper_bound and ignored otherwise.
    GeneratorOutput generate(const LatentPair& z, const torch::Tensor& target_contour,
                             const torch::Tensor& oracle_segmentation = {}, const GenerateOptions& opts = {});

    /// Named (blob name, module) pairs of the networks that exist.
    std::vector<std::pair<std::string, std::shared_ptr<torch::nn::Module>>> modules() const;
    std::vector<torch::Tensor> generator_parameters() const;  // encoder + generators
    void train(bool on);
    std::int64_t layout_calls() const { return layout_calls_; }

private:
    std::int64_t layout_calls_ = 0;
};

/// Total element count of a parameter list.
std::int64_t count_parameters(const std::vector<torch::Tensor>& params);

}  // namespace lsr::nets

#endif  // LSR_NETS_HPP
