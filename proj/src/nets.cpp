// SPDX-License-Identifier: Apache-2.0

#include "lsr/nets.hpp"

#include <cmath>
#include <stdexcept>

namespace F = torch::nn::functional;

namespace lsr::nets {

namespace {

constexpr double kLeak = 0.2;
const double kInvSqrt2 = 1.0 / std::sqrt(2.0);

torch::Tensor lrelu(const torch::Tensor& x) { return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(kLeak)); }

torch::Tensor upsample2x(const torch::Tensor& x) {
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{x.size(2) * 2, x.size(3) * 2})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

int log2_exact(int v, const char* what) {
    int n = 0;
    while ((1 << n) < v) ++n;
    if ((1 << n) != v) throw std::invalid_argument(std::string(what) + " must be a power of two, got " + std::to_string(v));
    return n;
}

int capped(int base, int doublings, int cap) {
    int64_t w = base;
    for (int i = 0; i < doublings && w < cap; ++i) w *= 2;
    return static_cast<int>(std::min<int64_t>(w, cap));
}

}  // namespace

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::kBaseline: return "baseline";
        case Variant::kSpadeLandmarks: return "spade_landmarks";
        case Variant::kLearnedSeg: return "learned_seg";
        case Variant::kLatentLayout: return "latent_layout";
        case Variant::kUpperBound: return "upper_bound";
    }
    return "unknown";
}

Variant parse_variant(const std::string& name) {
    if (name == "baseline") return Variant::kBaseline;
    if (name == "spade_landmarks" || name == "spade") return Variant::kSpadeLandmarks;
    if (name == "learned_seg") return Variant::kLearnedSeg;
    if (name == "latent_layout" || name == "latent") return Variant::kLatentLayout;
    if (name == "upper_bound" || name == "upper") return Variant::kUpperBound;
    throw std::invalid_argument("unknown variant '" + name + "'");
}

const std::vector<Variant>& all_variants() {
    static const std::vector<Variant> v{Variant::kBaseline, Variant::kSpadeLandmarks, Variant::kLearnedSeg,
                                        Variant::kLatentLayout, Variant::kUpperBound};
    return v;
}

bool VariantConfig::uses_layout_generator() const {
    return variant == Variant::kBaseline || variant == Variant::kLearnedSeg || variant == Variant::kLatentLayout;
}

bool VariantConfig::uses_image_generator() const { return variant != Variant::kBaseline; }

int VariantConfig::spatial_channels() const {
    switch (variant) {
        case Variant::kBaseline: return 0;
        case Variant::kSpadeLandmarks: return 3;
        default: return net.layout_channels + 3;
    }
}

void VariantConfig::validate() const {
    const auto& w = weights;
    for (double v : {w.lambda_r, w.lambda_adv, w.lambda_l2, w.gamma_r1, w.w_perceptual, w.w_identity, w.w_l1, w.w_xent}) {
        if (!(v >= 0.0)) throw std::invalid_argument("loss weights must be non-negative");
    }
    if (net.resolution < 8) throw std::invalid_argument("resolution must be at least 8");
    log2_exact(net.resolution, "resolution");
    if (net.latent_dim < 1 || net.base_width < 1 || net.max_width < net.base_width || net.spade_hidden < 1 ||
        net.disc_base_width < 1 || net.encoder_blocks < 1) {
        throw std::invalid_argument("network widths and depths must be positive");
    }
    if ((1 << net.encoder_blocks) > net.resolution) {
        throw std::invalid_argument("encoder_blocks too large for resolution " + std::to_string(net.resolution));
    }
    if (variant != Variant::kBaseline && variant != Variant::kSpadeLandmarks && net.layout_channels < 1) {
        throw std::invalid_argument("layout_channels must be positive for variant " + variant_name(variant));
    }
}

// ---------------------------------------------------------------------------

EqualizedLinearImpl::EqualizedLinearImpl(int64_t in_features, int64_t out_features, bool with_bias, double bias_init)
    : scale_(std::sqrt(2.0 / static_cast<double>(in_features))) {
    weight = register_parameter("weight", torch::randn({out_features, in_features}));
    if (with_bias) bias = register_parameter("bias", torch::full({out_features}, bias_init));
}

torch::Tensor EqualizedLinearImpl::forward(const torch::Tensor& x) { return F::linear(x, weight * scale_, bias); }

EqualizedConv2dImpl::EqualizedConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel, bool with_bias)
    : scale_(std::sqrt(2.0 / static_cast<double>(in_channels * kernel * kernel))), padding_(kernel / 2) {
    weight = register_parameter("weight", torch::randn({out_channels, in_channels, kernel, kernel}));
    if (with_bias) bias = register_parameter("bias", torch::zeros({out_channels}));
}

torch::Tensor EqualizedConv2dImpl::forward(const torch::Tensor& x) {
    return F::conv2d(x, weight * scale_, F::Conv2dFuncOptions().bias(bias).padding(padding_));
}

torch::Tensor blur_pool(const torch::Tensor& x) {
    if (x.dim() != 4) throw std::invalid_argument("blur_pool expects an NCHW tensor");
    if (x.size(2) % 2 != 0 || x.size(3) % 2 != 0) {
        throw std::invalid_argument("blur_pool needs even spatial dims, got " + std::to_string(x.size(2)) + "x" +
                                    std::to_string(x.size(3)));
    }
    const auto k1 = torch::tensor({1.0, 2.0, 1.0}, x.options());
    const auto k2 = torch::outer(k1, k1) / 16.0;
    const int64_t c = x.size(1);
    const auto kernel = k2.view({1, 1, 3, 3}).expand({c, 1, 3, 3});
    torch::Tensor padded;
    if (x.size(2) > 1 && x.size(3) > 1) {
        padded = F::pad(x, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReflect));
    } else {
        padded = F::pad(x, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate));
    }
    return F::conv2d(padded, kernel, F::Conv2dFuncOptions().stride(2).groups(c));
}

torch::Tensor instance_norm(const torch::Tensor& x, double eps) {
    const auto mean = x.mean({2, 3}, true);
    const auto var = (x - mean).pow(2).mean({2, 3}, true);
    return (x - mean) / torch::sqrt(var + eps);
}

torch::Tensor adain(const torch::Tensor& x, const torch::Tensor& mean, const torch::Tensor& std, double eps) {
    return instance_norm(x, eps) * std.unsqueeze(-1).unsqueeze(-1) + mean.unsqueeze(-1).unsqueeze(-1);
}

AdaINParamsImpl::AdaINParamsImpl(int64_t latent_dim, int64_t channels) : channels_(channels) {
    map_ = register_module("map", EqualizedLinear(latent_dim, 2 * channels));
    torch::NoGradGuard guard;
    map_->bias.slice(0, channels, 2 * channels).fill_(std::log(std::exp(1.0) - 1.0));  // softplus -> 1
}

std::pair<torch::Tensor, torch::Tensor> AdaINParamsImpl::forward(const torch::Tensor& z) {
    const auto p = map_(z);
    return {p.slice(1, 0, channels_), F::softplus(p.slice(1, channels_, 2 * channels_))};
}

SpadeImpl::SpadeImpl(int64_t feature_channels, int64_t spatial_channels, int64_t hidden) {
    shared = register_module("shared", EqualizedConv2d(spatial_channels, hidden, 3));
    gamma = register_module("gamma", EqualizedConv2d(hidden, feature_channels, 3));
    beta = register_module("beta", EqualizedConv2d(hidden, feature_channels, 3));
}

std::pair<torch::Tensor, torch::Tensor> SpadeImpl::modulation(const torch::Tensor& spatial) {
    const auto h = torch::relu(shared(spatial));
    return {gamma(h), beta(h)};
}

torch::Tensor SpadeImpl::forward(const torch::Tensor& x, const torch::Tensor& spatial) {
    torch::Tensor s = spatial;
    if (s.size(2) != x.size(2) || s.size(3) != x.size(3)) {
        s = F::interpolate(s, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{x.size(2), x.size(3)})
                                  .mode(torch::kNearest));
    }
    auto [g, b] = modulation(s);
    return instance_norm(x) * (1 + g) + b;
}

DownBlockImpl::DownBlockImpl(int64_t in_channels, int64_t out_channels) {
    conv1_ = register_module("conv1", EqualizedConv2d(in_channels, in_channels, 3));
    conv2_ = register_module("conv2", EqualizedConv2d(in_channels, out_channels, 3));
    if (in_channels != out_channels) skip_ = register_module("skip", EqualizedConv2d(in_channels, out_channels, 1, false));
}

torch::Tensor DownBlockImpl::forward(const torch::Tensor& x) {
    auto h = conv2_(lrelu(conv1_(lrelu(x))));
    h = blur_pool(h);
    auto s = blur_pool(x);
    if (skip_) s = skip_(s);
    return (h + s) * kInvSqrt2;
}

AdaINResBlockImpl::AdaINResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t latent_dim, Resample resample)
    : resample_(resample) {
    conv1_ = register_module("conv1", EqualizedConv2d(in_channels, out_channels, 3));
    conv2_ = register_module("conv2", EqualizedConv2d(out_channels, out_channels, 3));
    norm1_ = register_module("norm1", AdaINParams(latent_dim, out_channels));
    norm2_ = register_module("norm2", AdaINParams(latent_dim, out_channels));
    if (in_channels != out_channels) skip_ = register_module("skip", EqualizedConv2d(in_channels, out_channels, 1, false));
}

torch::Tensor AdaINResBlockImpl::forward(const torch::Tensor& input, const torch::Tensor& z) {
    auto x = resample_ == Resample::kUp ? upsample2x(input) : input;
    auto [m1, s1] = norm1_(z);
    auto h = lrelu(adain(conv1_(x), m1, s1));
    auto [m2, s2] = norm2_(z);
    h = lrelu(adain(conv2_(h), m2, s2));
    auto s = skip_ ? skip_(x) : x;
    if (resample_ == Resample::kDown) {
        h = blur_pool(h);
        s = blur_pool(s);
    }
    return (h + s) * kInvSqrt2;
}

SpadeResBlockImpl::SpadeResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t spatial_channels, int64_t hidden,
                                     bool upsample, int64_t style_dim)
    : upsample_(upsample) {
    conv1_ = register_module("conv1", EqualizedConv2d(in_channels, out_channels, 3));
    conv2_ = register_module("conv2", EqualizedConv2d(out_channels, out_channels, 3));
    spade1_ = register_module("spade1", Spade(out_channels, spatial_channels, hidden));
    spade2_ = register_module("spade2", Spade(out_channels, spatial_channels, hidden));
    if (style_dim > 0) {
        style1_ = register_module("style1", AdaINParams(style_dim, out_channels));
        style2_ = register_module("style2", AdaINParams(style_dim, out_channels));
    }
    if (in_channels != out_channels) skip_ = register_module("skip", EqualizedConv2d(in_channels, out_channels, 1, false));
}

torch::Tensor SpadeResBlockImpl::forward(const torch::Tensor& input, const torch::Tensor& spatial,
                                         const torch::Tensor& z_style) {
    const auto x = upsample_ ? upsample2x(input) : input;
    auto stylize = [&](AdaINParams& p, const torch::Tensor& h) {
        if (!p) return h;
        auto [m, s] = p(z_style);
        return h * s.unsqueeze(-1).unsqueeze(-1) + m.unsqueeze(-1).unsqueeze(-1);
    };
    auto h = lrelu(stylize(style1_, spade1_(conv1_(x), spatial)));
    h = lrelu(stylize(style2_, spade2_(conv2_(h), spatial)));
    const auto s = skip_ ? skip_(x) : x;
    return (h + s) * kInvSqrt2;
}

// ---------------------------------------------------------------------------

EncoderImpl::EncoderImpl(const NetConfig& cfg) : cfg_(cfg) {
    const int trunks = cfg.separate_encoders ? 2 : 1;
    int final_width = cfg.base_width;
    for (int t = 0; t < trunks; ++t) {
        stems_.push_back(register_module("stem" + std::to_string(t), EqualizedConv2d(6, cfg.base_width, 3)));
        blocks_.emplace_back();
        for (int i = 0; i < cfg.encoder_blocks; ++i) {
            const int in = capped(cfg.base_width, i, cfg.max_width);
            const int out = capped(cfg.base_width, i + 1, cfg.max_width);
            blocks_.back().push_back(
                register_module("trunk" + std::to_string(t) + "_block" + std::to_string(i), DownBlock(in, out)));
            final_width = out;
        }
    }
    layout_head_ = register_module("layout_head", EqualizedLinear(final_width, cfg.latent_dim));
    style_head_ = register_module("style_head", EqualizedLinear(final_width, cfg.latent_dim));
    const int64_t head_params = static_cast<int64_t>(final_width + 1) * cfg.latent_dim;
    if (count_parameters(layout_head_->parameters()) != head_params ||
        count_parameters(style_head_->parameters()) != head_params) {
        throw std::logic_error("encoder head parameter count mismatch");
    }
}

torch::Tensor EncoderImpl::trunk(int which, const torch::Tensor& x) {
    auto h = stems_[which](x);
    for (auto& b : blocks_[which]) h = b(h);
    return lrelu(h).mean({2, 3});
}

LatentPair EncoderImpl::forward(const torch::Tensor& x) {
    if (x.dim() != 4 || x.size(1) != 6) throw std::invalid_argument("encoder expects (N, 6, H, W) input");
    const auto h0 = trunk(0, x);
    const auto h1 = cfg_.separate_encoders ? trunk(1, x) : h0;
    return {layout_head_(h0), style_head_(h1)};
}

std::vector<torch::Tensor> EncoderImpl::layout_parameters() const {
    std::vector<torch::Tensor> out = stems_[0]->parameters();
    for (const auto& b : blocks_[0]) {
        auto p = b->parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    auto h = layout_head_->parameters();
    out.insert(out.end(), h.begin(), h.end());
    return out;
}

std::vector<torch::Tensor> EncoderImpl::style_parameters() const {
    const size_t t = cfg_.separate_encoders ? 1 : 0;
    std::vector<torch::Tensor> out = stems_[t]->parameters();
    for (const auto& b : blocks_[t]) {
        auto p = b->parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    auto h = style_head_->parameters();
    out.insert(out.end(), h.begin(), h.end());
    return out;
}

torch::Tensor aggregate_shots(const torch::Tensor& x, int64_t dim) {
    if (x.size(dim) == 0) throw std::invalid_argument("cannot aggregate zero shots");
    const auto sorted = std::get<0>(x.sort(dim));
    const auto lo = sorted.narrow(dim, 0, 1);
    return (lo + (sorted - lo).sum(dim, true) / static_cast<double>(x.size(dim))).squeeze(dim);
}

LatentPair aggregate_latents(const std::vector<LatentPair>& pairs) {
    if (pairs.empty()) throw std::invalid_argument("aggregate_latents needs at least one latent pair");
    std::vector<torch::Tensor> l, s;
    for (const auto& p : pairs) {
        l.push_back(p.z_layout);
        s.push_back(p.z_style);
    }
    return {aggregate_shots(torch::stack(l), 0), aggregate_shots(torch::stack(s), 0)};
}

LayoutGeneratorImpl::LayoutGeneratorImpl(const NetConfig& cfg, int layout_channels) : layout_channels_(layout_channels) {
    const int depth = log2_exact(cfg.resolution, "resolution") - 2;
    auto width = [&](int level) { return capped(cfg.base_width, level, cfg.max_width); };
    stem_ = register_module("stem", EqualizedConv2d(3, width(0), 3));
    for (int l = 0; l < depth; ++l) {
        down_.push_back(register_module("down" + std::to_string(l),
                                        AdaINResBlock(width(l), width(l + 1), cfg.latent_dim, Resample::kDown)));
    }
    bottleneck_ = register_module("bottleneck", AdaINResBlock(width(depth), width(depth), cfg.latent_dim, Resample::kNone));
    up_.resize(depth, nullptr);
    for (int l = depth - 1; l >= 0; --l) {
        up_[l] = register_module("up" + std::to_string(l),
                                 AdaINResBlock(width(l + 1) + width(l), width(l), cfg.latent_dim, Resample::kNone));
    }
    if (layout_channels > 0) layout_head_ = register_module("layout_head", EqualizedConv2d(width(0), layout_channels, 3));
    rgb_head_ = register_module("rgb_head", EqualizedConv2d(width(0), 3, 3));
}

LatentLayout LayoutGeneratorImpl::forward(const torch::Tensor& contour, const torch::Tensor& z) {
    std::vector<torch::Tensor> skips;
    auto h = stem_(contour);
    for (auto& d : down_) {
        skips.push_back(h);
        h = d(h, z);
    }
    h = bottleneck_(h, z);
    for (int l = static_cast<int>(up_.size()) - 1; l >= 0; --l) {
        h = up_[l](torch::cat({upsample2x(h), skips[l]}, 1), z);
    }
    h = lrelu(h);
    LatentLayout out;
    if (layout_head_) {
        out.logits = layout_head_(h);
        out.probs = torch::softmax(out.logits, 1);
    }
    out.aux_rgb = torch::tanh(rgb_head_(h));
    return out;
}

ImageGeneratorImpl::ImageGeneratorImpl(const NetConfig& cfg, int spatial_channels) : cfg_(cfg) {
    const int n_up = log2_exact(cfg.resolution, "resolution") - 2;
    auto width = [&](int level) { return capped(cfg.base_width, n_up - level, cfg.max_width); };  // level 0 = 4x4
    start_width_ = width(0);
    const int64_t style_dim = cfg.style_in_blocks ? cfg.latent_dim : 0;
    input_ = register_module("input", EqualizedLinear(cfg.latent_dim, start_width_ * 16));
    blocks_.push_back(register_module(
        "block0", SpadeResBlock(start_width_, start_width_, spatial_channels, cfg.spade_hidden, false, style_dim)));
    for (int l = 1; l <= n_up; ++l) {
        blocks_.push_back(register_module("block" + std::to_string(l),
                                          SpadeResBlock(width(l - 1), width(l), spatial_channels, cfg.spade_hidden, true,
                                                        style_dim)));
    }
    rgb_ = register_module("rgb", EqualizedConv2d(width(n_up), 3, 3));
}

torch::Tensor ImageGeneratorImpl::forward(const torch::Tensor& spatial, const torch::Tensor& z_style) {
    auto h = input_(z_style).view({z_style.size(0), start_width_, 4, 4});
    for (auto& b : blocks_) h = b(h, spatial, z_style);
    return torch::tanh(rgb_(lrelu(h)));
}

torch::Tensor minibatch_stddev(const torch::Tensor& x) {
    const auto centered = x - x.mean(0, true);
    const auto sd = torch::sqrt(centered.pow(2).mean(0) + 1e-8).mean();
    return torch::cat({x, sd.expand({x.size(0), 1, x.size(2), x.size(3)})}, 1);
}

DiscriminatorImpl::DiscriminatorImpl(int resolution, int base_width, int max_width) {
    const int n = log2_exact(resolution, "resolution") - 2;
    if (n < 0) throw std::invalid_argument("discriminator resolution must be at least 4");
    from_rgb_ = register_module("from_rgb", EqualizedConv2d(3, base_width, 1));
    for (int i = 0; i < n; ++i) {
        blocks_.push_back(register_module("block" + std::to_string(i),
                                          DownBlock(capped(base_width, i, max_width), capped(base_width, i + 1, max_width))));
    }
    const int w = capped(base_width, n, max_width);
    conv_ = register_module("conv", EqualizedConv2d(w + 1, w, 3));
    fc1_ = register_module("fc1", EqualizedLinear(static_cast<int64_t>(w) * 16, w));
    fc2_ = register_module("fc2", EqualizedLinear(w, 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) {
    auto h = lrelu(from_rgb_(x));
    for (auto& b : blocks_) h = b(h);
    h = lrelu(conv_(minibatch_stddev(h)));
    h = lrelu(fc1_(h.flatten(1)));
    return fc2_(h).squeeze(1);
}

// ---------------------------------------------------------------------------

Networks::Networks(const VariantConfig& c, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    torch::manual_seed(seed);
    const auto& n = cfg.net;
    encoder = Encoder(n);
    if (cfg.variant == Variant::kBaseline) {
        layout_gen = LayoutGenerator(n, 0);
    } else if (cfg.uses_layout_generator()) {
        layout_gen = LayoutGenerator(n, n.layout_channels);
    }
    if (cfg.uses_image_generator()) image_gen = ImageGenerator(n, cfg.spatial_channels());
    discriminator = Discriminator(n.resolution, n.disc_base_width, n.max_width);
}

LatentPair Networks::encode(const torch::Tensor& sources) {
    if (sources.dim() != 5) throw std::invalid_argument("sources must be (N, K, 6, H, W)");
    const auto n = sources.size(0), k = sources.size(1);
    auto per_shot = encoder(sources.flatten(0, 1));
    return {aggregate_shots(per_shot.z_layout.view({n, k, -1}), 1), aggregate_shots(per_shot.z_style.view({n, k, -1}), 1)};
}

GeneratorOutput Networks::generate(const LatentPair& z, const torch::Tensor& target_contour,
                                   const torch::Tensor& oracle_segmentation, const GenerateOptions& opts) {
    GeneratorOutput out;
    if (cfg.variant == Variant::kBaseline) {
        const auto contour = opts.zero_spatial ? torch::zeros_like(target_contour) : target_contour;
        ++layout_calls_;
        out.layout = layout_gen(contour, z.z_style);
        out.image = out.layout.aux_rgb;
        return out;
    }
    torch::Tensor spatial;
    switch (cfg.variant) {
        case Variant::kSpadeLandmarks:
            spatial = target_contour;
            break;
        case Variant::kUpperBound: {
            if (!oracle_segmentation.defined()) throw std::invalid_argument("upper_bound needs the oracle segmentation");
            const auto onehot = F::one_hot(oracle_segmentation.to(torch::kLong), cfg.net.layout_channels)
                                    .permute({0, 3, 1, 2})
                                    .to(target_contour.scalar_type());
            spatial = torch::cat({onehot, target_contour}, 1);
            break;
        }
        default:
            ++layout_calls_;
            out.layout = layout_gen(target_contour, z.z_layout);
            spatial = torch::cat({out.layout.probs, target_contour}, 1);
    }
    if (opts.zero_spatial) spatial = torch::zeros_like(spatial);
    out.spatial = spatial;
    out.image = image_gen(spatial, z.z_style);
    return out;
}

std::vector<std::pair<std::string, std::shared_ptr<torch::nn::Module>>> Networks::modules() const {
    std::vector<std::pair<std::string, std::shared_ptr<torch::nn::Module>>> out;
    if (encoder) out.emplace_back("encoder", encoder.ptr());
    if (layout_gen) out.emplace_back("layout_gen", layout_gen.ptr());
    if (image_gen) out.emplace_back("image_gen", image_gen.ptr());
    if (discriminator) out.emplace_back("discriminator", discriminator.ptr());
    return out;
}

std::vector<torch::Tensor> Networks::generator_parameters() const {
    std::vector<torch::Tensor> out;
    for (const auto& [name, m] : modules()) {
        if (name == "discriminator") continue;
        auto p = m->parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

void Networks::train(bool on) {
    for (auto& [name, m] : modules()) m->train(on);
}

std::int64_t count_parameters(const std::vector<torch::Tensor>& params) {
    std::int64_t n = 0;
    for (const auto& p : params) n += p.numel();
    return n;
}

}  // namespace lsr::nets
