// SPDX-License-Identifier: Apache-2.0

#include "lsr/losses.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include <ATen/CPUGeneratorImpl.h>

namespace F = torch::nn::functional;

namespace lsr::losses {

namespace {

constexpr double kCosineScale = 16.0;

void check_same_shape(const torch::Tensor& x, const torch::Tensor& y, const char* what) {
    if (x.sizes() != y.sizes()) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

// He-normal weights and zero biases drawn from a private generator.
void init_from_seed(torch::nn::Module& m, std::uint64_t seed) {
    auto gen = at::detail::createCPUGenerator(seed);
    torch::NoGradGuard guard;
    for (auto& p : m.named_parameters()) {
        auto& t = p.value();
        if (t.dim() > 1) {
            const double fan_in = static_cast<double>(t.numel() / t.size(0));
            t.copy_(torch::randn(t.sizes(), gen, t.options()) * std::sqrt(2.0 / fan_in));
        } else {
            t.zero_();
        }
    }
}

}  // namespace

ConvPyramidImpl::ConvPyramidImpl(const std::vector<int64_t>& widths) {
    int64_t in = 3;
    for (size_t i = 0; i < widths.size(); ++i) {
        convs_.push_back(register_module("conv" + std::to_string(i),
                                         torch::nn::Conv2d(torch::nn::Conv2dOptions(in, widths[i], 3).padding(1))));
        in = widths[i];
    }
}

std::vector<torch::Tensor> ConvPyramidImpl::forward(const torch::Tensor& x) {
    std::vector<torch::Tensor> out;
    auto h = x;
    for (size_t i = 0; i < convs_.size(); ++i) {
        if (i > 0) h = F::avg_pool2d(h, F::AvgPool2dFuncOptions(2));
        h = torch::relu(convs_[i](h));
        out.push_back(h);
    }
    return out;
}

GenericBackbone::GenericBackbone(std::uint64_t seed, const std::vector<int64_t>& widths) {
    net_ = ConvPyramid(widths);
    init_from_seed(*net_, seed);
    net_->eval();
    for (auto& p : net_->parameters()) p.requires_grad_(false);
}

std::vector<torch::Tensor> GenericBackbone::features(const torch::Tensor& x) { return net_(x); }

IdentityNetImpl::IdentityNetImpl(int64_t num_identities, int64_t embedding_dim, const std::vector<int64_t>& widths) {
    trunk = register_module("trunk", ConvPyramid(widths));
    embed = register_module("embed", torch::nn::Linear(widths.back(), embedding_dim));
    classify = register_module("classify",
                               torch::nn::Linear(torch::nn::LinearOptions(embedding_dim, num_identities).bias(false)));
}

torch::Tensor IdentityNetImpl::embedding(const std::vector<torch::Tensor>& feats) {
    return embed(feats.back().mean({2, 3}));
}

IdentityBackbone::IdentityBackbone(int64_t num_identities, int64_t embedding_dim, const std::vector<int64_t>& widths,
                                   std::uint64_t seed)
    : num_identities_(num_identities) {
    if (num_identities < 1) throw std::invalid_argument("identity backbone needs at least one identity");
    net_ = IdentityNet(num_identities, embedding_dim, widths);
    init_from_seed(*net_, seed);
}

std::vector<torch::Tensor> IdentityBackbone::features(const torch::Tensor& x) { return net_->trunk(x); }

torch::Tensor IdentityBackbone::embed(const torch::Tensor& x) { return net_->embedding(net_->trunk(x)); }

// Scaled cosine logits, so that training shapes the embedding for cosine comparison.
torch::Tensor IdentityBackbone::logits(const torch::Tensor& x) {
    const auto e = F::normalize(embed(x), F::NormalizeFuncOptions().dim(1));
    const auto w = F::normalize(net_->classify->weight, F::NormalizeFuncOptions().dim(1));
    return kCosineScale * F::linear(e, w);
}

void IdentityBackbone::freeze() {
    net_->eval();
    for (auto& p : net_->parameters()) p.requires_grad_(false);
}

double train_identity_backbone(IdentityBackbone& backbone, const torch::Tensor& images, const torch::Tensor& labels,
                               const IdentityTrainOptions& opts) {
    if (images.size(0) != labels.size(0) || images.size(0) == 0) {
        throw std::invalid_argument("identity training needs matching, non-empty images and labels");
    }
    if (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= backbone.num_identities()) {
        throw std::invalid_argument("identity label out of range");
    }
    auto& net = backbone.module();
    net.train();
    for (auto& p : net.parameters()) p.requires_grad_(true);
    torch::optim::Adam optim(net.parameters(), torch::optim::AdamOptions(opts.lr));
    std::mt19937_64 rng(opts.seed);
    std::uniform_int_distribution<int64_t> pick(0, images.size(0) - 1);
    std::bernoulli_distribution flip(0.5);
    for (int step = 0; step < opts.steps; ++step) {
        std::vector<int64_t> idx(opts.batch_size);
        for (auto& i : idx) i = pick(rng);
        auto batch = images.index_select(0, torch::tensor(idx));
        std::vector<torch::Tensor> items;
        for (int64_t b = 0; b < batch.size(0); ++b) items.push_back(flip(rng) ? batch[b].flip({2}) : batch[b]);
        batch = torch::stack(items);
        const auto loss = F::cross_entropy(backbone.logits(batch), labels.index_select(0, torch::tensor(idx)));
        optim.zero_grad();
        loss.backward();
        optim.step();
    }
    backbone.freeze();
    torch::NoGradGuard guard;
    int64_t correct = 0;
    for (int64_t start = 0; start < images.size(0); start += 256) {
        const auto end = std::min<int64_t>(images.size(0), start + 256);
        const auto pred = backbone.logits(images.slice(0, start, end)).argmax(1);
        correct += (pred == labels.slice(0, start, end)).sum().item<int64_t>();
    }
    return static_cast<double>(correct) / static_cast<double>(images.size(0));
}

torch::Tensor perceptual_loss(PerceptualBackbone& backbone, const torch::Tensor& x, const torch::Tensor& y) {
    check_same_shape(x, y, "perceptual_loss");
    const auto fx = backbone.features(x);
    const auto fy = backbone.features(y);
    auto total = torch::zeros({}, x.options());
    for (size_t i = 0; i < fx.size(); ++i) total = total + (fx[i] - fy[i]).abs().mean();
    return total;
}

ReconstructionTerms reconstruction_loss(PerceptualBackbone& generic, PerceptualBackbone* identity, const torch::Tensor& x,
                                        const torch::Tensor& y, const LossWeights& w) {
    check_same_shape(x, y, "reconstruction_loss");
    ReconstructionTerms t;
    t.perceptual = w.w_perceptual > 0 ? perceptual_loss(generic, x, y) : torch::zeros({}, x.options());
    t.identity = identity && w.w_identity > 0 ? perceptual_loss(*identity, x, y) : torch::zeros({}, x.options());
    t.l1 = (x - y).abs().mean();
    t.total = w.w_perceptual * t.perceptual + w.w_identity * t.identity + w.w_l1 * t.l1;
    return t;
}

torch::Tensor generator_logistic(const torch::Tensor& fake_scores) { return F::softplus(-fake_scores).mean(); }

torch::Tensor discriminator_logistic(const torch::Tensor& real_scores, const torch::Tensor& fake_scores) {
    return F::softplus(fake_scores).mean() + F::softplus(-real_scores).mean();
}

torch::Tensor r1_penalty(const ScoreFn& d, const torch::Tensor& real, double gamma) {
    auto x = real.detach().requires_grad_(true);
    const auto scores = d(x);
    if (!scores.requires_grad()) return torch::zeros({}, real.options());
    const auto grad = torch::autograd::grad({scores.sum()}, {x}, {}, /*retain_graph=*/true, /*create_graph=*/true,
                                            /*allow_unused=*/true)[0];
    if (!grad.defined()) return torch::zeros({}, real.options());
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(1).mean();
}

AdversarialTerms adversarial_losses(const ScoreFn& d, const torch::Tensor& real, const torch::Tensor& fake, double gamma) {
    AdversarialTerms t;
    const auto fake_scores = d(fake);
    t.g_loss = generator_logistic(fake_scores);
    t.d_logistic = discriminator_logistic(d(real.detach()), d(fake.detach()));
    t.r1 = gamma > 0 ? r1_penalty(d, real, gamma) : torch::zeros({}, real.options());
    t.d_loss = t.d_logistic + t.r1;
    return t;
}

torch::Tensor latent_regularizer(const torch::Tensor& z_layout, const torch::Tensor& z_style) {
    return (z_layout.pow(2).sum(-1) + z_style.pow(2).sum(-1)).mean();
}

torch::Tensor segmentation_xent(const torch::Tensor& logits, const torch::Tensor& segmentation) {
    const int64_t c = logits.size(1);
    const auto lo = segmentation.min().item<int64_t>();
    const auto hi = segmentation.max().item<int64_t>();
    if (lo < 0 || hi >= c) {
        throw std::invalid_argument("segmentation class " + std::to_string(lo < 0 ? lo : hi) + " outside [0, " +
                                    std::to_string(c) + ")");
    }
    return F::cross_entropy(logits, segmentation.to(torch::kLong));
}

PretrainTerms pretrain_objective(const torch::Tensor& layout_logits, const torch::Tensor& segmentation,
                                 const torch::Tensor& aux_rgb, const torch::Tensor& target_image, double lambda_r,
                                 PerceptualBackbone& generic) {
    PretrainTerms t;
    t.xent = segmentation_xent(layout_logits, segmentation);
    if (lambda_r > 0) {
        t.aux = perceptual_loss(generic, aux_rgb, target_image);
        t.total = t.xent + lambda_r * t.aux;
    } else {
        t.aux = torch::zeros({}, layout_logits.options());
        t.total = t.xent;
    }
    return t;
}

FullTerms full_objective(const torch::Tensor& output, const torch::Tensor& target, const nets::LatentPair& z,
                         const torch::Tensor& fake_scores, const LossWeights& w, PerceptualBackbone& generic,
                         PerceptualBackbone* identity) {
    FullTerms t;
    t.rec = reconstruction_loss(generic, identity, output, target, w);
    t.total = t.rec.total;
    if (w.lambda_adv > 0) {
        if (!fake_scores.defined()) throw std::invalid_argument("full_objective: discriminator scores required");
        t.g_adv = generator_logistic(fake_scores);
        t.total = t.total + w.lambda_adv * t.g_adv;
    } else {
        t.g_adv = torch::zeros({}, output.options());
    }
    t.latent_l2 = latent_regularizer(z.z_layout, z.z_style);
    if (w.lambda_l2 > 0) t.total = t.total + w.lambda_l2 * t.latent_l2;
    return t;
}

}  // namespace lsr::losses
