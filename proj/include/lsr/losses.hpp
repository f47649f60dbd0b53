// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: pre-training (cross-entropy + auxiliary RGB), the full
// reconstruction + adversarial + latent objective, logistic GAN losses with R1,
// and frozen perceptual backbones.

#ifndef LSR_LOSSES_HPP
#define LSR_LOSSES_HPP

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "lsr/nets.hpp"

namespace lsr::losses {

using nets::LossWeights;

/// Frozen feature extractor. Inputs are (N, 3, H, W) in [-1, 1].
class PerceptualBackbone {
public:
    virtual ~PerceptualBackbone() = default;
    virtual std::vector<torch::Tensor> features(const torch::Tensor& x) = 0;
    virtual bool identity_role() const = 0;
    virtual std::string name() const = 0;
    virtual torch::nn::Module& module() = 0;
};

/// conv3x3 -> ReLU per block with 2x average pooling between blocks; returns the
/// post-activation map of every block.
class ConvPyramidImpl : public torch::nn::Module {
public:
    explicit ConvPyramidImpl(const std::vector<int64_t>& widths);
    std::vector<torch::Tensor> forward(const torch::Tensor& x);

private:
    std::vector<torch::nn::Conv2d> convs_;
};
TORCH_MODULE(ConvPyramid);

/// Fixed randomly initialized pyramid, reproducible from its seed.
class GenericBackbone : public PerceptualBackbone {
public:
    explicit GenericBackbone(std::uint64_t seed = 1234, const std::vector<int64_t>& widths = {16, 32, 64, 64});
    std::vector<torch::Tensor> features(const torch::Tensor& x) override;
    bool identity_role() const override { return false; }
    std::string name() const override { return "generic"; }
    torch::nn::Module& module() override { return *net_; }

private:
    ConvPyramid net_{nullptr};
};

class IdentityNetImpl : public torch::nn::Module {
public:
    IdentityNetImpl(int64_t num_identities, int64_t embedding_dim, const std::vector<int64_t>& widths);
    ConvPyramid trunk{nullptr};
    torch::nn::Linear embed{nullptr};
    torch::nn::Linear classify{nullptr};
    torch::Tensor embedding(const std::vector<torch::Tensor>& feats);
};
TORCH_MODULE(IdentityNet);

/// Small identity classifier. Its pyramid maps serve as the identity perceptual
/// features and its pre-classifier embedding as the face-recognition embedding.
class IdentityBackbone : public PerceptualBackbone {
public:
    IdentityBackbone(int64_t num_identities, int64_t embedding_dim = 64,
                     const std::vector<int64_t>& widths = {16, 32, 64, 64}, std::uint64_t seed = 4321);
    std::vector<torch::Tensor> features(const torch::Tensor& x) override;
    bool identity_role() const override { return true; }
    std::string name() const override { return "identity"; }
    torch::nn::Module& module() override { return *net_; }

    torch::Tensor embed(const torch::Tensor& x);
    torch::Tensor logits(const torch::Tensor& x);
    int64_t num_identities() const { return num_identities_; }
    void freeze();

private:
    int64_t num_identities_;
    IdentityNet net_{nullptr};
};

struct IdentityTrainOptions {
    int steps = 400;
    int batch_size = 32;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

/// Trains the classifier on images (M, 3, H, W) with labels (M) in [0, num_identities)
/// using random horizontal flips, then freezes it. Returns final training accuracy.
double train_identity_backbone(IdentityBackbone& backbone, const torch::Tensor& images, const torch::Tensor& labels,
                               const IdentityTrainOptions& opts);

/// Sum over layers of the mean absolute feature difference.
torch::Tensor perceptual_loss(PerceptualBackbone& backbone, const torch::Tensor& x, const torch::Tensor& y);

struct ReconstructionTerms {
    torch::Tensor perceptual;
    torch::Tensor identity;
    torch::Tensor l1;
    torch::Tensor total;  // w_perceptual * perceptual + w_identity * identity + w_l1 * l1
};

/// `identity` may be null, in which case its term is zero.
ReconstructionTerms reconstruction_loss(PerceptualBackbone& generic, PerceptualBackbone* identity, const torch::Tensor& x,
                                        const torch::Tensor& y, const LossWeights& w);

/// softplus(-D(fake)), averaged over the batch.
torch::Tensor generator_logistic(const torch::Tensor& fake_scores);
/// softplus(D(fake)) + softplus(-D(real)), averaged over the batch.
torch::Tensor discriminator_logistic(const torch::Tensor& real_scores, const torch::Tensor& fake_scores);

using ScoreFn = std::function<torch::Tensor(const torch::Tensor&)>;

/// (gamma / 2) * E ||grad_x D(x)||^2 on real samples, differentiable w.r.t. D's parameters.
torch::Tensor r1_penalty(const ScoreFn& d, const torch::Tensor& real, double gamma);

struct AdversarialTerms {
    torch::Tensor g_loss;
    torch::Tensor d_logistic;
    torch::Tensor r1;
    torch::Tensor d_loss;  // d_logistic + r1
};

AdversarialTerms adversarial_losses(const ScoreFn& d, const torch::Tensor& real, const torch::Tensor& fake, double gamma);

/// Batch mean of ||z_layout||^2 + ||z_style||^2 (plain sum for unbatched vectors).
torch::Tensor latent_regularizer(const torch::Tensor& z_layout, const torch::Tensor& z_style);

/// Mean per-pixel cross-entropy. Throws std::invalid_argument if a class index is
/// outside [0, C).
torch::Tensor segmentation_xent(const torch::Tensor& logits, const torch::Tensor& segmentation);

struct PretrainTerms {
    torch::Tensor xent;
    torch::Tensor aux;  // generic perceptual loss of the auxiliary RGB
    torch::Tensor total;
};

PretrainTerms pretrain_objective(const torch::Tensor& layout_logits, const torch::Tensor& segmentation,
                                 const torch::Tensor& aux_rgb, const torch::Tensor& target_image, double lambda_r,
                                 PerceptualBackbone& generic);

struct FullTerms {
    ReconstructionTerms rec;
    torch::Tensor g_adv;      // zero when lambda_adv = 0
    torch::Tensor latent_l2;
    torch::Tensor total;
};

/// L_rec + lambda_adv * softplus(-D(output)) + lambda_l2 * latent regularizer.
/// `fake_scores` may be undefined when lambda_adv = 0.
FullTerms full_objective(const torch::Tensor& output, const torch::Tensor& target, const nets::LatentPair& z,
                         const torch::Tensor& fake_scores, const LossWeights& w, PerceptualBackbone& generic,
                         PerceptualBackbone* identity);

}  // namespace lsr::losses

#endif  // LSR_LOSSES_HPP
