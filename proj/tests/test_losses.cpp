// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "grad_oracle.hpp"
#include "lsr/losses.hpp"
#include "lsr/synthface.hpp"

using namespace lsr;
using namespace lsr::losses;
using lsr::testing::gradient_relative_error;

namespace {

const double kLn2 = std::log(2.0);

torch::Tensor rand_image(std::vector<int64_t> shape, torch::Dtype dt = torch::kFloat) {
    return torch::rand(shape, torch::TensorOptions().dtype(dt)) * 2 - 1;
}

nets::Discriminator toy_discriminator(std::uint64_t seed) {
    torch::manual_seed(seed);
    nets::Discriminator d(8, 4, 8);
    d->to(torch::kDouble);
    return d;
}

double value(const torch::Tensor& t) { return t.item<double>(); }

}  // namespace

TEST(Perceptual, IdenticalInputsGiveExactZero) {
    GenericBackbone g;
    const auto x = rand_image({2, 3, 32, 32});
    EXPECT_EQ(value(perceptual_loss(g, x, x.clone())), 0.0);
}

TEST(Perceptual, SymmetricAndPositive) {
    GenericBackbone g;
    const auto x = rand_image({2, 3, 32, 32});
    const auto y = rand_image({2, 3, 32, 32});
    EXPECT_DOUBLE_EQ(value(perceptual_loss(g, x, y)), value(perceptual_loss(g, y, x)));
    EXPECT_GT(value(perceptual_loss(g, x, y)), 0.0);
}

TEST(Perceptual, ShapeMismatchThrows) {
    GenericBackbone g;
    EXPECT_THROW(perceptual_loss(g, rand_image({1, 3, 16, 16}), rand_image({1, 3, 32, 32})), std::invalid_argument);
    EXPECT_THROW(reconstruction_loss(g, nullptr, rand_image({1, 3, 16, 16}), rand_image({2, 3, 16, 16}), {}),
                 std::invalid_argument);
}

TEST(Perceptual, BackboneIsFrozenAndSeeded) {
    GenericBackbone a(7), b(7), c(8);
    auto x = rand_image({1, 3, 16, 16}).requires_grad_(true);
    perceptual_loss(a, x, rand_image({1, 3, 16, 16})).backward();
    EXPECT_TRUE(x.grad().defined());
    for (const auto& p : a.module().parameters()) {
        EXPECT_FALSE(p.requires_grad());
        EXPECT_FALSE(p.grad().defined());
    }
    const auto y = rand_image({1, 3, 16, 16});
    EXPECT_TRUE(torch::equal(a.features(y).back(), b.features(y).back()));
    EXPECT_FALSE(torch::equal(a.features(y).back(), c.features(y).back()));
    EXPECT_EQ(a.features(y).size(), 4u);
    EXPECT_FALSE(a.identity_role());
    EXPECT_TRUE(IdentityBackbone(3).identity_role());
}

TEST(Reconstruction, ZeroOnIdentical) {
    GenericBackbone g;
    IdentityBackbone id(4);
    const auto x = rand_image({2, 3, 16, 16});
    const auto t = reconstruction_loss(g, &id, x, x.clone(), LossWeights{});
    EXPECT_EQ(value(t.total), 0.0);
}

TEST(Reconstruction, UniformShiftL1) {
    GenericBackbone g;
    g.module().to(torch::kDouble);
    const auto x = rand_image({2, 3, 16, 16}, torch::kDouble) * 0.5;
    const auto t = reconstruction_loss(g, nullptr, x, x + 0.1, LossWeights{});
    EXPECT_NEAR(value(t.l1), 0.1, 1e-12);
}

TEST(Reconstruction, MonotoneInPerturbation) {
    GenericBackbone g;
    IdentityBackbone id(4);
    const auto x = rand_image({2, 3, 16, 16}) * 0.5;
    double prev = 0.0;
    for (double delta : {0.02, 0.04, 0.08, 0.16, 0.32}) {
        const double v = value(reconstruction_loss(g, &id, x, x + delta, LossWeights{}).total);
        EXPECT_GE(v, prev) << delta;
        prev = v;
    }
}

TEST(Adversarial, ZeroDiscriminator) {
    auto d = [](const torch::Tensor& x) { return x.flatten(1).sum(1) * 0.0; };
    const auto real = rand_image({3, 3, 8, 8}, torch::kDouble);
    const auto fake = rand_image({3, 3, 8, 8}, torch::kDouble);
    const auto t = adversarial_losses(d, real, fake, 10.0);
    EXPECT_NEAR(value(t.g_loss), kLn2, 1e-12);
    // Each of the two logistic terms contributes ln 2 per sample.
    EXPECT_NEAR(value(t.d_logistic), 2 * kLn2, 1e-12);
    EXPECT_EQ(value(t.r1), 0.0);
}

TEST(Adversarial, ConstantDiscriminatorHasNoPenalty) {
    auto d = [](const torch::Tensor& x) { return torch::full({x.size(0)}, 3.0, x.options()); };
    EXPECT_EQ(value(r1_penalty(d, rand_image({2, 3, 8, 8}), 10.0)), 0.0);
}

TEST(Adversarial, LinearDiscriminatorPenalty) {
    const double gamma = 10.0;
    const auto w = torch::randn({3 * 8 * 8}, torch::kDouble);
    auto d = [&](const torch::Tensor& x) { return x.flatten(1).matmul(w); };
    const double expected = gamma / 2 * w.pow(2).sum().item<double>();
    EXPECT_NEAR(value(r1_penalty(d, rand_image({4, 3, 8, 8}, torch::kDouble), gamma)), expected, 1e-6);
}

TEST(Adversarial, QuadraticDiscriminatorPenalty) {
    // D(x) = x^T A x has input gradient (A + A^T) x; for symmetric A this is 2 A x,
    // so the penalty is (gamma / 2) * ||2 A x||^2 = 2 gamma ||A x||^2 per sample.
    const double gamma = 10.0;
    const int64_t n = 12;
    const auto b = torch::randn({n, n}, torch::kDouble);
    const auto a = (b + b.t()) / 2;
    auto d = [&](const torch::Tensor& x) { return (x.matmul(a) * x).sum(1); };
    for (int trial = 0; trial < 5; ++trial) {
        const auto x = torch::randn({1, n}, torch::kDouble);
        const double expected = 2.0 * gamma * a.matmul(x[0]).pow(2).sum().item<double>();
        EXPECT_NEAR(value(r1_penalty(d, x, gamma)), expected, 1e-6 * std::max(1.0, expected));
    }
    // Batch: mean of the per-sample values; asymmetric A uses (A + A^T).
    const auto asym = torch::randn({n, n}, torch::kDouble);
    auto d2 = [&](const torch::Tensor& x) { return (x.matmul(asym) * x).sum(1); };
    const auto xs = torch::randn({6, n}, torch::kDouble);
    const double expected = gamma / 2 * xs.matmul(asym + asym.t()).pow(2).sum(1).mean().item<double>();
    EXPECT_NEAR(value(r1_penalty(d2, xs, gamma)), expected, 1e-6 * std::max(1.0, expected));
}

TEST(Adversarial, LogisticTermsNonNegative) {
    for (int i = 0; i < 20; ++i) {
        const auto s = torch::randn({16}) * 10;
        EXPECT_GE(value(generator_logistic(s)), 0.0);
        EXPECT_GE(value(discriminator_logistic(s, -s)), 0.0);
    }
}

TEST(LatentRegularizer, ClosedForms) {
    EXPECT_EQ(value(latent_regularizer(torch::zeros({512}), torch::zeros({512}))), 0.0);
    const auto u = torch::full({512}, 1.0 / std::sqrt(512.0), torch::kDouble);
    EXPECT_NEAR(value(latent_regularizer(u, u)), 2.0, 1e-12);
    const auto zl = torch::randn({512}, torch::kDouble), zs = torch::randn({512}, torch::kDouble);
    EXPECT_NEAR(value(latent_regularizer(2 * zl, 2 * zs)), 4 * value(latent_regularizer(zl, zs)), 1e-9);
    const auto batch = torch::stack({zl, 2 * zl});
    EXPECT_NEAR(value(latent_regularizer(batch, torch::zeros_like(batch))), 2.5 * zl.pow(2).sum().item<double>(), 1e-9);
}

TEST(Pretrain, CrossEntropyLimits) {
    const auto seg = torch::randint(0, 8, {2, 8, 8}, torch::kLong);
    const auto onehot = torch::one_hot(seg, 8).permute({0, 3, 1, 2}).to(torch::kDouble) * 1000.0;
    EXPECT_LT(value(segmentation_xent(onehot, seg)), 1e-3);
    const auto uniform = torch::zeros({2, 8, 8, 8}, torch::kDouble);
    EXPECT_NEAR(value(segmentation_xent(uniform, seg)), std::log(8.0), 1e-12);
    EXPECT_NEAR(std::log(8.0), 2.0794, 1e-4);
}

TEST(Pretrain, ClassOutOfRangeThrows) {
    auto seg = torch::zeros({1, 4, 4}, torch::kLong);
    seg[0][1][1] = 8;
    EXPECT_THROW(segmentation_xent(torch::zeros({1, 8, 4, 4}), seg), std::invalid_argument);
    seg[0][1][1] = -1;
    EXPECT_THROW(segmentation_xent(torch::zeros({1, 8, 4, 4}), seg), std::invalid_argument);
}

TEST(Pretrain, ZeroLambdaIsPureXent) {
    GenericBackbone g;
    const auto logits = torch::randn({2, 8, 16, 16});
    const auto seg = torch::randint(0, 7, {2, 16, 16}, torch::kLong);
    const auto aux = rand_image({2, 3, 16, 16}), target = rand_image({2, 3, 16, 16});
    const auto t0 = pretrain_objective(logits, seg, aux, target, 0.0, g);
    EXPECT_EQ(value(t0.total), value(segmentation_xent(logits, seg)));
    const auto t1 = pretrain_objective(logits, seg, aux, target, 0.1, g);
    EXPECT_NEAR(value(t1.total), value(t1.xent) + 0.1 * value(t1.aux), 1e-6);
    EXPECT_GT(value(t1.aux), 0.0);
}

TEST(FullObjective, ZeroAtPerfectReconstruction) {
    GenericBackbone g;
    IdentityBackbone id(3);
    LossWeights w;
    w.lambda_adv = 0;
    const auto x = rand_image({2, 3, 16, 16});
    const nets::LatentPair z{torch::zeros({2, 512}), torch::zeros({2, 512})};
    EXPECT_EQ(value(full_objective(x, x.clone(), z, {}, w, g, &id).total), 0.0);
}

TEST(FullObjective, ReducesToReconstructionAndSumsBreakdown) {
    GenericBackbone g;
    IdentityBackbone id(3);
    const auto x = rand_image({2, 3, 16, 16}), y = rand_image({2, 3, 16, 16});
    const nets::LatentPair z{torch::randn({2, 64}), torch::randn({2, 64})};
    LossWeights w;
    w.lambda_adv = 0;
    w.lambda_l2 = 0;
    EXPECT_EQ(value(full_objective(x, y, z, {}, w, g, &id).total), value(reconstruction_loss(g, &id, x, y, w).total));

    w = LossWeights{};
    const auto scores = torch::randn({2});
    const auto t = full_objective(x, y, z, scores, w, g, &id);
    const double sum = w.w_perceptual * value(t.rec.perceptual) + w.w_identity * value(t.rec.identity) +
                       w.w_l1 * value(t.rec.l1) + w.lambda_adv * value(t.g_adv) + w.lambda_l2 * value(t.latent_l2);
    EXPECT_NEAR(value(t.total), sum, 1e-6);
    EXPECT_THROW(full_objective(x, y, z, {}, w, g, &id), std::invalid_argument);
}

// Gradient oracles: double precision, 8x8 inputs, central differences.

TEST(Gradients, Perceptual) {
    GenericBackbone g;
    g.module().to(torch::kDouble);
    auto x = rand_image({2, 3, 8, 8}, torch::kDouble).requires_grad_(true);
    const auto y = rand_image({2, 3, 8, 8}, torch::kDouble);
    EXPECT_LT(gradient_relative_error(x, [&] { return perceptual_loss(g, x, y); }), 1e-3);
}

TEST(Gradients, Reconstruction) {
    GenericBackbone g;
    IdentityBackbone id(3);
    g.module().to(torch::kDouble);
    id.module().to(torch::kDouble);
    id.freeze();
    auto x = rand_image({2, 3, 8, 8}, torch::kDouble).requires_grad_(true);
    const auto y = rand_image({2, 3, 8, 8}, torch::kDouble);
    EXPECT_LT(gradient_relative_error(x, [&] { return reconstruction_loss(g, &id, x, y, LossWeights{}).total; }), 1e-3);
}

TEST(Gradients, GeneratorLogisticThroughDiscriminator) {
    auto d = toy_discriminator(1);
    auto fake = rand_image({2, 3, 8, 8}, torch::kDouble).requires_grad_(true);
    EXPECT_LT(gradient_relative_error(fake, [&] { return generator_logistic(d(fake)); }), 1e-3);
}

TEST(Gradients, DiscriminatorLogisticWrtParameters) {
    auto d = toy_discriminator(2);
    const auto real = rand_image({2, 3, 8, 8}, torch::kDouble), fake = rand_image({2, 3, 8, 8}, torch::kDouble);
    for (auto& p : d->parameters()) {
        EXPECT_LT(gradient_relative_error(p, [&] { return discriminator_logistic(d(real), d(fake)); }, 24), 1e-3);
    }
}

TEST(Gradients, R1WrtParameters) {
    auto d = toy_discriminator(3);
    const auto real = rand_image({2, 3, 8, 8}, torch::kDouble);
    auto fn = [&](const torch::Tensor& x) { return d(x); };
    for (auto& p : d->parameters()) {
        EXPECT_LT(gradient_relative_error(p, [&] { return r1_penalty(fn, real, 10.0); }, 24), 1e-3);
    }
}

TEST(Gradients, LatentRegularizer) {
    auto zl = torch::randn({2, 16}, torch::kDouble).requires_grad_(true);
    const auto zs = torch::randn({2, 16}, torch::kDouble);
    EXPECT_LT(gradient_relative_error(zl, [&] { return latent_regularizer(zl, zs); }), 1e-3);
}

TEST(Gradients, PretrainObjective) {
    GenericBackbone g;
    g.module().to(torch::kDouble);
    auto logits = torch::randn({2, 8, 8, 8}, torch::kDouble).requires_grad_(true);
    auto aux = rand_image({2, 3, 8, 8}, torch::kDouble).requires_grad_(true);
    const auto seg = torch::randint(0, 7, {2, 8, 8}, torch::kLong);
    const auto target = rand_image({2, 3, 8, 8}, torch::kDouble);
    auto f = [&] { return pretrain_objective(logits, seg, aux, target, 0.1, g).total; };
    EXPECT_LT(gradient_relative_error(logits, f), 1e-3);
    EXPECT_LT(gradient_relative_error(aux, f), 1e-3);
}

TEST(Gradients, FullObjective) {
    GenericBackbone g;
    g.module().to(torch::kDouble);
    auto d = toy_discriminator(4);
    auto out = rand_image({2, 3, 8, 8}, torch::kDouble).requires_grad_(true);
    const auto target = rand_image({2, 3, 8, 8}, torch::kDouble);
    auto zl = torch::randn({2, 16}, torch::kDouble).requires_grad_(true);
    const auto zs = torch::randn({2, 16}, torch::kDouble);
    auto f = [&] { return full_objective(out, target, {zl, zs}, d(out), LossWeights{}, g, nullptr).total; };
    EXPECT_LT(gradient_relative_error(out, f), 1e-3);
    EXPECT_LT(gradient_relative_error(zl, f), 1e-3);
}

TEST(IdentityBackbone, LearnsSyntheticIdentities) {
    const int ids = 4, frames = 8, res = 32;
    std::vector<torch::Tensor> images;
    std::vector<int64_t> labels;
    for (int i = 0; i < ids; ++i) {
        const auto spec = synthface::sample_identity(100 + i, i);
        for (int f = 0; f < frames; ++f) {
            images.push_back(image_to_tensor(synthface::render(spec, synthface::sample_pose(i * 50 + f), res, res).image));
            labels.push_back(i);
        }
    }
    IdentityBackbone backbone(ids);
    torch::manual_seed(0);
    const double acc = train_identity_backbone(backbone, torch::stack(images), torch::tensor(labels),
                                               {.steps = 120, .batch_size = 16, .lr = 1e-3, .seed = 1});
    EXPECT_GE(acc, 0.9);
    for (const auto& p : backbone.module().parameters()) EXPECT_FALSE(p.requires_grad());

    torch::NoGradGuard ng;
    const auto e = torch::nn::functional::normalize(backbone.embed(torch::stack(images)),
                                                    torch::nn::functional::NormalizeFuncOptions().dim(1));
    const auto sim = e.matmul(e.t());
    double same = 0, diff = 0;
    int ns = 0, nd = 0;
    for (int a = 0; a < ids * frames; ++a) {
        for (int b = a + 1; b < ids * frames; ++b) {
            if (labels[a] == labels[b]) same += sim[a][b].item<double>(), ++ns;
            else diff += sim[a][b].item<double>(), ++nd;
        }
    }
    EXPECT_GT(same / ns, 0.9);
    EXPECT_LT(diff / nd, 0.5);
}

TEST(IdentityBackbone, RejectsBadLabels) {
    IdentityBackbone b(2);
    EXPECT_THROW(train_identity_backbone(b, torch::zeros({2, 3, 16, 16}), torch::tensor({0, 2}), {}),
                 std::invalid_argument);
    EXPECT_THROW(IdentityBackbone(0), std::invalid_argument);
}
