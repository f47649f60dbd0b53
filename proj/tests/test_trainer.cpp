// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "lsr/synthface.hpp"
#include "lsr/trainer.hpp"

namespace fs = std::filesystem;
using namespace lsr;
using namespace lsr::trainer;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("lsr_trainer_" + name);
    fs::remove_all(dir);
    return dir;
}

Config tiny_config(const std::string& variant) {
    Config c;
    for (const char* kv : {"data.resolution=32", "data.k=2", "nets.base_width=8", "nets.max_width=16",
                           "nets.latent_dim=16", "nets.spade_hidden=8", "nets.disc_base_width=8",
                           "nets.encoder_blocks=3", "schedule.batch_size=2", "schedule.pretrain_steps=6",
                           "schedule.pretrain_epochs=2", "schedule.full_steps=8", "schedule.full_epochs=2",
                           "losses.identity_steps=10", "logging.checkpoint_every=4"}) {
        c.apply_override(kv);
    }
    c.apply_override("variant.name=" + variant);
    return c;
}

std::vector<torch::Tensor> snapshot(const torch::nn::Module& m) {
    std::vector<torch::Tensor> out;
    for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
    return out;
}

bool same(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (!torch::equal(a[i], b[i])) return false;
    return true;
}

class TrainerTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        torch::set_num_threads(1);
        root_ = new fs::path(scratch_dir("data"));
        synthface::make_dataset(6, 5, 32, *root_, 11);
        auto index = dataio::load_dataset(*root_, dataio::split_first_n({0, 1, 2, 3, 4, 5}, 4));
        store_ = new dataio::FrameStore(index, 32);
    }
    static void TearDownTestSuite() {
        delete store_;
        delete root_;
    }
    static fs::path* root_;
    static dataio::FrameStore* store_;
};

fs::path* TrainerTest::root_ = nullptr;
dataio::FrameStore* TrainerTest::store_ = nullptr;

}  // namespace

TEST(Schedule, PointwiseAgainstClosedForm) {
    StageSchedule s;
    s.steps = 100;
    s.epochs = 4;
    s.lr = 0.001;
    for (int step = 0; step < 100; ++step) {
        const double expected = step < 75 ? 0.001 : 0.001 + (0.00001 - 0.001) * (step - 75) / 24.0;
        EXPECT_NEAR(s.lr_at(step), expected, 1e-15) << step;
    }
    EXPECT_DOUBLE_EQ(s.lr_at(99), 0.001 / 100);
    EXPECT_EQ(s.epoch_of(0), 0);
    EXPECT_EQ(s.epoch_of(74), 2);
    EXPECT_EQ(s.epoch_of(75), 3);
    EXPECT_EQ(s.epoch_of(99), 3);
}

TEST(Schedule, ExtraStepsStayAtFinalRate) {
    StageSchedule s;
    s.steps = 10;
    s.epochs = 2;
    s.extra_steps = 5;
    EXPECT_EQ(s.total_steps(), 15);
    EXPECT_DOUBLE_EQ(s.lr_at(12), s.lr / 100);
}

TEST(Schedule, RejectsNonPositive) {
    StageSchedule s;
    s.steps = 0;
    EXPECT_THROW(s.validate(), ConfigError);
    s.steps = 3;
    s.epochs = 4;
    EXPECT_THROW(s.validate(), ConfigError);
    s.epochs = 1;
    s.lr = 0;
    EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Schedule, FinetuneBudgetIsStepsPerShotTimesK) {
    Config c;
    EXPECT_EQ(schedule_from_config(c, Stage::kFinetune, 4).steps, 160);
    EXPECT_EQ(schedule_from_config(c, Stage::kPretrain).epochs, 2);
}

TEST(StepLogTest, JsonKeysExact) {
    StepLog l;
    l.step = 3;
    l.r1 = 0.5;
    const auto j = l.to_json();
    std::vector<std::string> keys;
    for (const auto& [k, v] : j.items()) keys.push_back(k);
    std::sort(keys.begin(), keys.end());
    EXPECT_EQ(keys, (std::vector<std::string>{"d_adv", "g_adv", "latent_l2", "r1", "rec_id", "rec_l1", "rec_perc", "step",
                                              "xent"}));
    EXPECT_EQ(StepLog::from_json(j).r1, 0.5);
}

TEST_F(TrainerTest, PretrainTouchesOnlyEncoderAndLayout) {
    const auto cfg = tiny_config("latent_layout");
    Session fresh(cfg);
    const auto g0 = snapshot(*fresh.nets.image_gen);
    const auto d0 = snapshot(*fresh.nets.discriminator);
    const auto l0 = snapshot(*fresh.nets.layout_gen);
    const auto out = scratch_dir("pretrain");
    const auto r = pretrain_layout(cfg, *store_, {.out_dir = out});
    ASSERT_EQ(r.log.size(), 6u);
    for (const auto& l : r.log) EXPECT_TRUE(std::isfinite(l.xent) && l.xent > 0);
    EXPECT_TRUE(same(g0, snapshot(*r.session->nets.image_gen)));
    EXPECT_TRUE(same(d0, snapshot(*r.session->nets.discriminator)));
    EXPECT_FALSE(same(l0, snapshot(*r.session->nets.layout_gen)));
    for (const auto& p : r.session->nets.image_gen->parameters()) EXPECT_FALSE(p.grad().defined());
    for (const auto& p : r.session->nets.discriminator->parameters()) EXPECT_FALSE(p.grad().defined());
    EXPECT_EQ(r.final_checkpoint, out / "final");

    // Round trip: eval-mode layout outputs are bitwise identical after reload.
    auto loaded = Session::load(r.final_checkpoint);
    auto episode = dataio::make_episode(*store_, 4, {0, 1}, 2);
    const auto batch = dataio::batch_episodes({episode});
    torch::NoGradGuard ng;
    r.session->nets.train(false);
    loaded.nets.train(false);
    const auto a = r.session->nets.generate(r.session->nets.encode(batch.sources), batch.target_contour);
    const auto b = loaded.nets.generate(loaded.nets.encode(batch.sources), batch.target_contour);
    EXPECT_TRUE(torch::equal(a.layout.probs, b.layout.probs));
    EXPECT_TRUE(torch::equal(a.image, b.image));
}

TEST_F(TrainerTest, PretrainRejectsVariantsWithoutLayout) {
    EXPECT_THROW(pretrain_layout(tiny_config("spade_landmarks"), *store_, {}), ConfigError);
    EXPECT_THROW(pretrain_layout(tiny_config("baseline"), *store_, {}), ConfigError);
}

TEST_F(TrainerTest, PretrainNeedsSegmentationBeforeTraining) {
    const auto dir = scratch_dir("noseg");
    synthface::make_dataset(3, 3, 32, dir, 5);
    fs::remove(dir / "1" / "2.seg.png");
    dataio::FrameStore store(dataio::load_dataset(dir), 32);
    std::int64_t steps = 0;
    try {
        RunOptions opts;
        opts.on_step = [&](const StepLog&) { ++steps; };
        pretrain_layout(tiny_config("latent_layout"), store, opts);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("2.png"), std::string::npos);
    }
    EXPECT_EQ(steps, 0);
}

TEST_F(TrainerTest, FullNeedsMatchingInitCheckpoint) {
    EXPECT_THROW(train_full(tiny_config("latent_layout"), *store_, {}), ConfigError);
    const auto base_dir = scratch_dir("full_base");
    auto cfg = tiny_config("baseline");
    cfg.apply_override("schedule.full_steps=2");
    cfg.apply_override("schedule.full_epochs=1");
    const auto r = train_full(cfg, *store_, {.out_dir = base_dir});
    RunOptions opts;
    opts.init_checkpoint = r.final_checkpoint;
    EXPECT_THROW(train_full(tiny_config("latent_layout"), *store_, opts), ConfigError);
}

TEST_F(TrainerTest, CheckpointRoundTripIsBitwise) {
    auto cfg = tiny_config("spade_landmarks");
    cfg.apply_override("schedule.full_steps=3");
    cfg.apply_override("schedule.full_epochs=1");
    const auto r = train_full(cfg, *store_, {.out_dir = scratch_dir("roundtrip")});
    auto loaded = Session::load(r.final_checkpoint);
    EXPECT_EQ(loaded.step, 3);
    EXPECT_EQ(loaded.stage, Stage::kFull);
    const auto a = r.session->nets.modules(), b = loaded.nets.modules();
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        EXPECT_TRUE(same(snapshot(*a[i].second), snapshot(*b[i].second))) << a[i].first;
        const auto bufs = b[i].second->named_buffers();
        for (const auto& item : a[i].second->named_buffers()) {
            EXPECT_TRUE(torch::equal(item.value(), *bufs.find(item.key()))) << item.key();
        }
    }
    ASSERT_EQ(r.session->optimizers.size(), loaded.optimizers.size());
    for (const auto& [name, opt] : r.session->optimizers) {
        const auto& other = *loaded.optimizers.at(name);
        const auto& pa = opt->param_groups()[0].params();
        const auto& pb = other.param_groups()[0].params();
        ASSERT_EQ(pa.size(), pb.size());
        for (size_t i = 0; i < pa.size(); ++i) {
            auto ia = opt->state().find(pa[i].unsafeGetTensorImpl());
            auto ib = other.state().find(pb[i].unsafeGetTensorImpl());
            ASSERT_EQ(ia == opt->state().end(), ib == other.state().end());
            if (ia == opt->state().end()) continue;
            const auto& sa = static_cast<const torch::optim::AdamParamState&>(*ia->second);
            const auto& sb = static_cast<const torch::optim::AdamParamState&>(*ib->second);
            EXPECT_EQ(sa.step(), sb.step());
            EXPECT_TRUE(torch::equal(sa.exp_avg(), sb.exp_avg()));
            EXPECT_TRUE(torch::equal(sa.exp_avg_sq(), sb.exp_avg_sq()));
        }
    }
    EXPECT_TRUE(same(snapshot(r.session->identity->module()), snapshot(loaded.identity->module())));
}

TEST_F(TrainerTest, ResumeReproducesTrajectory) {
    const auto pre = pretrain_layout(tiny_config("latent_layout"), *store_, {.out_dir = scratch_dir("resume_pre")});
    const auto cfg = tiny_config("latent_layout");
    RunOptions a;
    a.init_checkpoint = pre.final_checkpoint;
    a.identity = pre.session->identity;
    const auto whole = train_full(cfg, *store_, a);
    ASSERT_EQ(whole.log.size(), 8u);

    RunOptions b = a;
    b.out_dir = scratch_dir("resume_full");
    b.stop_after = 5;
    const auto first = train_full(cfg, *store_, b);
    EXPECT_EQ(first.log.size(), 5u);
    EXPECT_TRUE(fs::exists(b.out_dir / "ckpt_00000005"));
    b.stop_after = -1;
    b.resume = true;
    b.init_checkpoint.reset();
    const auto rest = train_full(cfg, *store_, b);
    ASSERT_EQ(rest.log.size(), 3u);
    for (size_t i = 0; i < 3; ++i) {
        const auto& x = whole.log[5 + i];
        const auto& y = rest.log[i];
        EXPECT_EQ(x.step, y.step);
        EXPECT_NEAR(x.rec_l1, y.rec_l1, 1e-5);
        EXPECT_NEAR(x.rec_perc, y.rec_perc, 1e-5);
        EXPECT_NEAR(x.d_adv, y.d_adv, 1e-5);
        EXPECT_NEAR(x.g_adv, y.g_adv, 1e-5);
        EXPECT_NEAR(x.r1, y.r1, 1e-5);
    }
    // The JSON-lines log holds every step exactly once.
    std::ifstream in(b.out_dir / "log.jsonl");
    std::string line;
    std::int64_t expected = 1;
    while (std::getline(in, line)) EXPECT_EQ(nlohmann::json::parse(line).at("step").get<std::int64_t>(), expected++);
    EXPECT_EQ(expected, 9);
}

TEST_F(TrainerTest, FinetuneFreezesEncoders) {
    auto cfg = tiny_config("spade_landmarks");
    cfg.apply_override("schedule.full_steps=2");
    cfg.apply_override("schedule.full_epochs=1");
    const auto meta = train_full(cfg, *store_, {});
    const auto enc0 = snapshot(*meta.session->nets.encoder);
    const auto gen0 = snapshot(*meta.session->nets.image_gen);
    const auto& frames = store_->frames_of(5);
    std::vector<StepLog> log;
    const auto ft = finetune_subject(*meta.session, {frames[0], frames[1]}, {.steps_per_shot = 2}, &log);
    EXPECT_EQ(log.size(), 4u);
    EXPECT_TRUE(same(enc0, snapshot(*ft.nets.encoder)));
    EXPECT_FALSE(same(gen0, snapshot(*ft.nets.image_gen)));
    EXPECT_TRUE(same(gen0, snapshot(*meta.session->nets.image_gen)));  // meta untouched
    for (const auto& p : ft.nets.encoder->parameters()) EXPECT_FALSE(p.grad().defined());

    const auto single = finetune_subject(*meta.session, {frames[3]}, {.steps_per_shot = 2});
    EXPECT_EQ(single.step, 2);
}

TEST_F(TrainerTest, AllVariantsTrainWithoutNumericalFailure) {
    std::shared_ptr<losses::IdentityBackbone> identity;
    std::optional<fs::path> pretrained;
    for (auto v : nets::all_variants()) {
        auto cfg = tiny_config(nets::variant_name(v));
        cfg.apply_override("schedule.full_steps=200");
        cfg.apply_override("schedule.full_epochs=4");
        RunOptions opts;
        opts.identity = identity;
        if (v == nets::Variant::kLearnedSeg || v == nets::Variant::kLatentLayout) {
            if (!pretrained) pretrained = pretrain_layout(cfg, *store_, {.out_dir = scratch_dir("variants_pre")}).final_checkpoint;
            opts.init_checkpoint = pretrained;
        }
        const auto r = train_full(cfg, *store_, opts);
        identity = r.session->identity;
        ASSERT_EQ(r.log.size(), 200u) << nets::variant_name(v);
        for (const auto& l : r.log) {
            ASSERT_TRUE(std::isfinite(l.rec_l1) && std::isfinite(l.rec_perc) && std::isfinite(l.d_adv) &&
                        std::isfinite(l.g_adv) && std::isfinite(l.r1) && std::isfinite(l.xent))
                << nets::variant_name(v) << " step " << l.step;
        }
        if (v == nets::Variant::kLearnedSeg) EXPECT_GT(r.log.back().xent, 0.0);
        if (v == nets::Variant::kLatentLayout) EXPECT_EQ(r.log.back().xent, 0.0);
        if (v == nets::Variant::kUpperBound) EXPECT_EQ(r.session->nets.layout_calls(), 0);
        if (v == nets::Variant::kBaseline) {
            for (const auto& [name, m] : r.session->nets.modules()) {
                for (const auto& p : m->named_parameters()) EXPECT_EQ(p.key().find("spade"), std::string::npos) << p.key();
            }
        }
    }
}
