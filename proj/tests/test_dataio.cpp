// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "lsr/dataio.hpp"
#include "lsr/synthface.hpp"

namespace fs = std::filesystem;
using namespace lsr;
using namespace lsr::dataio;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("lsr_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

bool lit(const Image& img, int y, int x) {
    return img.at(y, x, 0) > 0 || img.at(y, x, 1) > 0 || img.at(y, x, 2) > 0;
}

int count_lit(const Image& img) {
    int n = 0;
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) n += lit(img, y, x);
    }
    return n;
}

// Every strongly lit pixel of `a` has some lit pixel of `b` within one pixel.
bool covered_within_one_pixel(const Image& a, const Image& b, int shift_x = 0) {
    for (int y = 0; y < a.height; ++y) {
        for (int x = 0; x < a.width; ++x) {
            const float v = std::max({a.at(y, x, 0), a.at(y, x, 1), a.at(y, x, 2)});
            if (v < 0.5f) continue;
            bool found = false;
            for (int dy = -1; dy <= 1 && !found; ++dy) {
                for (int dx = -1; dx <= 1 && !found; ++dx) {
                    const int yy = y + dy, xx = x + dx - shift_x;
                    if (yy >= 0 && yy < b.height && xx >= 0 && xx < b.width) found = lit(b, yy, xx);
                }
            }
            if (!found) return false;
        }
    }
    return true;
}

Image flip_horizontal(const Image& img) {
    Image out(img.height, img.width, img.channels);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
        }
    }
    return out;
}

LandmarkSet oracle_landmarks(int seed) {
    return synthface::face_landmarks(synthface::sample_identity(seed), synthface::sample_pose(seed));
}

ClassMap random_map(std::mt19937_64& rng, int h, int w) {
    ClassMap m(h, w);
    for (auto& l : m.labels) l = static_cast<std::uint8_t>(rng() % synthface::kNumClasses);
    return m;
}

// A small on-disk dataset shared by several tests.
const fs::path& shared_dataset() {
    static const fs::path dir = [] {
        auto d = scratch_dir("dataio_shared");
        synthface::make_dataset(20, 10, 32, d, 5);
        return d;
    }();
    return dir;
}

}  // namespace

TEST(Rasterize, DegenerateLandmarksDoNotCrash) {
    LandmarkSet lmk;
    for (auto& p : lmk.points) p = {0.5f, 0.5f};
    const auto img = rasterize_landmarks(lmk, 64, 64);
    const int n = count_lit(img);
    EXPECT_GT(n, 0);
    EXPECT_LE(n, 9);
    for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) {
            if (lit(img, y, x)) {
                EXPECT_LE(std::abs(x - 32), 1);
                EXPECT_LE(std::abs(y - 32), 1);
            }
        }
    }
}

TEST(Rasterize, MirroredLandmarksGiveMirroredImage) {
    for (int seed : {1, 2, 3}) {
        const auto lmk = oracle_landmarks(seed);
        const auto a = flip_horizontal(rasterize_landmarks(lmk, 64, 64));
        const auto b = rasterize_landmarks(mirror_coordinates(lmk), 64, 64);
        EXPECT_TRUE(covered_within_one_pixel(a, b));
        EXPECT_TRUE(covered_within_one_pixel(b, a));
        float max_diff = 0;
        for (size_t i = 0; i < a.data.size(); ++i) max_diff = std::max(max_diff, std::abs(a.data[i] - b.data[i]));
        EXPECT_LT(max_diff, 1e-4f);
    }
}

TEST(Rasterize, OracleLandmarksDrawEnoughPixels) {
    for (int seed = 0; seed < 10; ++seed) EXPECT_GT(count_lit(rasterize_landmarks(oracle_landmarks(seed), 64, 64)), 50);
}

TEST(Rasterize, BackgroundIsExactlyZeroAndValuesBounded) {
    const auto img = rasterize_landmarks(oracle_landmarks(4), 64, 64);
    EXPECT_EQ(img.at(0, 0, 0), 0.0f);
    EXPECT_EQ(img.at(63, 63, 2), 0.0f);
    for (float v : img.data) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(Rasterize, OutOfRangePointsAreClipped) {
    LandmarkSet lmk = oracle_landmarks(8);
    lmk.points[0] = {-0.3f, 1.7f};
    lmk.points[16] = {2.0f, -1.0f};
    const auto img = rasterize_landmarks(lmk, 32, 32);
    EXPECT_TRUE(lit(img, 31, 0));
    EXPECT_TRUE(lit(img, 0, 31));
}

TEST(Rasterize, TranslationEquivariant) {
    const auto lmk = oracle_landmarks(6);
    for (double delta : {3.0 / 64, 5.3 / 64, -4.6 / 64}) {
        LandmarkSet moved = lmk;
        for (auto& p : moved.points) p.x += static_cast<float>(delta);
        const int shift = static_cast<int>(std::lround(delta * 64));
        const auto a = rasterize_landmarks(lmk, 64, 64);
        const auto b = rasterize_landmarks(moved, 64, 64);
        EXPECT_TRUE(covered_within_one_pixel(b, a, shift)) << delta;
        EXPECT_TRUE(covered_within_one_pixel(a, b, -shift)) << delta;
    }
}

TEST(MergeSegmentations, IdentityWhenEqualAndIdempotent) {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 20; ++i) {
        const auto m = random_map(rng, 16, 24);
        EXPECT_EQ(merge_segmentations(m, m), m);
        const auto other = random_map(rng, 16, 24);
        const auto merged = merge_segmentations(m, other);
        EXPECT_EQ(merge_segmentations(merged, merged), merged);
        EXPECT_EQ(merged.labels.size(), m.labels.size());
    }
}

TEST(MergeSegmentations, FineClassesWinOnFinePixels) {
    const ClassMap coarse(8, 8, synthface::kHair);
    const ClassMap fine(8, 8, synthface::kNose);
    EXPECT_EQ(merge_segmentations(coarse, fine), fine);
}

TEST(MergeSegmentations, RecoversEyesMissedByCoarseMap) {
    ClassMap truth(8, 8, synthface::kSkin);
    truth.at(0, 0) = synthface::kHair;
    truth.at(7, 7) = synthface::kBackground;
    truth.at(3, 2) = truth.at(3, 5) = synthface::kEyes;
    ClassMap coarse = truth;
    coarse.at(3, 2) = coarse.at(3, 5) = synthface::kSkin;  // eyes lost at low resolution
    ClassMap fine = truth;
    fine.at(0, 0) = synthface::kSkin;  // fine map misses the hair
    EXPECT_EQ(merge_segmentations(coarse, fine), truth);
}

TEST(MergeSegmentations, ShapeMismatchThrows) {
    EXPECT_THROW(merge_segmentations(ClassMap(4, 4), ClassMap(4, 5)), std::invalid_argument);
}

TEST(LoadDataset, EmptyDirectoryGivesEmptyIndex) {
    const auto index = load_dataset(scratch_dir("empty"));
    EXPECT_TRUE(index.frames.empty());
    EXPECT_EQ(index.num_frames(), 0u);
}

TEST(LoadDataset, SplitFifteenFive) {
    const auto root = shared_dataset();
    const auto all = load_dataset(root);
    ASSERT_EQ(all.identity_ids().size(), 20u);
    const auto split = split_first_n(all.identity_ids(), 15);
    const auto spec_path = scratch_dir("split") / "split.json";
    write_split_spec(split, spec_path);
    const auto index = load_dataset(root, read_split_spec(spec_path));
    EXPECT_EQ(index.train_ids.size(), 15u);
    EXPECT_EQ(index.test_ids.size(), 5u);
    std::set<int> train(index.train_ids.begin(), index.train_ids.end());
    for (int id : index.test_ids) EXPECT_EQ(train.count(id), 0u);
    EXPECT_TRUE(index.has_segmentation());
}

TEST(LoadDataset, OverlappingSplitRejected) {
    EXPECT_THROW(load_dataset(shared_dataset(), SplitSpec{{0, 1}, {1, 2}}), std::invalid_argument);
}

TEST(LoadDataset, MissingLandmarksNamesPath) {
    const auto root = scratch_dir("missing_lmk");
    synthface::make_dataset(2, 2, 32, root, 1);
    fs::remove(root / "1" / "0.lmk.json");
    try {
        load_dataset(root);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("0.lmk.json"), std::string::npos);
    }
}

TEST(LoadDataset, UnknownClassIndexRejected) {
    const auto root = scratch_dir("bad_seg");
    synthface::make_dataset(1, 2, 32, root, 1);
    ClassMap bad(32, 32, 9);
    write_class_png(bad, root / "0" / "1.seg.png");
    EXPECT_THROW(FrameStore(load_dataset(root), 32), std::runtime_error);
}

TEST(LoadDataset, CorruptImageNamesPath) {
    const auto root = scratch_dir("corrupt_png");
    synthface::make_dataset(1, 2, 32, root, 1);
    std::ofstream(root / "0" / "0.png") << "not a png";
    try {
        FrameStore store(load_dataset(root), 32);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("0.png"), std::string::npos);
    }
}

TEST(SampleEpisode, ExactlyKPlusOneFrames) {
    const auto root = scratch_dir("kplus1");
    synthface::make_dataset(1, 5, 32, root, 2);
    const FrameStore store(load_dataset(root), 32);
    std::mt19937_64 rng(0);
    for (int i = 0; i < 50; ++i) {
        const auto ep = sample_episode(store, 0, 4, rng);
        std::set<int> used(ep.source_frames.begin(), ep.source_frames.end());
        used.insert(ep.target_frame);
        EXPECT_EQ(used.size(), 5u);
    }
    EXPECT_THROW(sample_episode(store, 0, 5, rng), std::invalid_argument);
}

TEST(SampleEpisode, TooFewFramesNamesIdentity) {
    const auto root = scratch_dir("few_frames");
    synthface::make_dataset(4, 2, 32, root, 2);
    const FrameStore store(load_dataset(root), 32);
    std::mt19937_64 rng(0);
    try {
        sample_episode(store, 3, 2, rng);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("identity 3"), std::string::npos);
    }
}

TEST(SampleEpisode, TargetNeverAmongSources) {
    const FrameStore store(load_dataset(shared_dataset()), 32);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(seed);
        for (int i = 0; i < 1000; ++i) {
            const auto ep = sample_episode(store, static_cast<int>(seed), 4, rng);
            ASSERT_EQ(ep.source_frames.size(), 4u);
            ASSERT_EQ(std::count(ep.source_frames.begin(), ep.source_frames.end(), ep.target_frame), 0);
            std::set<int> s(ep.source_frames.begin(), ep.source_frames.end());
            ASSERT_EQ(s.size(), 4u);
        }
    }
}

TEST(SampleEpisode, SingleShot) {
    const FrameStore store(load_dataset(shared_dataset()), 32);
    std::mt19937_64 rng(1);
    const auto ep = sample_episode(store, 0, 1, rng);
    EXPECT_EQ(ep.k, 1);
    EXPECT_EQ(ep.source_images.size(), 1u);
}

TEST(BatchEpisodes, SourceBlockShape) {
    const auto root = scratch_dir("batch64");
    synthface::make_dataset(2, 6, 64, root, 3);
    const FrameStore store(load_dataset(root), 64);
    std::mt19937_64 rng(2);
    const auto batch = batch_episodes({sample_episode(store, 0, 4, rng), sample_episode(store, 1, 4, rng)});
    EXPECT_EQ(batch.sources.sizes(), (std::vector<int64_t>{2, 4, 6, 64, 64}));
    EXPECT_EQ(batch.target_image.sizes(), (std::vector<int64_t>{2, 3, 64, 64}));
    EXPECT_EQ(batch.target_segmentation.sizes(), (std::vector<int64_t>{2, 64, 64}));
    // RGB channels in [-1,1], contour channels in [0,1].
    EXPECT_GE(batch.sources.select(2, 3).min().item<float>(), 0.0f);
    EXPECT_LT(batch.sources.narrow(2, 0, 3).min().item<float>(), 0.0f);
}

TEST(BatchEpisodes, RejectsEmptyAndMixedK) {
    EXPECT_THROW(batch_episodes({}), std::invalid_argument);
    const FrameStore store(load_dataset(shared_dataset()), 32);
    std::mt19937_64 rng(2);
    EXPECT_THROW(batch_episodes({sample_episode(store, 0, 1, rng), sample_episode(store, 0, 2, rng)}),
                 std::invalid_argument);
}

TEST(BatchPrefetcher, DeliversInStepOrderMatchingDirectSampling) {
    const FrameStore store(load_dataset(shared_dataset()), 32);
    const auto ids = store.index().identity_ids();
    auto producer = [&](std::int64_t step) { return sample_batch(store, ids, 3, 2, 99, step); };
    BatchPrefetcher prefetch(producer, 10, 30, 3, 4);
    for (std::int64_t step = 10; step < 30; ++step) {
        const auto got = prefetch.next();
        const auto want = sample_batch(store, ids, 3, 2, 99, step);
        ASSERT_TRUE(torch::equal(got.sources, want.sources)) << step;
        ASSERT_EQ(got.identity_ids, want.identity_ids);
    }
    EXPECT_THROW(prefetch.next(), std::out_of_range);
}

TEST(BatchPrefetcher, PropagatesWorkerErrors) {
    BatchPrefetcher prefetch([](std::int64_t) -> Batch { throw std::runtime_error("boom"); }, 0, 5, 1, 2);
    EXPECT_THROW(prefetch.next(), std::runtime_error);
}
