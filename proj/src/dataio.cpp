// SPDX-License-Identifier: Apache-2.0

#include "lsr/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "lsr/synthface.hpp"

namespace lsr::dataio {

namespace {

struct Part {
    int first;
    int last;
    bool closed;
    int color;
};

// Nose bridge and nose base share a color.
constexpr Part kParts[] = {
    {0, 16, false, 0},  {17, 21, false, 1}, {22, 26, false, 2}, {27, 30, false, 3}, {31, 35, false, 3},
    {36, 41, true, 4},  {42, 47, true, 5},  {48, 59, true, 6},  {60, 67, true, 7},
};

bool is_number(const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

}  // namespace

const std::array<std::array<float, 3>, kNumContourParts>& contour_palette() {
    static const std::array<std::array<float, 3>, kNumContourParts> kPalette = {{
        {1.0f, 0.5f, 0.0f},  // jaw
        {1.0f, 0.0f, 0.0f},  // right brow
        {0.0f, 1.0f, 0.0f},  // left brow
        {0.0f, 0.0f, 1.0f},  // nose
        {1.0f, 1.0f, 0.0f},  // right eye
        {0.0f, 1.0f, 1.0f},  // left eye
        {1.0f, 0.0f, 1.0f},  // outer lips
        {1.0f, 1.0f, 1.0f},  // inner lips
    }};
    return kPalette;
}

ContourImage rasterize_landmarks(const LandmarkSet& lmk, int height, int width) {
    ContourImage img(height, width, 3);
    const double line_width = std::min(height, width) / 64.0;
    const double peak = std::min(1.0, line_width);
    const double reach = line_width / 2 + 0.5;
    const auto& palette = contour_palette();

    auto to_px = [&](const Point2& p) {
        const double x = std::clamp(static_cast<double>(p.x), 0.0, 1.0) * width;
        const double y = std::clamp(static_cast<double>(p.y), 0.0, 1.0) * height;
        return std::pair<double, double>{x, y};
    };
    auto draw_segment = [&](std::pair<double, double> p, std::pair<double, double> q, const std::array<float, 3>& c) {
        const int x0 = std::max(0, static_cast<int>(std::floor(std::min(p.first, q.first) - reach - 0.5)));
        const int x1 = std::min(width - 1, static_cast<int>(std::ceil(std::max(p.first, q.first) + reach)));
        const int y0 = std::max(0, static_cast<int>(std::floor(std::min(p.second, q.second) - reach - 0.5)));
        const int y1 = std::min(height - 1, static_cast<int>(std::ceil(std::max(p.second, q.second) + reach)));
        const double dx = q.first - p.first, dy = q.second - p.second;
        const double len2 = dx * dx + dy * dy;
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double cx = x + 0.5, cy = y + 0.5;
                double t = len2 > 0 ? ((cx - p.first) * dx + (cy - p.second) * dy) / len2 : 0.0;
                t = std::clamp(t, 0.0, 1.0);
                const double ex = p.first + t * dx - cx, ey = p.second + t * dy - cy;
                const double d = std::sqrt(ex * ex + ey * ey);
                const double intensity = std::clamp(reach - d, 0.0, peak);
                if (intensity <= 0) continue;
                for (int k = 0; k < 3; ++k) {
                    float& v = img.at(y, x, k);
                    v = std::max(v, static_cast<float>(c[k] * intensity));
                }
            }
        }
    };

    for (const auto& part : kParts) {
        const auto& color = palette[part.color];
        for (int i = part.first; i < part.last; ++i) {
            draw_segment(to_px(lmk.points[i]), to_px(lmk.points[i + 1]), color);
        }
        if (part.closed) draw_segment(to_px(lmk.points[part.last]), to_px(lmk.points[part.first]), color);
    }
    return img;
}

ClassMap merge_segmentations(const ClassMap& coarse, const ClassMap& fine) {
    using namespace synthface;
    if (coarse.height != fine.height || coarse.width != fine.width) {
        throw std::invalid_argument("merge_segmentations: shape mismatch " + std::to_string(coarse.height) + "x" +
                                    std::to_string(coarse.width) + " vs " + std::to_string(fine.height) + "x" +
                                    std::to_string(fine.width));
    }
    ClassMap out(coarse.height, coarse.width);
    for (size_t i = 0; i < out.labels.size(); ++i) {
        const auto f = fine.labels[i];
        const auto c = coarse.labels[i];
        if (f == kEyes || f == kNose || f == kMouth) {
            out.labels[i] = f;
        } else if (c == kHair || c == kClothes || c == kBackground) {
            out.labels[i] = c;
        } else {
            out.labels[i] = kSkin;
        }
    }
    return out;
}

SplitSpec read_split_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("failed to open split spec: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
        SplitSpec s{j.at("train").get<std::vector<int>>(), j.at("test").get<std::vector<int>>()};
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed split spec " + path.string() + ": " + e.what());
    }
}

void write_split_spec(const SplitSpec& split, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("failed to open for writing: " + path.string());
    out << nlohmann::json{{"train", split.train}, {"test", split.test}}.dump() << '\n';
}

SplitSpec split_first_n(const std::vector<int>& ids, int n_train) {
    std::vector<int> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    const auto n = static_cast<size_t>(std::clamp(n_train, 0, static_cast<int>(sorted.size())));
    return {{sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(n)},
            {sorted.begin() + static_cast<std::ptrdiff_t>(n), sorted.end()}};
}

std::vector<int> DatasetIndex::identity_ids() const {
    std::vector<int> ids;
    for (const auto& [id, _] : frames) ids.push_back(id);
    return ids;
}

size_t DatasetIndex::num_frames() const {
    size_t n = 0;
    for (const auto& [_, list] : frames) n += list.size();
    return n;
}

bool DatasetIndex::has_segmentation() const {
    for (const auto& [_, list] : frames) {
        for (const auto& f : list) {
            if (f.segmentation.empty()) return false;
        }
    }
    return true;
}

DatasetIndex load_dataset(const std::filesystem::path& root, const std::optional<SplitSpec>& split) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw std::runtime_error("dataset root is not a directory: " + root.string());
    DatasetIndex index;
    index.root = root;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (!entry.is_directory() || !is_number(entry.path().filename().string())) continue;
        const int id = std::stoi(entry.path().filename().string());
        std::vector<FrameRecord> list;
        for (const auto& file : fs::directory_iterator(entry.path())) {
            const std::string name = file.path().filename().string();
            if (name.size() <= 4 || name.substr(name.size() - 4) != ".png") continue;
            const std::string stem = name.substr(0, name.size() - 4);
            if (!is_number(stem)) continue;  // skips <n>.seg.png
            FrameRecord rec{id, std::stoi(stem), file.path(), entry.path() / (stem + ".lmk.json"),
                            entry.path() / (stem + ".seg.png")};
            if (!fs::exists(rec.landmarks)) throw std::runtime_error("missing landmarks file: " + rec.landmarks.string());
            if (!fs::exists(rec.segmentation)) rec.segmentation.clear();
            list.push_back(std::move(rec));
        }
        std::sort(list.begin(), list.end(),
                  [](const FrameRecord& a, const FrameRecord& b) { return a.frame_index < b.frame_index; });
        if (!list.empty()) index.frames.emplace(id, std::move(list));
    }

    if (!split) {
        index.train_ids = index.identity_ids();
        return index;
    }
    std::set<int> train(split->train.begin(), split->train.end());
    for (int id : split->test) {
        if (train.count(id)) throw std::invalid_argument("identity " + std::to_string(id) + " is in both splits");
    }
    for (const auto* list : {&split->train, &split->test}) {
        for (int id : *list) {
            if (!index.frames.count(id)) {
                throw std::runtime_error("split names identity " + std::to_string(id) + " missing from " + root.string());
            }
        }
    }
    index.train_ids = split->train;
    index.test_ids = split->test;
    std::sort(index.train_ids.begin(), index.train_ids.end());
    std::sort(index.test_ids.begin(), index.test_ids.end());
    return index;
}

FrameStore::FrameStore(DatasetIndex index, int resolution) : index_(std::move(index)), resolution_(resolution) {
    for (const auto& [id, list] : index_.frames) {
        auto& loaded = frames_[id];
        for (const auto& rec : list) {
            Image img = read_png(rec.image);
            if (img.height != resolution || img.width != resolution) {
                throw std::runtime_error("frame " + rec.image.string() + " is " + std::to_string(img.height) + "x" +
                                         std::to_string(img.width) + ", expected " + std::to_string(resolution));
            }
            LoadedFrame f;
            f.identity_id = id;
            f.frame_index = rec.frame_index;
            f.image = image_to_tensor(img, -1.0f, 1.0f);
            f.landmarks = read_landmarks(rec.landmarks);
            f.contour = image_to_tensor(rasterize_landmarks(f.landmarks, resolution, resolution), 0.0f, 1.0f);
            if (!rec.segmentation.empty()) {
                ClassMap seg = read_class_png(rec.segmentation, synthface::kNumClasses);
                if (seg.height != resolution || seg.width != resolution) {
                    throw std::runtime_error("segmentation size mismatch: " + rec.segmentation.string());
                }
                f.segmentation = class_map_to_tensor(seg);
            }
            loaded.push_back(std::move(f));
        }
    }
}

const std::vector<LoadedFrame>& FrameStore::frames_of(int identity_id) const {
    auto it = frames_.find(identity_id);
    if (it == frames_.end()) throw std::invalid_argument("unknown identity " + std::to_string(identity_id));
    return it->second;
}

Episode make_episode(const FrameStore& store, int identity_id, const std::vector<int>& source_frames,
                     int target_frame) {
    const auto& frames = store.frames_of(identity_id);
    auto check = [&](int f) {
        if (f < 0 || f >= static_cast<int>(frames.size())) {
            throw std::invalid_argument("frame " + std::to_string(f) + " out of range for identity " +
                                        std::to_string(identity_id));
        }
    };
    if (source_frames.empty()) throw std::invalid_argument("episode needs at least one source frame");
    Episode ep;
    ep.identity_id = identity_id;
    ep.k = static_cast<int>(source_frames.size());
    ep.source_frames = source_frames;
    ep.target_frame = target_frame;
    for (int f : source_frames) {
        check(f);
        ep.source_images.push_back(frames[f].image);
        ep.source_contours.push_back(frames[f].contour);
        ep.source_landmarks.push_back(frames[f].landmarks);
    }
    check(target_frame);
    const auto& t = frames[target_frame];
    ep.target_image = t.image;
    ep.target_contour = t.contour;
    ep.target_segmentation = t.segmentation;
    ep.target_landmarks = t.landmarks;
    return ep;
}

Episode sample_episode(const FrameStore& store, int identity_id, int k, std::mt19937_64& rng) {
    if (k < 1) throw std::invalid_argument("sample_episode: K must be >= 1");
    const auto& frames = store.frames_of(identity_id);
    const int n = static_cast<int>(frames.size());
    if (n < k + 1) {
        throw std::invalid_argument("identity " + std::to_string(identity_id) + " has " + std::to_string(n) +
                                    " frames, needs at least K+1 = " + std::to_string(k + 1));
    }
    // Partial Fisher-Yates: the first K+1 slots end up distinct.
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i <= k; ++i) {
        const int j = i + static_cast<int>(rng() % static_cast<std::uint64_t>(n - i));
        std::swap(order[i], order[j]);
    }
    return make_episode(store, identity_id, {order.begin(), order.begin() + k}, order[k]);
}

Batch batch_episodes(const std::vector<Episode>& episodes) {
    if (episodes.empty()) throw std::invalid_argument("batch_episodes: empty episode list");
    const int k = episodes.front().k;
    std::vector<torch::Tensor> sources, contours, images, segs;
    bool all_seg = true;
    Batch batch;
    for (const auto& ep : episodes) {
        if (ep.k != k) throw std::invalid_argument("batch_episodes: mixed K in batch");
        std::vector<torch::Tensor> shots;
        for (int i = 0; i < k; ++i) shots.push_back(torch::cat({ep.source_images[i], ep.source_contours[i]}, 0));
        sources.push_back(torch::stack(shots));
        contours.push_back(ep.target_contour);
        images.push_back(ep.target_image);
        all_seg = all_seg && ep.target_segmentation.defined();
        if (ep.target_segmentation.defined()) segs.push_back(ep.target_segmentation);
        batch.identity_ids.push_back(ep.identity_id);
    }
    try {
        batch.sources = torch::stack(sources);
        batch.target_contour = torch::stack(contours);
        batch.target_image = torch::stack(images);
        if (all_seg) batch.target_segmentation = torch::stack(segs);
    } catch (const c10::Error&) {
        throw std::invalid_argument("batch_episodes: episodes differ in resolution");
    }
    return batch;
}

Batch sample_batch(const FrameStore& store, const std::vector<int>& identity_pool, int batch_size, int k,
                   std::uint64_t seed, std::int64_t step) {
    if (identity_pool.empty()) throw std::invalid_argument("sample_batch: empty identity pool");
    std::mt19937_64 rng(synthface::mix_seed(seed, static_cast<std::uint64_t>(step)));
    std::vector<Episode> eps;
    for (int i = 0; i < batch_size; ++i) {
        const int id = identity_pool[rng() % identity_pool.size()];
        eps.push_back(sample_episode(store, id, k, rng));
    }
    return batch_episodes(eps);
}

BatchPrefetcher::BatchPrefetcher(Producer producer, std::int64_t first_step, std::int64_t end_step, int num_workers,
                                 int capacity)
    : producer_(std::move(producer)),
      next_claim_(first_step),
      next_deliver_(first_step),
      end_(end_step),
      capacity_(std::max(1, capacity)) {
    for (int i = 0; i < std::max(1, num_workers); ++i) workers_.emplace_back([this] { work(); });
}

BatchPrefetcher::~BatchPrefetcher() {
    {
        std::lock_guard lock(mu_);
        stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
}

void BatchPrefetcher::work() {
    for (;;) {
        std::int64_t step;
        {
            std::unique_lock lock(mu_);
            cv_.wait(lock, [&] { return stop_ || next_claim_ >= end_ || next_claim_ < next_deliver_ + capacity_; });
            if (stop_ || next_claim_ >= end_) return;
            step = next_claim_++;
        }
        try {
            Batch b = producer_(step);
            std::lock_guard lock(mu_);
            ready_.emplace(step, std::move(b));
        } catch (...) {
            std::lock_guard lock(mu_);
            if (!error_) error_ = std::current_exception();
        }
        cv_.notify_all();
    }
}

Batch BatchPrefetcher::next() {
    std::unique_lock lock(mu_);
    if (next_deliver_ >= end_) throw std::out_of_range("BatchPrefetcher: no more steps");
    cv_.wait(lock, [&] { return error_ || ready_.count(next_deliver_) > 0; });
    if (error_) std::rethrow_exception(error_);
    auto node = ready_.extract(next_deliver_);
    ++next_deliver_;
    lock.unlock();
    cv_.notify_all();
    return std::move(node.mapped());
}

}  // namespace lsr::dataio
