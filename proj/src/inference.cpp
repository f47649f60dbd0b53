// SPDX-License-Identifier: Apache-2.0

#include "lsr/inference.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

#include "lsr/synthface.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lsr::inference {

namespace {

constexpr char kMagic[8] = {'L', 'S', 'R', 'A', 'V', 'T', 'R', '1'};

// Shallow copy: shares the modules, switched to eval mode.
nets::Networks eval_nets(const trainer::Session& session) {
    nets::Networks n = session.nets;
    n.train(false);
    return n;
}

void put_u32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4] = {};
    in.read(reinterpret_cast<char*>(b), 4);
    return b[0] | b[1] << 8 | b[2] << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

void put_floats(std::ostream& out, const torch::Tensor& t) {
    const auto c = t.to(torch::kFloat).contiguous();
    const float* p = c.data_ptr<float>();
    for (int64_t i = 0; i < c.numel(); ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, p + i, 4);
        put_u32(out, bits);
    }
}

torch::Tensor get_floats(std::istream& in, int64_t n) {
    auto t = torch::empty({1, n}, torch::kFloat);
    float* p = t.data_ptr<float>();
    for (int64_t i = 0; i < n; ++i) {
        const auto bits = get_u32(in);
        std::memcpy(p + i, &bits, 4);
    }
    return t;
}

dataio::LoadedFrame occlude(const dataio::LoadedFrame& f, std::uint64_t seed, torch::Tensor& mask) {
    synthface::RenderedSample sample;
    sample.image = tensor_to_image(f.image);
    sample.landmarks = f.landmarks;
    sample.identity_id = f.identity_id;
    if (f.segmentation.defined()) sample.segmentation = tensor_to_class_map(f.segmentation);
    const auto occ = synthface::inject_occluder(sample, seed);
    dataio::LoadedFrame out = f;
    out.image = image_to_tensor(occ.sample.image);
    mask = class_map_to_tensor(occ.mask).to(torch::kFloat);
    return out;
}

}  // namespace

AvatarEmbedding embed(const trainer::Session& session, const std::vector<dataio::LoadedFrame>& shots) {
    if (shots.empty()) throw std::invalid_argument("embedding needs at least one frame");
    for (const auto& f : shots) {
        if (f.identity_id != shots.front().identity_id) {
            throw std::invalid_argument("embedding frames mix identities " + std::to_string(shots.front().identity_id) +
                                        " and " + std::to_string(f.identity_id));
        }
    }
    auto n = eval_nets(session);
    torch::NoGradGuard ng;
    std::vector<nets::LatentPair> per_shot;
    for (const auto& f : shots) per_shot.push_back(n.encoder(torch::cat({f.image, f.contour}, 0).unsqueeze(0)));
    AvatarEmbedding e;
    e.latents = nets::aggregate_latents(per_shot);
    e.identity_id = shots.front().identity_id;
    e.k = static_cast<int>(shots.size());
    e.checkpoint_hash = session.config.architecture_hash();
    return e;
}

void save_avatar(const AvatarEmbedding& e, const fs::path& path) {
    const json manifest{{"identity_id", e.identity_id},
                        {"k", e.k},
                        {"checkpoint_hash", e.checkpoint_hash},
                        {"latent_dim", e.latents.z_layout.numel()}};
    const auto text = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(kMagic, sizeof kMagic);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    put_floats(out, e.latents.z_layout);
    put_floats(out, e.latents.z_style);
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

AvatarEmbedding load_avatar(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    char magic[8] = {};
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw std::runtime_error(path.string() + " is not an avatar file");
    const auto len = get_u32(in);
    std::string text(len, '\0');
    in.read(text.data(), len);
    const auto manifest = json::parse(text);
    AvatarEmbedding e;
    e.identity_id = manifest.at("identity_id").get<int>();
    e.k = manifest.at("k").get<int>();
    e.checkpoint_hash = manifest.at("checkpoint_hash").get<std::string>();
    const auto d = manifest.at("latent_dim").get<int64_t>();
    e.latents.z_layout = get_floats(in, d);
    e.latents.z_style = get_floats(in, d);
    if (!in) throw std::runtime_error(path.string() + " is truncated");
    return e;
}

LandmarkSet match_shape(const LandmarkSet& driver, const LandmarkSet& reference) {
    auto stats = [](const LandmarkSet& l) {
        double cx = 0, cy = 0;
        for (const auto& p : l.points) cx += p.x, cy += p.y;
        cx /= kNumLandmarks;
        cy /= kNumLandmarks;
        double r = 0;
        for (const auto& p : l.points) r += (p.x - cx) * (p.x - cx) + (p.y - cy) * (p.y - cy);
        return std::array<double, 3>{cx, cy, std::sqrt(r / kNumLandmarks)};
    };
    const auto d = stats(driver), ref = stats(reference);
    const double s = d[2] > 0 ? ref[2] / d[2] : 1.0;
    LandmarkSet out;
    for (int i = 0; i < kNumLandmarks; ++i) {
        out.points[i].x = static_cast<float>(ref[0] + (driver.points[i].x - d[0]) * s);
        out.points[i].y = static_cast<float>(ref[1] + (driver.points[i].y - d[1]) * s);
    }
    return out;
}

Reenactment reenact(const trainer::Session& session, const ReenactmentRequest& request, const ReenactOptions& opts) {
    if (request.driving.empty()) throw std::invalid_argument("reenactment needs at least one driving frame");
    if (request.embedding.checkpoint_hash != session.config.architecture_hash()) {
        throw ConfigError("avatar embedding was made with architecture " + request.embedding.checkpoint_hash +
                          ", checkpoint has " + session.config.architecture_hash());
    }
    const bool oracle = session.nets.cfg.variant == nets::Variant::kUpperBound;
    if (oracle && request.driving_segmentation.size() != request.driving.size()) {
        throw std::invalid_argument("upper_bound reenactment needs one segmentation per driving frame");
    }
    const int res = session.nets.cfg.net.resolution;
    auto n = eval_nets(session);
    torch::NoGradGuard ng;
    Reenactment out;
    for (size_t i = 0; i < request.driving.size(); ++i) {
        const auto lmk = opts.normalize_to ? match_shape(request.driving[i], *opts.normalize_to) : request.driving[i];
        const auto contour = image_to_tensor(dataio::rasterize_landmarks(lmk, res, res), 0.0f, 1.0f).unsqueeze(0);
        const auto seg = oracle ? request.driving_segmentation[i].unsqueeze(0) : torch::Tensor();
        const auto g = n.generate(request.embedding.latents, contour, seg, {.zero_spatial = opts.zero_spatial});
        out.images.push_back(g.image[0]);
        if (g.layout.probs.defined()) out.layouts.push_back(g.layout.probs[0]);
    }
    return out;
}

const std::vector<std::array<float, 3>>& layout_palette() {
    static const std::vector<std::array<float, 3>> palette{
        {0.10f, 0.10f, 0.10f}, {0.55f, 0.30f, 0.10f}, {0.95f, 0.75f, 0.60f}, {0.20f, 0.45f, 0.95f},
        {0.95f, 0.85f, 0.20f}, {0.85f, 0.15f, 0.20f}, {0.25f, 0.70f, 0.30f}, {0.60f, 0.30f, 0.80f},
        {0.10f, 0.80f, 0.80f}, {0.95f, 0.50f, 0.10f}, {0.50f, 0.50f, 0.50f}, {0.95f, 0.40f, 0.70f},
        {0.40f, 0.60f, 0.10f}, {0.10f, 0.30f, 0.50f}, {0.70f, 0.70f, 0.95f}, {1.00f, 1.00f, 1.00f},
    };
    return palette;
}

Image colorize_layout(const torch::Tensor& probs) {
    if (probs.dim() != 3) throw std::invalid_argument("layout must be (C, H, W)");
    const auto arg = probs.argmax(0).to(torch::kLong).contiguous();
    const auto h = static_cast<int>(arg.size(0)), w = static_cast<int>(arg.size(1));
    const auto& pal = layout_palette();
    Image img(h, w, 3);
    const auto* a = arg.data_ptr<int64_t>();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto& c = pal[static_cast<size_t>(a[y * w + x]) % pal.size()];
            for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[ch];
        }
    }
    return img;
}

void write_reenactment(const Reenactment& r, const fs::path& out_dir, bool with_layouts) {
    fs::create_directories(out_dir);
    char name[32];
    for (size_t i = 0; i < r.images.size(); ++i) {
        std::snprintf(name, sizeof name, "%04zu.png", i);
        write_png(tensor_to_image(r.images[i]), out_dir / name);
    }
    if (!with_layouts) return;
    for (size_t i = 0; i < r.layouts.size(); ++i) {
        std::snprintf(name, sizeof name, "layout_%04zu.png", i);
        write_png(colorize_layout(r.layouts[i]), out_dir / name);
    }
}

OccluderProbe occluder_probe(const trainer::Session& session, const std::vector<dataio::LoadedFrame>& shots,
                             std::size_t index, std::uint64_t seed) {
    if (index >= shots.size()) throw std::invalid_argument("occluded shot index out of range");
    torch::Tensor mask;
    auto occluded = shots;
    occluded[index] = occlude(shots[index], seed, mask);
    const auto& truth = shots[index];

    ReenactmentRequest req;
    req.driving = {truth.landmarks};
    if (truth.segmentation.defined()) req.driving_segmentation = {truth.segmentation};
    auto masked_l1 = [&](const AvatarEmbedding& e) {
        req.embedding = e;
        const auto img = reenact(session, req).images[0];
        // [-1, 1] difference halved to [0, 1] intensity units.
        const auto diff = (img - truth.image).abs().mean(0) * 0.5;
        return ((diff * mask).sum() / mask.sum().clamp_min(1.0)).item<double>();
    };
    OccluderProbe p;
    const auto multi = embed(session, occluded);
    const auto clean = embed(session, shots);
    p.multi_shot_l1 = masked_l1(multi);
    p.single_shot_l1 = masked_l1(embed(session, {occluded[index]}));
    p.clean_distance = torch::cat({multi.latents.z_layout - clean.latents.z_layout,
                                   multi.latents.z_style - clean.latents.z_style}, 1)
                           .norm()
                           .item<double>();
    p.mask_fraction = mask.mean().item<double>();
    return p;
}

Image compose_grid(const std::vector<GridRow>& rows) {
    if (rows.empty()) throw std::invalid_argument("grid needs at least one row");
    const auto n = rows.front().frames.size();
    if (n == 0) throw std::invalid_argument("grid row '" + rows.front().label + "' is empty");
    const int h = rows.front().frames.front().height, w = rows.front().frames.front().width;
    for (const auto& r : rows) {
        if (r.frames.size() != n) {
            throw std::invalid_argument("grid row '" + r.label + "' has " + std::to_string(r.frames.size()) +
                                        " frames, expected " + std::to_string(n));
        }
        for (const auto& f : r.frames) {
            if (f.height != h || f.width != w || f.channels != 3) {
                throw std::invalid_argument("grid row '" + r.label + "' has a frame of a different size");
            }
        }
    }
    const int g = kGridGutter, band = kGridLabelHeight;
    const int width = static_cast<int>(n) * w + (static_cast<int>(n) + 1) * g;
    const int height = static_cast<int>(rows.size()) * (band + h + g) + g;
    cv::Mat canvas(height, width, CV_32FC3, cv::Scalar(0.15, 0.15, 0.15));
    for (size_t r = 0; r < rows.size(); ++r) {
        const int top = g + static_cast<int>(r) * (band + h + g);
        cv::putText(canvas, rows[r].label, cv::Point(g, top + band - 3), cv::FONT_HERSHEY_PLAIN, 0.8,
                    cv::Scalar(1.0, 1.0, 1.0), 1, cv::LINE_8);
        for (size_t i = 0; i < n; ++i) {
            const auto& f = rows[r].frames[i];
            const int left = g + static_cast<int>(i) * (w + g);
            for (int y = 0; y < h; ++y) {
                auto* row = canvas.ptr<cv::Vec3f>(top + band + y);
                for (int x = 0; x < w; ++x) row[left + x] = cv::Vec3f(f.at(y, x, 0), f.at(y, x, 1), f.at(y, x, 2));
            }
        }
    }
    Image out(height, width, 3);
    for (int y = 0; y < height; ++y) {
        const auto* row = canvas.ptr<cv::Vec3f>(y);
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = row[x][c];
    }
    return out;
}

void emit_grid(const std::vector<GridRow>& rows, const fs::path& out_path) {
    const auto img = compose_grid(rows);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    write_png(img, out_path);
}

}  // namespace lsr::inference
