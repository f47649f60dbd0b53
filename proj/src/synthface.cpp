// SPDX-License-Identifier: Apache-2.0

#include "lsr/synthface.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace lsr::synthface {

namespace {

constexpr int kSuper = 4;  // subsamples per pixel side

double uniform(std::mt19937_64& rng, double lo, double hi) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

Color lerp(const Color& a, const Color& b, double t) {
    Color c{};
    for (int i = 0; i < 3; ++i) c[i] = static_cast<float>(a[i] + (b[i] - a[i]) * t);
    return c;
}

Color scale(const Color& a, double s) {
    Color c{};
    for (int i = 0; i < 3; ++i) c[i] = static_cast<float>(std::clamp(a[i] * s, 0.0, 1.0));
    return c;
}

Color jitter(std::mt19937_64& rng, Color c, double amount) {
    for (auto& v : c) v = static_cast<float>(std::clamp(v + uniform(rng, -amount, amount), 0.0, 1.0));
    return c;
}

struct Vec2 {
    double x, y;
};

// Rotates a point on (or slightly in front of) the unit head ellipsoid and
// projects it orthographically into normalized image coordinates.
struct Projector {
    double cx, cy, a, b, cos_yaw, sin_yaw, cos_pitch, sin_pitch;

    Projector(const IdentitySpec& id, const PoseSpec& pose)
        : cx(0.5 + pose.dx),
          cy(0.46 + pose.dy),
          a(id.head_a),
          b(id.head_b),
          cos_yaw(std::cos(pose.yaw)),
          sin_yaw(std::sin(pose.yaw)),
          cos_pitch(std::cos(pose.pitch)),
          sin_pitch(std::sin(pose.pitch)) {}

    static double depth(double u, double v) { return std::sqrt(std::max(0.0, 1.0 - u * u - v * v)); }

    Vec2 operator()(double u, double v, double w) const {
        const double ur = u * cos_yaw + w * sin_yaw;
        const double wr = -u * sin_yaw + w * cos_yaw;
        const double vr = v * cos_pitch + wr * sin_pitch;
        return {cx + a * ur, cy + b * vr};
    }
    Vec2 surface(double u, double v, double lift = 0.0) const { return (*this)(u, v, depth(u, v) + lift); }
};

std::vector<Vec2> convex_hull(std::vector<Vec2> pts) {
    std::sort(pts.begin(), pts.end(), [](const Vec2& p, const Vec2& q) { return p.x < q.x || (p.x == q.x && p.y < q.y); });
    if (pts.size() < 3) return pts;
    auto cross = [](const Vec2& o, const Vec2& p, const Vec2& q) {
        return (p.x - o.x) * (q.y - o.y) - (p.y - o.y) * (q.x - o.x);
    };
    std::vector<Vec2> hull(2 * pts.size());
    size_t k = 0;
    for (const auto& p : pts) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
        hull[k++] = p;
    }
    for (size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
        while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

bool inside_convex(const std::vector<Vec2>& hull, double x, double y) {
    if (hull.size() < 3) return false;
    for (size_t i = 0; i < hull.size(); ++i) {
        const Vec2& p = hull[i];
        const Vec2& q = hull[(i + 1) % hull.size()];
        if ((q.x - p.x) * (y - p.y) - (q.y - p.y) * (x - p.x) < 0) return false;
    }
    return true;
}

double segment_distance(const Vec2& p, const Vec2& q, double x, double y) {
    const double dx = q.x - p.x, dy = q.y - p.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((x - p.x) * dx + (y - p.y) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double ex = p.x + t * dx - x, ey = p.y + t * dy - y;
    return std::sqrt(ex * ex + ey * ey);
}

struct Layer {
    std::function<bool(double, double)> contains;
    Color color;
    std::uint8_t label;
    bool fine;  // small parts claim a pixel on any coverage
};

// Head-local feature coordinates (u right, v down) before projection.
struct FaceModel {
    std::array<Vec2, kNumLandmarks> uv{};
    std::array<double, kNumLandmarks> lift{};
};

FaceModel face_model(const IdentitySpec& id, const PoseSpec& pose) {
    FaceModel m;
    const double pi = std::acos(-1.0);
    for (int i = 0; i <= 16; ++i) {
        const double t = -0.2 + i * (pi + 0.4) / 16.0;
        m.uv[i] = {-0.95 * std::cos(t), 0.95 * std::sin(t)};
    }
    for (int i = 0; i < 5; ++i) {
        const double s = i / 4.0;
        const double u = 0.72 - 0.52 * s;
        const double v = -0.36 - 0.07 * std::sin(pi * (0.25 + 0.75 * s));
        m.uv[17 + i] = {-u, v};
        m.uv[26 - i] = {u, v};
    }
    const double tip_v = -0.25 + 0.38 * id.nose_length;
    for (int i = 0; i < 4; ++i) {
        m.uv[27 + i] = {0.0, -0.25 + (tip_v + 0.25) * i / 3.0};
        m.lift[27 + i] = 0.12 * id.nose_length * i / 3.0;
    }
    const double base_v = tip_v + 0.06;
    const double base_u[5] = {-0.17, -0.08, 0.0, 0.08, 0.17};
    const double base_dv[5] = {0.0, 0.02, 0.03, 0.02, 0.0};
    for (int i = 0; i < 5; ++i) {
        m.uv[31 + i] = {base_u[i], base_v + base_dv[i]};
        m.lift[31 + i] = 0.04 * id.nose_length;
    }

    const double eye_v = -0.12;
    const double ew = 0.13;
    const double eh = 0.08 * (0.3 + 0.7 * std::clamp(pose.eyes_open, 0.0, 1.0));
    // Right eye (image left): outer corner, upper x2, inner corner, lower x2.
    const double c = -id.eye_spacing;
    const Vec2 right_eye[6] = {{c - ew, eye_v},          {c - ew / 3, eye_v - eh}, {c + ew / 3, eye_v - eh},
                               {c + ew, eye_v},          {c + ew / 3, eye_v + eh}, {c - ew / 3, eye_v + eh}};
    for (int i = 0; i < 6; ++i) m.uv[36 + i] = right_eye[i];
    for (int i = 36; i <= 41; ++i) m.uv[mirror_partner(i)] = {-m.uv[i].x, m.uv[i].y};

    const double mouth_v = 0.55;
    const double mw = id.mouth_width;
    const double open = std::clamp(pose.mouth_open, 0.0, 1.0);
    const double upper = 0.07, lower = 0.06 + 0.18 * open;
    // Outer lips 48 (right corner) .. 54 (left corner) along the top, 55..59 back along the bottom.
    for (int i = 0; i <= 6; ++i) {
        const double s = i / 6.0;
        const double u = -mw + 2 * mw * s;
        const double bow = (i == 2 || i == 4) ? 1.0 : (i == 3 ? 0.8 : (i == 0 || i == 6 ? 0.0 : 0.6));
        m.uv[48 + i] = {u, mouth_v - upper * bow};
    }
    for (int i = 1; i <= 5; ++i) {
        const double s = i / 6.0;
        const double u = mw - 2 * mw * s;
        const double sag = std::sin(pi * s);
        m.uv[54 + i] = {u, mouth_v + lower * sag};
    }
    const double imw = 0.8 * mw;
    const double inner_lower = 0.01 + 0.16 * open;
    for (int i = 0; i <= 4; ++i) {
        const double s = i / 4.0;
        const double u = -imw + 2 * imw * s;
        const double sag = std::sin(pi * s);
        m.uv[60 + i] = {u, mouth_v - 0.01 * sag};
    }
    for (int i = 1; i <= 3; ++i) {
        const double s = i / 4.0;
        const double u = imw - 2 * imw * s;
        m.uv[64 + i] = {u, mouth_v + inner_lower * std::sin(pi * s)};
    }
    return m;
}

std::vector<Vec2> project_all(const FaceModel& m, const Projector& proj) {
    std::vector<Vec2> out(kNumLandmarks);
    for (int i = 0; i < kNumLandmarks; ++i) out[i] = proj.surface(m.uv[i].x, m.uv[i].y, m.lift[i]);
    return out;
}

std::vector<Vec2> pick(const std::vector<Vec2>& pts, int first, int last) {
    return {pts.begin() + first, pts.begin() + last + 1};
}

std::vector<Layer> build_layers(const IdentitySpec& id, const PoseSpec& pose) {
    const Projector proj(id, pose);
    const FaceModel model = face_model(id, pose);
    const auto pts = project_all(model, proj);
    const double cx = proj.cx, cy = proj.cy, a = id.head_a, b = id.head_b, he = id.hair_extent;

    auto ellipse = [](double ex, double ey, double rx, double ry) {
        return [=](double x, double y) {
            const double u = (x - ex) / rx, v = (y - ey) / ry;
            return u * u + v * v <= 1.0;
        };
    };
    auto rect = [](double x0, double y0, double x1, double y1) {
        return [=](double x, double y) { return x >= x0 && x <= x1 && y >= y0 && y <= y1; };
    };

    std::vector<Layer> layers;
    if (he > 0.5) {
        const double hw = a * (1.0 + 0.3 * he);
        layers.push_back({rect(cx - hw, cy - 0.1 * b, cx + hw, cy + b * (0.3 + 1.4 * (he - 0.5))), id.hair, kHair, false});
    }
    layers.push_back({ellipse(cx, cy - 0.12 * b, a * (1.06 + 0.3 * he), b * (1.02 + 0.22 * he)), id.hair, kHair, false});
    layers.push_back({rect(cx - 0.42 * a, cy + 0.5 * b, cx + 0.42 * a, cy + b + 0.12), scale(id.skin, 0.88), kSkin, false});
    layers.push_back({ellipse(cx, cy + b + 0.30, 0.40, 0.24), id.clothes, kClothes, false});
    const auto head = ellipse(cx, cy, a, b);
    layers.push_back({head, id.skin, kSkin, false});

    const double hairline_v = -0.95 + 0.3 * he;
    const double hairline_y = cy + b * (hairline_v * proj.cos_pitch + 0.75 * proj.sin_pitch);
    layers.push_back({[=](double x, double y) {
                          const double s = (x - cx) / a;
                          return head(x, y) && y < hairline_y + 0.2 * b * s * s;
                      },
                      id.hair, kHair, false});

    const auto nose = convex_hull(pick(pts, 27, 35));
    layers.push_back({[nose](double x, double y) { return inside_convex(nose, x, y); }, scale(id.skin, 0.82), kNose, true});

    for (int first : {36, 42}) {
        const auto eye = convex_hull(pick(pts, first, first + 5));
        layers.push_back({[eye](double x, double y) { return inside_convex(eye, x, y); }, Color{0.95f, 0.95f, 0.95f},
                          kEyes, true});
        const double eu = (model.uv[first].x + model.uv[first + 3].x) / 2;
        const Vec2 centre = proj.surface(eu, model.uv[first].y);
        const double eh = (model.uv[first + 5].y - model.uv[first + 1].y) / 2;
        const double rx = 0.045 * a, ry = std::min(eh * b, rx);
        const auto iris = ellipse(centre.x, centre.y, rx, ry);
        layers.push_back({[eye, iris](double x, double y) { return iris(x, y) && inside_convex(eye, x, y); },
                          Color{0.18f, 0.11f, 0.06f}, kEyes, true});
    }

    const auto lips = convex_hull(pick(pts, 48, 59));
    Color lip_color = scale(id.skin, 0.62);
    lip_color[0] = std::min(1.0f, lip_color[0] + 0.2f);
    layers.push_back({[lips](double x, double y) { return inside_convex(lips, x, y); }, lip_color, kMouth, true});
    if (pose.mouth_open > 0.05) {
        const auto inner = convex_hull(pick(pts, 60, 67));
        layers.push_back({[inner](double x, double y) { return inside_convex(inner, x, y); }, Color{0.22f, 0.05f, 0.06f},
                          kMouth, true});
    }

    const double brow_half = 0.028 * b;
    for (int first : {17, 22}) {
        const auto brow = pick(pts, first, first + 4);
        layers.push_back({[brow, brow_half](double x, double y) {
                              for (size_t i = 0; i + 1 < brow.size(); ++i) {
                                  if (segment_distance(brow[i], brow[i + 1], x, y) <= brow_half) return true;
                              }
                              return false;
                          },
                          scale(id.hair, 0.8), kHair, true});
    }
    return layers;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

void fnv1a(std::uint64_t& h, const std::string& bytes) {
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001B3ull;
    }
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("failed to read back " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

nlohmann::json identity_json(const IdentitySpec& id) {
    return {{"identity_id", id.identity_id}, {"head_axes", {id.head_a, id.head_b}},
            {"hair_extent", id.hair_extent}, {"skin_color", id.skin},
            {"hair_color", id.hair},         {"clothes_color", id.clothes},
            {"background_color", id.background}, {"eye_spacing", id.eye_spacing},
            {"nose_length", id.nose_length}, {"mouth_width", id.mouth_width}};
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return splitmix64(splitmix64(a) ^ (b + 0x632BE59BD9B4E019ull)); }

IdentitySpec sample_identity(std::uint64_t seed) { return sample_identity(seed, static_cast<int>(seed & 0x7fffffff)); }

IdentitySpec sample_identity(std::uint64_t seed, int identity_id) {
    std::mt19937_64 rng(mix_seed(seed, 0x1D));
    using R = IdentityRanges;
    IdentitySpec id;
    id.identity_id = identity_id;
    id.head_a = uniform(rng, R::kHeadAMin, R::kHeadAMax);
    id.head_b = uniform(rng, R::kHeadBMin, R::kHeadBMax);
    id.hair_extent = uniform(rng, R::kHairMin, R::kHairMax);
    id.skin = jitter(rng, lerp({0.96f, 0.80f, 0.69f}, {0.42f, 0.28f, 0.20f}, uniform(rng, 0.0, 1.0)), 0.03);
    static const Color kHairBase[5] = {
        {0.08f, 0.06f, 0.05f}, {0.35f, 0.20f, 0.10f}, {0.85f, 0.70f, 0.40f}, {0.60f, 0.22f, 0.08f}, {0.62f, 0.62f, 0.64f}};
    id.hair = jitter(rng, kHairBase[rng() % 5], 0.08);
    id.clothes = {static_cast<float>(uniform(rng, 0, 1)), static_cast<float>(uniform(rng, 0, 1)),
                  static_cast<float>(uniform(rng, 0, 1))};
    id.background = {static_cast<float>(uniform(rng, 0.15, 0.9)), static_cast<float>(uniform(rng, 0.15, 0.9)),
                     static_cast<float>(uniform(rng, 0.15, 0.9))};
    id.eye_spacing = uniform(rng, R::kEyeSpacingMin, R::kEyeSpacingMax);
    id.nose_length = uniform(rng, R::kNoseMin, R::kNoseMax);
    id.mouth_width = uniform(rng, R::kMouthMin, R::kMouthMax);
    return id;
}

PoseSpec sample_pose(std::uint64_t seed) {
    std::mt19937_64 rng(mix_seed(seed, 0x905E));
    PoseSpec p;
    p.yaw = uniform(rng, -0.6, 0.6);
    p.pitch = uniform(rng, -0.3, 0.3);
    p.mouth_open = uniform(rng, 0.0, 1.0);
    p.eyes_open = uniform(rng, 0.0, 1.0);
    p.dx = uniform(rng, -0.05, 0.05);
    p.dy = uniform(rng, -0.05, 0.05);
    return p;
}

bool valid(const IdentitySpec& id) {
    using R = IdentityRanges;
    auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
    auto color_ok = [](const Color& c) {
        return std::all_of(c.begin(), c.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
    };
    return in(id.head_a, R::kHeadAMin, R::kHeadAMax) && in(id.head_b, R::kHeadBMin, R::kHeadBMax) &&
           in(id.hair_extent, R::kHairMin, R::kHairMax) && in(id.eye_spacing, R::kEyeSpacingMin, R::kEyeSpacingMax) &&
           in(id.nose_length, R::kNoseMin, R::kNoseMax) && in(id.mouth_width, R::kMouthMin, R::kMouthMax) &&
           color_ok(id.skin) && color_ok(id.hair) && color_ok(id.clothes) && color_ok(id.background);
}

bool valid(const PoseSpec& p) {
    auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
    return in(p.yaw, -0.6, 0.6) && in(p.pitch, -0.3, 0.3) && in(p.mouth_open, 0, 1) && in(p.eyes_open, 0, 1) &&
           in(p.dx, -0.1, 0.1) && in(p.dy, -0.1, 0.1);
}

LandmarkSet face_landmarks(const IdentitySpec& id, const PoseSpec& pose) {
    const auto pts = project_all(face_model(id, pose), Projector(id, pose));
    LandmarkSet lmk;
    for (int i = 0; i < kNumLandmarks; ++i) {
        lmk.points[i] = {static_cast<float>(pts[i].x), static_cast<float>(pts[i].y)};
    }
    return lmk;
}

RenderedSample render(const IdentitySpec& id, const PoseSpec& pose, int height, int width) {
    if (height < 32 || width < 32) {
        throw std::invalid_argument("render: resolution must be at least 32x32, got " + std::to_string(height) + "x" +
                                    std::to_string(width));
    }
    const auto layers = build_layers(id, pose);
    RenderedSample out;
    out.image = Image(height, width, 3);
    out.segmentation = ClassMap(height, width, kBackground);
    out.identity_id = id.identity_id;
    out.pose = pose;
    out.landmarks = face_landmarks(id, pose);

    std::vector<char> covered(layers.size());
    for (int py = 0; py < height; ++py) {
        for (int px = 0; px < width; ++px) {
            std::array<double, 3> acc{0, 0, 0};
            std::fill(covered.begin(), covered.end(), 0);
            for (int sy = 0; sy < kSuper; ++sy) {
                for (int sx = 0; sx < kSuper; ++sx) {
                    const double x = (px + (sx + 0.5) / kSuper) / width;
                    const double y = (py + (sy + 0.5) / kSuper) / height;
                    const Color* c = &id.background;
                    for (size_t li = layers.size(); li-- > 0;) {
                        if (layers[li].contains(x, y)) {
                            c = &layers[li].color;
                            covered[li] = 1;
                            break;
                        }
                    }
                    for (int k = 0; k < 3; ++k) acc[k] += (*c)[k];
                }
            }
            for (int k = 0; k < 3; ++k) out.image.at(py, px, k) = static_cast<float>(acc[k] / (kSuper * kSuper));

            const double x = (px + 0.5) / width, y = (py + 0.5) / height;
            std::uint8_t label = kBackground;
            for (size_t li = layers.size(); li-- > 0;) {
                const auto& layer = layers[li];
                if (layer.fine ? covered[li] != 0 : layer.contains(x, y)) {
                    label = layer.label;
                    break;
                }
            }
            out.segmentation.at(py, px) = label;
        }
    }
    return out;
}

OccludedSample inject_occluder(const RenderedSample& sample, std::uint64_t seed) {
    std::mt19937_64 rng(mix_seed(seed, 0x0CC1));
    const int h_img = sample.image.height, w_img = sample.image.width;
    const long total = static_cast<long>(h_img) * w_img;
    const double frac = uniform(rng, 0.06, 0.14);
    int h = 0, w = 0;
    if (uniform(rng, 0, 1) < 0.3) {
        w = w_img;
        h = std::clamp(static_cast<int>(std::lround(frac * h_img)), 1, h_img);
    } else {
        const double aspect = uniform(rng, 0.5, 2.0);
        h = std::clamp(static_cast<int>(std::lround(std::sqrt(frac * total / aspect))), 1, h_img);
        w = std::clamp(static_cast<int>(std::lround(frac * total / h)), 1, w_img);
    }
    while (static_cast<long>(w) * h * 20 < total) (w < w_img ? w : h) += 1;
    while (static_cast<long>(w) * h * 100 > total * 15) (h > 1 ? h : w) -= 1;
    const int y0 = static_cast<int>(rng() % static_cast<std::uint64_t>(h_img - h + 1));
    const int x0 = static_cast<int>(rng() % static_cast<std::uint64_t>(w_img - w + 1));
    const Color color{static_cast<float>(uniform(rng, 0, 1)), static_cast<float>(uniform(rng, 0, 1)),
                      static_cast<float>(uniform(rng, 0, 1))};

    OccludedSample out{sample, ClassMap(h_img, w_img, 0)};
    for (int y = y0; y < y0 + h; ++y) {
        for (int x = x0; x < x0 + w; ++x) {
            for (int k = 0; k < 3; ++k) out.sample.image.at(y, x, k) = color[k];
            out.mask.at(y, x) = 1;
        }
    }
    return out;
}

DatasetManifest make_dataset(int num_identities, int frames_per_identity, int resolution,
                             const std::filesystem::path& out_dir, std::uint64_t seed) {
    namespace fs = std::filesystem;
    if (num_identities < 0 || frames_per_identity < 1) {
        throw std::invalid_argument("make_dataset: need frames_per_identity >= 1 and num_identities >= 0");
    }
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

    DatasetManifest manifest;
    manifest.root = out_dir;
    std::uint64_t hash = 0xCBF29CE484222325ull;

    nlohmann::json ids = nlohmann::json::array();
    std::vector<IdentitySpec> specs;
    for (int i = 0; i < num_identities; ++i) {
        specs.push_back(sample_identity(mix_seed(seed, static_cast<std::uint64_t>(i)), i));
        ids.push_back(identity_json(specs.back()));
    }
    const fs::path ids_path = out_dir / "ids.json";
    {
        std::ofstream out(ids_path);
        if (!out) throw std::runtime_error("failed to open for writing: " + ids_path.string());
        out << ids.dump(2) << '\n';
        if (!out) throw std::runtime_error("failed to write: " + ids_path.string());
    }
    fnv1a(hash, slurp(ids_path));

    for (const auto& spec : specs) {
        const fs::path dir = out_dir / std::to_string(spec.identity_id);
        fs::create_directories(dir, ec);
        if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
        for (int f = 0; f < frames_per_identity; ++f) {
            const auto pose = sample_pose(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(spec.identity_id)),
                                                   1000 + static_cast<std::uint64_t>(f)));
            const auto sample = render(spec, pose, resolution, resolution);
            DatasetEntry e{spec.identity_id, f, dir / (std::to_string(f) + ".png"),
                           dir / (std::to_string(f) + ".lmk.json"), dir / (std::to_string(f) + ".seg.png")};
            write_png(sample.image, e.image);
            write_landmarks(sample.landmarks, e.landmarks);
            write_class_png(sample.segmentation, e.segmentation);
            for (const auto* p : {&e.image, &e.landmarks, &e.segmentation}) fnv1a(hash, slurp(*p));
            manifest.entries.push_back(std::move(e));
        }
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
    manifest.checksum = buf;
    return manifest;
}

}  // namespace lsr::synthface
