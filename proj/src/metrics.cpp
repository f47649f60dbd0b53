// SPDX-License-Identifier: Apache-2.0

#include "lsr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <Eigen/Dense>

#include "lsr/image.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lsr::metrics {

namespace {

void same_shape(const torch::Tensor& x, const torch::Tensor& y, const char* what) {
    if (x.sizes() != y.sizes()) {
        std::ostringstream msg;
        msg << what << ": shape mismatch " << x.sizes() << " vs " << y.sizes();
        throw std::invalid_argument(msg.str());
    }
}

torch::Tensor gaussian_window(int size, double sigma) {
    auto g = torch::arange(size, torch::kDouble) - (size - 1) / 2.0;
    g = torch::exp(-g * g / (2 * sigma * sigma));
    g = g / g.sum();
    return torch::outer(g, g);
}

torch::Tensor batched(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

double mean_of(const std::vector<SampleScores>& s, double SampleScores::*field) {
    double sum = 0;
    for (const auto& x : s) sum += x.*field;
    return s.empty() ? 0.0 : sum / static_cast<double>(s.size());
}

Aggregate aggregate(const std::vector<SampleScores>& s) {
    Aggregate a;
    a.count = s.size();
    a.psnr = mean_of(s, &SampleScores::psnr);
    a.ssim = mean_of(s, &SampleScores::ssim);
    a.lpips = mean_of(s, &SampleScores::lpips);
    a.id_sim = mean_of(s, &SampleScores::id_sim);
    a.nmke = mean_of(s, &SampleScores::nmke);
    return a;
}

json number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

std::string csv_number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

json aggregate_json(const Aggregate& a) {
    return {{"count", a.count},          {"psnr", number(a.psnr)}, {"ssim", a.ssim}, {"lpips", a.lpips},
            {"id_sim", a.id_sim},        {"nmke", a.nmke}};
}

Eigen::MatrixXd to_matrix(const torch::Tensor& t) {
    const auto c = t.to(torch::kDouble).contiguous();
    Eigen::MatrixXd m(c.size(0), c.size(1));
    const double* p = c.data_ptr<double>();
    for (int64_t i = 0; i < c.size(0); ++i)
        for (int64_t j = 0; j < c.size(1); ++j) m(i, j) = p[i * c.size(1) + j];
    return m;
}

std::vector<std::string> png_names(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file() || e.path().extension() != ".png") continue;
        const auto stem = e.path().stem().string();
        if (!stem.ends_with(".seg")) names.push_back(stem);  // dataset segmentation maps are not samples
    }
    std::sort(names.begin(), names.end());
    return names;
}

}  // namespace

double psnr(const torch::Tensor& x, const torch::Tensor& y, double max_val) {
    same_shape(x, y, "psnr");
    const double mse = (x.to(torch::kDouble) - y.to(torch::kDouble)).pow(2).mean().item<double>();
    if (mse == 0.0) return kInfinitePsnr;
    return 10.0 * std::log10(max_val * max_val / mse);
}

double ssim(const torch::Tensor& x, const torch::Tensor& y, double max_val) {
    same_shape(x, y, "ssim");
    auto a = x.to(torch::kDouble), b = y.to(torch::kDouble);
    if (a.dim() == 2) a = a.unsqueeze(0), b = b.unsqueeze(0);
    if (a.dim() != 3 || a.size(1) < 11 || a.size(2) < 11) throw std::invalid_argument("ssim needs (C, H, W) with H, W >= 11");
    const auto c = a.size(0);
    const auto w = gaussian_window(11, 1.5).expand({c, 1, 11, 11}).contiguous();
    namespace F = torch::nn::functional;
    auto filt = [&](const torch::Tensor& t) { return F::conv2d(t.unsqueeze(0), w, F::Conv2dFuncOptions().groups(c))[0]; };
    const double c1 = std::pow(0.01 * max_val, 2), c2 = std::pow(0.03 * max_val, 2);
    const auto mu_a = filt(a), mu_b = filt(b);
    const auto saa = filt(a * a) - mu_a * mu_a;
    const auto sbb = filt(b * b) - mu_b * mu_b;
    const auto sab = filt(a * b) - mu_a * mu_b;
    const auto index = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2));
    return index.mean().item<double>();
}

double lpips_like(losses::PerceptualBackbone& backbone, const torch::Tensor& x, const torch::Tensor& y) {
    same_shape(x, y, "lpips_like");
    torch::NoGradGuard ng;
    const auto fx = backbone.features(batched(x)), fy = backbone.features(batched(y));
    torch::Tensor total;
    for (size_t l = 0; l < fx.size(); ++l) {
        auto nx = fx[l] / (fx[l].pow(2).sum(1, true).sqrt() + 1e-10);
        auto ny = fy[l] / (fy[l].pow(2).sum(1, true).sqrt() + 1e-10);
        const auto d = (nx - ny).pow(2).sum(1).mean({1, 2});
        total = total.defined() ? total + d : d;
    }
    return total.to(torch::kDouble).mean().item<double>();
}

double cosine(const torch::Tensor& a, const torch::Tensor& b) {
    const auto u = a.flatten().to(torch::kDouble), v = b.flatten().to(torch::kDouble);
    same_shape(u, v, "cosine");
    const double nu = u.norm().item<double>(), nv = v.norm().item<double>();
    if (nu == 0.0 || nv == 0.0) throw std::domain_error("cosine similarity of a zero-norm embedding");
    return std::clamp((u * v).sum().item<double>() / (nu * nv), -1.0, 1.0);
}

double mean_iou(const torch::Tensor& pred, const torch::Tensor& truth, std::int64_t num_classes) {
    same_shape(pred, truth, "mean_iou");
    const auto p = pred.flatten().to(torch::kLong), t = truth.flatten().to(torch::kLong);
    double total = 0;
    int present = 0;
    for (std::int64_t c = 0; c < num_classes; ++c) {
        const auto pc = p == c, tc = t == c;
        const auto uni = (pc | tc).sum().item<std::int64_t>();
        if (uni == 0) continue;
        total += static_cast<double>((pc & tc).sum().item<std::int64_t>()) / static_cast<double>(uni);
        ++present;
    }
    if (present == 0) throw std::invalid_argument("mean_iou: no class in range");
    return total / present;
}

double id_sim(losses::IdentityBackbone& embedder, const torch::Tensor& x, const torch::Tensor& y) {
    same_shape(x, y, "id_sim");
    torch::NoGradGuard ng;
    return cosine(embedder.embed(batched(x)), embedder.embed(batched(y)));
}

double nmke(const LandmarkSet& pred, const LandmarkSet& gt, NmkeNorm norm) {
    double sum = 0;
    for (int i = 0; i < kNumLandmarks; ++i) {
        sum += std::hypot(static_cast<double>(pred.points[i].x) - gt.points[i].x,
                          static_cast<double>(pred.points[i].y) - gt.points[i].y);
    }
    double scale = 1.0;
    if (norm == NmkeNorm::kInterocular) {
        scale = std::hypot(static_cast<double>(gt.points[36].x) - gt.points[45].x,
                           static_cast<double>(gt.points[36].y) - gt.points[45].y);
        if (scale == 0.0) throw std::domain_error("inter-ocular distance is zero");
    }
    return sum / kNumLandmarks / scale;
}

double fid(const torch::Tensor& real, const torch::Tensor& fake, double eps) {
    if (real.dim() != 2 || fake.dim() != 2 || real.size(1) != fake.size(1)) {
        throw std::invalid_argument("fid needs (N, d) and (M, d) feature sets");
    }
    if (real.size(0) < 2 || fake.size(0) < 2) throw std::invalid_argument("fid needs at least two samples per set");
    if (!torch::isfinite(real).all().item<bool>() || !torch::isfinite(fake).all().item<bool>()) {
        throw std::invalid_argument("fid features contain non-finite values");
    }
    auto fit = [eps](const Eigen::MatrixXd& f) {
        const Eigen::RowVectorXd mu = f.colwise().mean();
        const Eigen::MatrixXd centered = f.rowwise() - mu;
        Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(f.rows() - 1);
        cov.diagonal().array() += eps;
        return std::make_pair(Eigen::VectorXd(mu.transpose()), cov);
    };
    const auto [mu1, s1] = fit(to_matrix(real));
    const auto [mu2, s2] = fit(to_matrix(fake));
    // tr sqrt(S1 S2) = tr sqrt(A S2 A) with A = S1^(1/2), a symmetric PSD product.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e1(s1);
    const Eigen::MatrixXd a =
        e1.eigenvectors() * e1.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * e1.eigenvectors().transpose();
    Eigen::MatrixXd m = a * s2 * a;
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
    const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double d = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    return std::max(d, 0.0);
}

torch::Tensor fid_features(losses::PerceptualBackbone& backbone, const torch::Tensor& images) {
    torch::NoGradGuard ng;
    std::vector<torch::Tensor> pooled;
    for (const auto& f : backbone.features(batched(images))) pooled.push_back(f.mean({2, 3}));
    return torch::cat(pooled, 1);
}

std::string bucket_name(PoseBucket b) {
    switch (b) {
        case PoseBucket::kLow: return "low";
        case PoseBucket::kMedium: return "medium";
        case PoseBucket::kHigh: return "high";
    }
    return "unknown";
}

MetricReport evaluate(std::vector<EvalSample> samples, losses::IdentityBackbone& embedder,
                      losses::PerceptualBackbone& backbone, const EvalOptions& opts) {
    if (samples.empty()) throw std::invalid_argument("nothing to evaluate");
    std::sort(samples.begin(), samples.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    MetricReport report;
    std::vector<torch::Tensor> outs, truths;
    for (const auto& s : samples) {
        SampleScores r;
        r.name = s.name;
        const auto x = ((s.output + 1) * 0.5).clamp(0, 1), y = ((s.truth + 1) * 0.5).clamp(0, 1);
        r.psnr = psnr(x, y);
        r.ssim = ssim(x, y);
        r.lpips = lpips_like(backbone, s.output, s.truth);
        r.id_sim = id_sim(embedder, s.output, s.truth);
        r.nmke = nmke(s.output_landmarks, s.truth_landmarks, opts.norm);
        r.pose_nmke = s.source_landmarks ? nmke(*s.source_landmarks, s.truth_landmarks, opts.norm) : 0.0;
        report.samples.push_back(r);
        outs.push_back(s.output);
        truths.push_back(s.truth);
    }
    // Rank split into thirds: bucket sizes differ by at most one.
    std::vector<size_t> order(report.samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return report.samples[a].pose_nmke < report.samples[b].pose_nmke; });
    const auto n = order.size();
    for (size_t rank = 0; rank < n; ++rank) report.samples[order[rank]].bucket = static_cast<PoseBucket>(rank * 3 / n);

    report.mean = aggregate(report.samples);
    for (auto b : {PoseBucket::kLow, PoseBucket::kMedium, PoseBucket::kHigh}) {
        std::vector<SampleScores> in;
        for (const auto& s : report.samples)
            if (s.bucket == b) in.push_back(s);
        report.buckets[bucket_name(b)] = aggregate(in);
    }
    report.fid = n >= 2 ? fid(fid_features(backbone, torch::stack(truths)), fid_features(backbone, torch::stack(outs)))
                        : 0.0;
    return report;
}

json MetricReport::to_json() const {
    json samples_json = json::array();
    for (const auto& s : samples) {
        samples_json.push_back({{"name", s.name},
                                {"psnr", number(s.psnr)},
                                {"ssim", s.ssim},
                                {"lpips", s.lpips},
                                {"id_sim", s.id_sim},
                                {"nmke", s.nmke},
                                {"pose_nmke", s.pose_nmke},
                                {"bucket", bucket_name(s.bucket)}});
    }
    json buckets_json = json::object();
    for (const auto& [name, a] : buckets) buckets_json[name] = aggregate_json(a);
    auto mean_json = aggregate_json(mean);
    mean_json["fid"] = fid;
    return {{"samples", samples_json}, {"mean", mean_json}, {"buckets", buckets_json}};
}

std::string MetricReport::to_csv() const {
    std::ostringstream out;
    out << "name,psnr,ssim,lpips,id_sim,nmke,pose_nmke,bucket\n";
    for (const auto& s : samples) {
        out << s.name << "," << csv_number(s.psnr) << "," << csv_number(s.ssim) << "," << csv_number(s.lpips) << ","
            << csv_number(s.id_sim) << "," << csv_number(s.nmke) << "," << csv_number(s.pose_nmke) << ","
            << bucket_name(s.bucket) << "\n";
    }
    out << "mean," << csv_number(mean.psnr) << "," << csv_number(mean.ssim) << "," << csv_number(mean.lpips) << ","
        << csv_number(mean.id_sim) << "," << csv_number(mean.nmke) << ",,\n";
    return out.str();
}

void MetricReport::write(const fs::path& dir) const {
    fs::create_directories(dir);
    std::ofstream(dir / "report.json") << to_json().dump(2) << "\n";
    std::ofstream(dir / "report.csv") << to_csv();
}

LandmarkSet sidecar_landmarks(const fs::path& image) {
    auto p = image;
    p.replace_extension(".lmk.json");
    return read_landmarks(p);
}

MetricReport evaluate_directory(const fs::path& outputs, const fs::path& ground_truths, const LandmarkFn& landmark_fn,
                                losses::IdentityBackbone& embedder, losses::PerceptualBackbone& backbone,
                                const EvalOptions& opts) {
    const auto out_names = png_names(outputs), gt_names = png_names(ground_truths);
    std::vector<std::string> only_out, only_gt;
    std::set_difference(out_names.begin(), out_names.end(), gt_names.begin(), gt_names.end(), std::back_inserter(only_out));
    std::set_difference(gt_names.begin(), gt_names.end(), out_names.begin(), out_names.end(), std::back_inserter(only_gt));
    if (!only_out.empty() || !only_gt.empty()) {
        std::string msg = "unmatched files:";
        for (const auto& n : only_out) msg += " " + (outputs / (n + ".png")).string();
        for (const auto& n : only_gt) msg += " " + (ground_truths / (n + ".png")).string();
        throw std::runtime_error(msg);
    }
    std::vector<EvalSample> samples;
    for (const auto& name : gt_names) {
        EvalSample s;
        s.name = name;
        const auto out_png = outputs / (name + ".png"), gt_png = ground_truths / (name + ".png");
        s.output = image_to_tensor(read_png(out_png));
        s.truth = image_to_tensor(read_png(gt_png));
        s.truth_landmarks = sidecar_landmarks(gt_png);
        if (landmark_fn) {
            s.output_landmarks = landmark_fn(out_png);
        } else if (fs::exists(outputs / (name + ".lmk.json"))) {
            s.output_landmarks = sidecar_landmarks(out_png);
        } else {
            s.output_landmarks = s.truth_landmarks;
        }
        const auto src = ground_truths / (name + ".src.lmk.json");
        if (fs::exists(src)) s.source_landmarks = read_landmarks(src);
        samples.push_back(std::move(s));
    }
    return evaluate(std::move(samples), embedder, backbone, opts);
}

std::string table_header() {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-16s %8s %8s %8s %8s %8s %8s", "", "PSNR", "SSIM", "LPIPS", "ID-SIM", "NMKE", "FID");
    return buf;
}

std::string table_row(const std::string& label, const Aggregate& a, double fid) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-16s %8.3f %8.3f %8.3f %8.3f %8.4f %8.3f", label.c_str(), a.psnr, a.ssim, a.lpips,
                  a.id_sim, a.nmke, fid);
    return buf;
}

}  // namespace lsr::metrics
