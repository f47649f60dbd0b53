// SPDX-License-Identifier: Apache-2.0

#include "lsr/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>

#include "lsr/synthface.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lsr::trainer {

namespace {

constexpr const char* kFormat = "lsr-checkpoint-1";

void save_module(const torch::nn::Module& m, const fs::path& path) {
    torch::serialize::OutputArchive ar;
    m.save(ar);
    ar.save_to(path.string());
}

void load_module(torch::nn::Module& m, const fs::path& path) {
    torch::serialize::InputArchive ar;
    ar.load_from(path.string());
    m.load(ar);
}

std::string module_bytes(const torch::nn::Module& m) {
    torch::serialize::OutputArchive ar;
    m.save(ar);
    std::ostringstream out;
    ar.save_to(out);
    return out.str();
}

void module_from_bytes(torch::nn::Module& m, const std::string& bytes) {
    std::istringstream in(bytes);
    torch::serialize::InputArchive ar;
    ar.load_from(in);
    m.load(ar);
}

std::string hex_encode(const torch::Tensor& bytes) {
    static const char* digits = "0123456789abcdef";
    const auto t = bytes.contiguous();
    const auto* p = t.data_ptr<uint8_t>();
    std::string out;
    out.reserve(t.numel() * 2);
    for (int64_t i = 0; i < t.numel(); ++i) {
        out.push_back(digits[p[i] >> 4]);
        out.push_back(digits[p[i] & 15]);
    }
    return out;
}

torch::Tensor hex_decode(const std::string& s) {
    auto t = torch::empty({static_cast<int64_t>(s.size() / 2)}, torch::kUInt8);
    auto* p = t.data_ptr<uint8_t>();
    auto val = [](char c) { return c <= '9' ? c - '0' : c - 'a' + 10; };
    for (size_t i = 0; i + 1 < s.size(); i += 2) p[i / 2] = static_cast<uint8_t>(val(s[i]) << 4 | val(s[i + 1]));
    return t;
}

std::string torch_rng_state() {
    auto gen = at::detail::getDefaultCPUGenerator();
    std::lock_guard<std::mutex> lock(gen.mutex());
    return hex_encode(gen.get_state());
}

void set_torch_rng_state(const std::string& hex) {
    auto gen = at::detail::getDefaultCPUGenerator();
    std::lock_guard<std::mutex> lock(gen.mutex());
    gen.set_state(hex_decode(hex));
}

void set_requires_grad(torch::nn::Module& m, bool on) {
    for (auto& p : m.parameters()) p.requires_grad_(on);
}

std::shared_ptr<torch::nn::Module> find_module(const nets::Networks& n, const std::string& name) {
    for (const auto& [k, m] : n.modules())
        if (k == name) return m;
    return nullptr;
}

void write_json(const json& j, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

void replace_dir(const fs::path& tmp, const fs::path& dir) {
    std::error_code ec;
    fs::remove_all(dir, ec);
    fs::rename(tmp, dir);
}

std::string checkpoint_name(std::int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_%08lld", static_cast<long long>(step));
    return buf;
}

void prune_checkpoints(const fs::path& out_dir, std::int64_t keep) {
    if (keep <= 0) return;
    std::vector<fs::path> ckpts;
    for (const auto& e : fs::directory_iterator(out_dir)) {
        const auto name = e.path().filename().string();
        if (e.is_directory() && name.rfind("ckpt_", 0) == 0) ckpts.push_back(e.path());
    }
    std::sort(ckpts.begin(), ckpts.end());
    for (size_t i = 0; i + keep < ckpts.size(); ++i) fs::remove_all(ckpts[i]);
}

// Keeps only records up to `step` in an existing JSON-lines log.
void truncate_log(const fs::path& path, std::int64_t step) {
    std::ifstream in(path);
    if (!in) return;
    std::vector<std::string> kept;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (json::parse(line).at("step").get<std::int64_t>() <= step) kept.push_back(line);
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : kept) out << l << "\n";
}

std::vector<int> training_pool(const dataio::FrameStore& store) {
    const auto& ids = store.index().train_ids;
    if (ids.empty()) throw std::invalid_argument("dataset " + store.index().root.string() + " has no training identities");
    return ids;
}

void require_segmentation(const dataio::FrameStore& store, const std::vector<int>& ids, const std::string& why) {
    for (int id : ids) {
        for (const auto& rec : store.index().frames.at(id)) {
            if (rec.segmentation.empty()) {
                throw std::runtime_error(why + " needs segmentation, missing for " + rec.image.string());
            }
        }
    }
}

std::uint64_t stage_seed(const Config& cfg, Stage stage) {
    return synthface::mix_seed(static_cast<std::uint64_t>(cfg.get_int("schedule.seed")),
                               0x5747u + static_cast<std::uint64_t>(stage));
}

double scalar(const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; }

// Discriminator step then generator step on one batch. `encode` produces the
// latents (with autograd when the encoder is trained).
StepLog adversarial_step(Session& s, const std::function<nets::LatentPair()>& encode, const torch::Tensor& contour,
                         const torch::Tensor& image, const torch::Tensor& seg, std::int64_t step_index,
                         const std::vector<std::string>& g_nets, bool xent_on) {
    StepLog log;
    const auto& w = s.nets.cfg.weights;
    auto& d = s.nets.discriminator;
    auto score = [&](const torch::Tensor& x) { return d(x); };
    // One generator pass serves both steps: D does not feed into it, and G is
    // unchanged until its own update below.
    const auto z = encode();
    const auto out = s.nets.generate(z, contour, seg);
    if (w.lambda_adv > 0) {
        const auto d_log = losses::discriminator_logistic(d(image), d(out.image.detach()));
        auto total = d_log;
        const auto interval = std::max<std::int64_t>(1, s.config.get_int("losses.r1_interval"));
        if (w.gamma_r1 > 0 && step_index % interval == 0) {
            const auto r1 = losses::r1_penalty(score, image, w.gamma_r1);
            total = total + static_cast<double>(interval) * r1;
            log.r1 = scalar(r1);
        }
        auto& opt = *s.optimizers.at("discriminator");
        opt.zero_grad();
        total.backward();
        opt.step();
        log.d_adv = scalar(d_log);
    }

    set_requires_grad(*d, false);
    const auto scores = w.lambda_adv > 0 ? d(out.image) : torch::Tensor();
    const auto full = losses::full_objective(out.image, image, z, scores, w, *s.generic, s.identity.get());
    auto total = full.total;
    if (xent_on) {
        const auto pt = losses::pretrain_objective(out.layout.logits, seg, out.layout.aux_rgb, image, w.lambda_r, *s.generic);
        total = total + w.w_xent * pt.xent + w.lambda_r * pt.aux;
        log.xent = scalar(pt.xent);
    }
    for (const auto& n : g_nets) s.optimizers.at(n)->zero_grad();
    total.backward();
    for (const auto& n : g_nets) s.optimizers.at(n)->step();
    set_requires_grad(*d, true);

    log.rec_perc = scalar(full.rec.perceptual);
    log.rec_id = scalar(full.rec.identity);
    log.rec_l1 = scalar(full.rec.l1);
    log.g_adv = scalar(full.g_adv);
    log.latent_l2 = scalar(full.latent_l2);
    return log;
}

std::vector<std::string> generator_nets(const nets::VariantConfig& vc, bool with_encoder) {
    std::vector<std::string> out;
    if (with_encoder) out.push_back("encoder");
    if (vc.uses_layout_generator()) out.push_back("layout_gen");
    if (vc.uses_image_generator()) out.push_back("image_gen");
    return out;
}

using StepFn = std::function<StepLog(Session&, const dataio::Batch&, std::int64_t)>;

RunResult run_stage(const Config& cfg, const dataio::FrameStore& store, const RunOptions& opts, Stage stage,
                    const std::vector<std::string>& optimized, const StepFn& step_fn, bool needs_identity) {
    const auto schedule = schedule_from_config(cfg, stage);
    const auto pool = training_pool(store);
    const bool write = !opts.out_dir.empty();
    if (write) fs::create_directories(opts.out_dir);

    std::shared_ptr<Session> session;
    std::optional<fs::path> resume_from;
    if (opts.resume && write) resume_from = latest_checkpoint(opts.out_dir);
    if (resume_from) {
        session = std::make_shared<Session>(Session::load(*resume_from));
        if (session->stage != stage) {
            throw ConfigError("checkpoint " + resume_from->string() + " belongs to stage " + stage_name(session->stage));
        }
        if (session->config.architecture_hash() != cfg.architecture_hash()) {
            throw ConfigError("checkpoint " + resume_from->string() + " was written with a different architecture");
        }
        session->config = cfg;
    } else {
        session = std::make_shared<Session>(cfg);
        session->stage = stage;
        if (opts.init_checkpoint) session->load_networks(*opts.init_checkpoint);
        session->reset_optimizers(optimized, schedule);
    }
    if (needs_identity && !session->identity) {
        session->identity = opts.identity ? opts.identity : train_identity(cfg, store, pool);
    }

    const auto log_path = opts.out_dir / "log.jsonl";
    if (write) {
        if (resume_from) truncate_log(log_path, session->step);
        else std::ofstream(log_path, std::ios::trunc);
    }

    const int batch_size = static_cast<int>(cfg.get_int("schedule.batch_size"));
    const int k = static_cast<int>(cfg.get_int("data.k"));
    const auto seed = stage_seed(cfg, stage);
    std::int64_t end = schedule.total_steps();
    if (opts.stop_after >= 0) end = std::min(end, opts.stop_after);
    const auto every = cfg.get_int("logging.checkpoint_every");
    const auto print_every = cfg.get_int("logging.print_every");

    RunResult result;
    result.session = session;
    if (session->step < end) {
        dataio::BatchPrefetcher prefetch(
            [&store, pool, batch_size, k, seed](std::int64_t step) {
                return dataio::sample_batch(store, pool, batch_size, k, seed, step);
            },
            session->step, end, static_cast<int>(cfg.get_int("data.workers")), static_cast<int>(cfg.get_int("data.prefetch")));
        session->nets.train(true);
        for (std::int64_t s = session->step; s < end; ++s) {
            session->set_learning_rate(schedule.lr_at(s));
            const auto batch = prefetch.next();
            auto log = step_fn(*session, batch, s);
            log.step = s + 1;
            session->step = s + 1;
            session->epoch = schedule.epoch_of(s);
            result.log.push_back(log);
            if (write) std::ofstream(log_path, std::ios::app) << log.to_json().dump() << "\n";
            if (opts.on_step) opts.on_step(log);
            if (print_every > 0 && (s + 1) % print_every == 0) {
                std::cerr << "[" << stage_name(stage) << "] step " << s + 1 << "/" << schedule.total_steps() << " "
                          << log.to_json().dump() << "\n";
            }
            if (write && every > 0 && (s + 1) % every == 0 && s + 1 < end) {
                session->save(opts.out_dir / checkpoint_name(s + 1));
                prune_checkpoints(opts.out_dir, cfg.get_int("logging.keep_checkpoints"));
            }
        }
    }
    session->nets.train(false);
    if (write) {
        if (session->step >= schedule.total_steps()) {
            result.final_checkpoint = opts.out_dir / "final";
        } else {
            result.final_checkpoint = opts.out_dir / checkpoint_name(session->step);
        }
        session->save(result.final_checkpoint);
        if (result.final_checkpoint.filename() != "final") {
            prune_checkpoints(opts.out_dir, cfg.get_int("logging.keep_checkpoints"));
        }
    }
    return result;
}

}  // namespace

std::string stage_name(Stage s) {
    switch (s) {
        case Stage::kPretrain: return "pretrain";
        case Stage::kFull: return "full";
        case Stage::kFinetune: return "finetune";
    }
    return "unknown";
}

Stage parse_stage(const std::string& s) {
    if (s == "pretrain") return Stage::kPretrain;
    if (s == "full") return Stage::kFull;
    if (s == "finetune") return Stage::kFinetune;
    throw ConfigError("unknown stage '" + s + "'");
}

void StageSchedule::validate() const {
    if (steps < 1 || epochs < 1 || extra_steps < 0) throw ConfigError("stage durations must be positive");
    if (epochs > steps) throw ConfigError("more epochs than steps in stage " + stage_name(stage));
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
}

std::int64_t StageSchedule::steps_per_epoch() const { return (steps + epochs - 1) / epochs; }

std::int64_t StageSchedule::epoch_of(std::int64_t step) const {
    return std::min(step / steps_per_epoch(), epochs - 1 + (step >= steps ? 1 : 0));
}

double StageSchedule::lr_at(std::int64_t step) const {
    const std::int64_t decay_start = steps - steps_per_epoch();
    if (step < decay_start) return lr;
    if (step >= steps - 1) return lr / 100.0;
    const double t = static_cast<double>(step - decay_start) / static_cast<double>(steps - 1 - decay_start);
    return lr * (1.0 - 0.99 * t);
}

StageSchedule schedule_from_config(const Config& cfg, Stage stage, int k) {
    StageSchedule s;
    s.stage = stage;
    s.lr = cfg.get_double("schedule.lr");
    s.beta1 = cfg.get_double("schedule.beta1");
    s.beta2 = cfg.get_double("schedule.beta2");
    switch (stage) {
        case Stage::kPretrain:
            s.steps = cfg.get_int("schedule.pretrain_steps");
            s.epochs = cfg.get_int("schedule.pretrain_epochs");
            break;
        case Stage::kFull:
            s.steps = cfg.get_int("schedule.full_steps");
            s.epochs = cfg.get_int("schedule.full_epochs");
            s.extra_steps = cfg.get_int("schedule.extra_steps");
            break;
        case Stage::kFinetune:
            s.steps = cfg.get_int("schedule.finetune_steps_per_shot") * k;
            s.epochs = s.steps;
            s.lr = cfg.get_double("schedule.finetune_lr");
            break;
    }
    s.validate();
    return s;
}

json StepLog::to_json() const {
    return json{{"step", step},     {"xent", xent},   {"rec_perc", rec_perc}, {"rec_id", rec_id}, {"rec_l1", rec_l1},
                {"g_adv", g_adv},   {"d_adv", d_adv}, {"r1", r1},             {"latent_l2", latent_l2}};
}

StepLog StepLog::from_json(const json& j) {
    StepLog l;
    l.step = j.at("step").get<std::int64_t>();
    l.xent = j.at("xent").get<double>();
    l.rec_perc = j.at("rec_perc").get<double>();
    l.rec_id = j.at("rec_id").get<double>();
    l.rec_l1 = j.at("rec_l1").get<double>();
    l.g_adv = j.at("g_adv").get<double>();
    l.d_adv = j.at("d_adv").get<double>();
    l.r1 = j.at("r1").get<double>();
    l.latent_l2 = j.at("latent_l2").get<double>();
    return l;
}

Session::Session(const Config& cfg) : config(cfg) {
    nets = nets::Networks(variant_config(cfg), static_cast<std::uint64_t>(cfg.get_int("schedule.seed")));
    generic = std::make_shared<losses::GenericBackbone>(static_cast<std::uint64_t>(cfg.get_int("losses.generic_seed")));
}

void Session::reset_optimizers(const std::vector<std::string>& names, const StageSchedule& schedule) {
    optimizers.clear();
    for (const auto& name : names) {
        auto m = find_module(nets, name);
        if (!m) throw ConfigError("variant " + nets::variant_name(nets.cfg.variant) + " has no network '" + name + "'");
        optimizers[name] = std::make_unique<torch::optim::Adam>(
            m->parameters(), torch::optim::AdamOptions(schedule.lr).betas({schedule.beta1, schedule.beta2}));
    }
}

void Session::set_learning_rate(double lr) {
    for (auto& [name, opt] : optimizers) {
        for (auto& group : opt->param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    }
}

void Session::save(const fs::path& dir) const {
    auto tmp = dir;
    tmp += ".tmp";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    json manifest;
    manifest["format"] = kFormat;
    manifest["step"] = step;
    manifest["epoch"] = epoch;
    manifest["stage"] = stage_name(stage);
    manifest["variant"] = nets::variant_name(nets.cfg.variant);
    manifest["config"] = config.to_json();
    manifest["config_hash"] = config.architecture_hash();
    manifest["networks"] = json::array();
    for (const auto& [name, m] : nets.modules()) {
        save_module(*m, tmp / name);
        manifest["networks"].push_back(name);
    }
    manifest["optimizers"] = json::array();
    for (const auto& [name, opt] : optimizers) {
        torch::serialize::OutputArchive ar;
        opt->save(ar);
        ar.save_to((tmp / ("optim_" + name)).string());
        manifest["optimizers"].push_back(name);
    }
    save_module(generic->module(), tmp / "backbone_generic");
    if (identity) {
        save_module(identity->module(), tmp / "backbone_identity");
        manifest["identity_classes"] = identity->num_identities();
    } else {
        manifest["identity_classes"] = nullptr;
    }
    manifest["rng"] = {{"torch_cpu", torch_rng_state()}, {"seed", config.get_int("schedule.seed")}};
    write_json(manifest, tmp / "manifest.json");
    replace_dir(tmp, dir);
}

json read_manifest(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("no checkpoint manifest at " + (dir / "manifest.json").string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("malformed checkpoint manifest " + (dir / "manifest.json").string() + ": " + e.what());
    }
    if (j.value("format", "") != kFormat) throw std::runtime_error("unsupported checkpoint format in " + dir.string());
    return j;
}

void Session::load_networks(const fs::path& dir) {
    const auto manifest = read_manifest(dir);
    if (manifest.at("config_hash").get<std::string>() != config.architecture_hash()) {
        throw ConfigError("checkpoint " + dir.string() + " (variant " + manifest.at("variant").get<std::string>() +
                          ") does not match the configured architecture of variant " +
                          nets::variant_name(nets.cfg.variant));
    }
    for (const auto& [name, m] : nets.modules()) {
        if (fs::exists(dir / name)) load_module(*m, dir / name);
    }
    if (!manifest.at("identity_classes").is_null() && fs::exists(dir / "backbone_identity")) {
        identity = std::make_shared<losses::IdentityBackbone>(manifest.at("identity_classes").get<int64_t>(),
                                                              config.get_int("losses.identity_embedding"));
        load_module(identity->module(), dir / "backbone_identity");
        identity->freeze();
    }
}

Session Session::load(const fs::path& dir) {
    const auto manifest = read_manifest(dir);
    Session s(Config::from_json(manifest.at("config")));
    s.stage = parse_stage(manifest.at("stage").get<std::string>());
    s.step = manifest.at("step").get<std::int64_t>();
    s.epoch = manifest.at("epoch").get<std::int64_t>();
    s.load_networks(dir);
    load_module(s.generic->module(), dir / "backbone_generic");
    std::vector<std::string> names;
    for (const auto& n : manifest.at("optimizers")) names.push_back(n.get<std::string>());
    if (!names.empty()) {
        const int k = static_cast<int>(s.config.get_int("data.k"));
        s.reset_optimizers(names, schedule_from_config(s.config, s.stage, k));
        for (const auto& name : names) {
            torch::serialize::InputArchive ar;
            ar.load_from((dir / ("optim_" + name)).string());
            s.optimizers.at(name)->load(ar);
        }
    }
    set_torch_rng_state(manifest.at("rng").at("torch_cpu").get<std::string>());
    return s;
}

Session Session::clone() const {
    const auto rng = torch_rng_state();
    Session s(config);
    set_torch_rng_state(rng);
    s.stage = stage;
    s.step = step;
    s.epoch = epoch;
    s.identity = identity;
    s.generic = generic;
    const auto mine = nets.modules();
    const auto theirs = s.nets.modules();
    for (size_t i = 0; i < mine.size(); ++i) module_from_bytes(*theirs[i].second, module_bytes(*mine[i].second));
    for (const auto& [name, opt] : optimizers) {
        auto m = find_module(s.nets, name);
        auto copy = std::make_unique<torch::optim::Adam>(m->parameters(),
                                                         static_cast<const torch::optim::AdamOptions&>(opt->defaults()));
        torch::serialize::OutputArchive out;
        opt->save(out);
        std::ostringstream os;
        out.save_to(os);
        std::istringstream is(os.str());
        torch::serialize::InputArchive in;
        in.load_from(is);
        copy->load(in);
        s.optimizers[name] = std::move(copy);
    }
    return s;
}

std::optional<fs::path> latest_checkpoint(const fs::path& out_dir) {
    std::optional<fs::path> best;
    if (!fs::is_directory(out_dir)) return best;
    for (const auto& e : fs::directory_iterator(out_dir)) {
        const auto name = e.path().filename().string();
        if (!e.is_directory() || name.rfind("ckpt_", 0) != 0 || !fs::exists(e.path() / "manifest.json")) continue;
        if (!best || name > best->filename().string()) best = e.path();
    }
    return best;
}

std::shared_ptr<losses::IdentityBackbone> train_identity(const Config& cfg, const dataio::FrameStore& store,
                                                         const std::vector<int>& identity_ids) {
    std::vector<torch::Tensor> images;
    std::vector<int64_t> labels;
    for (size_t i = 0; i < identity_ids.size(); ++i) {
        for (const auto& f : store.frames_of(identity_ids[i])) {
            images.push_back(f.image);
            labels.push_back(static_cast<int64_t>(i));
        }
    }
    const auto seed = static_cast<std::uint64_t>(cfg.get_int("schedule.seed"));
    auto backbone = std::make_shared<losses::IdentityBackbone>(
        static_cast<int64_t>(identity_ids.size()), cfg.get_int("losses.identity_embedding"),
        std::vector<int64_t>{16, 32, 64, 64}, synthface::mix_seed(seed, 0x1DE));
    losses::IdentityTrainOptions opts;
    opts.steps = static_cast<int>(cfg.get_int("losses.identity_steps"));
    opts.seed = synthface::mix_seed(seed, 0x1DF);
    losses::train_identity_backbone(*backbone, torch::stack(images), torch::tensor(labels), opts);
    return backbone;
}

RunResult pretrain_layout(const Config& cfg, const dataio::FrameStore& store, const RunOptions& opts) {
    const auto vc = variant_config(cfg);
    if (vc.variant != nets::Variant::kLearnedSeg && vc.variant != nets::Variant::kLatentLayout) {
        throw ConfigError("layout pre-training needs variant learned_seg or latent_layout, got " +
                          nets::variant_name(vc.variant));
    }
    require_segmentation(store, training_pool(store), "layout pre-training");
    auto step = [](Session& s, const dataio::Batch& b, std::int64_t) {
        const auto z = s.nets.encode(b.sources);
        const auto lay = s.nets.layout_gen(b.target_contour, z.z_layout);
        const auto pt = losses::pretrain_objective(lay.logits, b.target_segmentation, lay.aux_rgb, b.target_image,
                                                   s.nets.cfg.weights.lambda_r, *s.generic);
        for (auto& [n, o] : s.optimizers) o->zero_grad();
        pt.total.backward();
        for (auto& [n, o] : s.optimizers) o->step();
        StepLog log;
        log.xent = scalar(pt.xent);
        log.rec_perc = scalar(pt.aux);
        return log;
    };
    return run_stage(cfg, store, opts, Stage::kPretrain, {"encoder", "layout_gen"}, step, false);
}

RunResult train_full(const Config& cfg, const dataio::FrameStore& store, const RunOptions& opts) {
    const auto vc = variant_config(cfg);
    const bool layout_variant = vc.variant == nets::Variant::kLearnedSeg || vc.variant == nets::Variant::kLatentLayout;
    const bool resuming = opts.resume && !opts.out_dir.empty() && latest_checkpoint(opts.out_dir);
    if (layout_variant && !opts.init_checkpoint && !resuming) {
        throw ConfigError("variant " + nets::variant_name(vc.variant) + " needs a pre-trained layout checkpoint");
    }
    if (opts.init_checkpoint) {
        const auto m = read_manifest(*opts.init_checkpoint);
        if (m.at("config_hash").get<std::string>() != cfg.architecture_hash()) {
            throw ConfigError("checkpoint " + opts.init_checkpoint->string() + " (variant " +
                              m.at("variant").get<std::string>() + ") does not match variant " +
                              nets::variant_name(vc.variant));
        }
    }
    const bool xent_on = vc.variant == nets::Variant::kLearnedSeg;
    if (xent_on || vc.variant == nets::Variant::kUpperBound) {
        require_segmentation(store, training_pool(store), "variant " + nets::variant_name(vc.variant));
    }
    const auto g_nets = generator_nets(vc, true);
    auto optimized = g_nets;
    optimized.push_back("discriminator");
    auto step = [g_nets, xent_on](Session& s, const dataio::Batch& b, std::int64_t index) {
        return adversarial_step(s, [&] { return s.nets.encode(b.sources); }, b.target_contour, b.target_image,
                                b.target_segmentation, index, g_nets, xent_on);
    };
    return run_stage(cfg, store, opts, Stage::kFull, optimized, step, true);
}

torch::Tensor stack_sources(const std::vector<dataio::LoadedFrame>& shots) {
    if (shots.empty()) throw std::invalid_argument("at least one source frame is required");
    std::vector<torch::Tensor> items;
    for (const auto& f : shots) items.push_back(torch::cat({f.image, f.contour}, 0));
    return torch::stack(items).unsqueeze(0);
}

Session finetune_subject(const Session& meta, const std::vector<dataio::LoadedFrame>& shots,
                         const FinetuneOptions& opts, std::vector<StepLog>* log) {
    if (shots.empty()) throw std::invalid_argument("fine-tuning needs at least one shot");
    Session s = meta.clone();
    s.stage = Stage::kFinetune;
    s.step = 0;
    s.epoch = 0;
    const auto k = static_cast<std::int64_t>(shots.size());

    StageSchedule schedule;
    schedule.stage = Stage::kFinetune;
    schedule.steps = opts.steps_override > 0 ? opts.steps_override : opts.steps_per_shot * k;
    schedule.epochs = schedule.steps;
    schedule.lr = opts.lr;
    schedule.beta1 = meta.config.get_double("schedule.beta1");
    schedule.beta2 = meta.config.get_double("schedule.beta2");
    schedule.validate();

    nets::LatentPair z;
    {
        torch::NoGradGuard ng;
        s.nets.train(false);
        const auto per_frame = s.nets.encode(stack_sources(shots));
        z = {per_frame.z_layout.expand({k, -1}).contiguous(), per_frame.z_style.expand({k, -1}).contiguous()};
    }
    std::vector<torch::Tensor> contours, images, segs;
    bool have_seg = true;
    for (const auto& f : shots) {
        contours.push_back(f.contour);
        images.push_back(f.image);
        have_seg = have_seg && f.segmentation.defined();
        if (have_seg) segs.push_back(f.segmentation);
    }
    const auto contour = torch::stack(contours), image = torch::stack(images);
    const auto seg = have_seg ? torch::stack(segs) : torch::Tensor();
    if (s.nets.cfg.variant == nets::Variant::kUpperBound && !seg.defined()) {
        throw std::invalid_argument("upper_bound fine-tuning needs segmentations of the shots");
    }

    set_requires_grad(*s.nets.encoder, false);
    auto g_nets = generator_nets(s.nets.cfg, false);
    auto optimized = g_nets;
    optimized.push_back("discriminator");
    s.reset_optimizers(optimized, schedule);
    s.nets.train(true);
    for (std::int64_t i = 0; i < schedule.steps; ++i) {
        s.set_learning_rate(schedule.lr_at(i));
        auto l = adversarial_step(s, [&] { return z; }, contour, image, seg, i, g_nets, false);
        l.step = i + 1;
        s.step = i + 1;
        s.epoch = schedule.epoch_of(i);
        if (log) log->push_back(l);
    }
    s.nets.train(false);
    set_requires_grad(*s.nets.encoder, true);
    return s;
}

}  // namespace lsr::trainer
