// SPDX-License-Identifier: Apache-2.0

#include "lsr/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace lsr {

namespace {

using T = ConfigType;

bool parse_bool(const std::string& v, bool& out) {
    std::string s = v;
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "true" || s == "1" || s == "yes" || s == "on") return out = true, true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return out = false, true;
    return false;
}

bool valid_value(ConfigType type, const std::string& v) {
    try {
        size_t pos = 0;
        switch (type) {
            case T::kInt:
                std::stoll(v, &pos);
                return pos == v.size();
            case T::kFloat:
                std::stod(v, &pos);
                return pos == v.size();
            case T::kBool: {
                bool b;
                return parse_bool(v, b);
            }
            case T::kString:
                return true;
        }
    } catch (const std::exception&) {
    }
    return false;
}

const ConfigKey* find_key(const std::string& name) {
    for (const auto& k : config_keys())
        if (k.name == name) return &k;
    return nullptr;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys{
        {"data.root", T::kString, "", "dataset directory"},
        {"data.split", T::kString, "", "split JSON; empty = hold out data.test_ids last identities"},
        {"data.test_ids", T::kInt, "0", "number of held-out identities when no split file is given"},
        {"data.resolution", T::kInt, "64", "training resolution (power of two)"},
        {"data.k", T::kInt, "4", "source shots per training episode"},
        {"data.workers", T::kInt, "1", "prefetch workers"},
        {"data.prefetch", T::kInt, "4", "prefetch queue capacity"},
        {"variant.name", T::kString, "latent_layout", "baseline|spade_landmarks|learned_seg|latent_layout|upper_bound"},
        {"nets.layout_channels", T::kInt, "8", "layout channels C"},
        {"nets.latent_dim", T::kInt, "512", "latent size"},
        {"nets.base_width", T::kInt, "32", "smallest feature width"},
        {"nets.max_width", T::kInt, "512", "largest feature width"},
        {"nets.spade_hidden", T::kInt, "64", "hidden maps in each SPADE block"},
        {"nets.disc_base_width", T::kInt, "32", "smallest discriminator width"},
        {"nets.encoder_blocks", T::kInt, "5", "encoder downsampling blocks"},
        {"nets.separate_encoders", T::kBool, "false", "two encoder trunks instead of one shared trunk"},
        {"nets.style_in_blocks", T::kBool, "false", "modulate every SPADE block from z_style"},
        {"losses.lambda_r", T::kFloat, "0.1", "auxiliary RGB weight in pre-training"},
        {"losses.lambda_adv", T::kFloat, "0.1", "adversarial weight"},
        {"losses.lambda_l2", T::kFloat, "0.0001", "latent L2 weight"},
        {"losses.gamma_r1", T::kFloat, "10", "R1 weight"},
        {"losses.r1_interval", T::kInt, "1", "apply R1 every N discriminator steps"},
        {"losses.w_perceptual", T::kFloat, "1", "generic perceptual weight in L_rec"},
        {"losses.w_identity", T::kFloat, "0.1", "identity perceptual weight in L_rec"},
        {"losses.w_l1", T::kFloat, "1", "L1 weight in L_rec"},
        {"losses.w_xent", T::kFloat, "1", "cross-entropy weight"},
        {"losses.generic_seed", T::kInt, "1234", "seed of the fixed generic backbone"},
        {"losses.identity_steps", T::kInt, "400", "training steps of the identity backbone"},
        {"losses.identity_embedding", T::kInt, "64", "identity embedding size"},
        {"schedule.seed", T::kInt, "0", "master seed"},
        {"schedule.batch_size", T::kInt, "8", "episodes per step"},
        {"schedule.lr", T::kFloat, "0.001", "learning rate"},
        {"schedule.beta1", T::kFloat, "0", "Adam beta1"},
        {"schedule.beta2", T::kFloat, "0.999", "Adam beta2"},
        {"schedule.pretrain_steps", T::kInt, "1000", "layout pre-training steps"},
        {"schedule.pretrain_epochs", T::kInt, "2", "layout pre-training epochs"},
        {"schedule.full_steps", T::kInt, "5000", "full pipeline steps"},
        {"schedule.full_epochs", T::kInt, "8", "full pipeline epochs"},
        {"schedule.extra_steps", T::kInt, "0", "additional full-pipeline steps at constant learning rate"},
        {"schedule.finetune_steps_per_shot", T::kInt, "40", "fine-tuning steps per source shot"},
        {"schedule.finetune_lr", T::kFloat, "0.001", "fine-tuning learning rate"},
        {"logging.checkpoint_every", T::kInt, "500", "checkpoint interval in steps"},
        {"logging.keep_checkpoints", T::kInt, "2", "number of step checkpoints kept"},
        {"logging.print_every", T::kInt, "0", "print a progress line every N steps (0 = never)"},
    };
    return keys;
}

Config::Config() {
    for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

Config Config::from_file(const std::filesystem::path& path) {
    Config c;
    c.merge_file(path);
    return c;
}

Config Config::from_json(const nlohmann::json& j) {
    Config c;
    for (const auto& [k, v] : j.items()) c.set(k, v.is_string() ? v.get<std::string>() : v.dump());
    return c;
}

void Config::merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError("malformed config file " + path.string() + ": " + e.message() + " (line " +
                          std::to_string(e.line()) + ")");
    }
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw ConfigError(path.string() + ": key '" + section + "' outside a section");
        for (const auto& [key, value] : body) set(section + "." + key, trim(value.data()));
    }
}

void Config::set(const std::string& key, const std::string& value) {
    const auto* k = find_key(key);
    if (!k) throw ConfigError("unknown config key '" + key + "'");
    if (!valid_value(k->type, value)) throw ConfigError("invalid value '" + value + "' for config key '" + key + "'");
    values_[key] = value;
}

void Config::apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string Config::get_string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

std::int64_t Config::get_int(const std::string& key) const { return std::stoll(get_string(key)); }

double Config::get_double(const std::string& key) const { return std::stod(get_string(key)); }

bool Config::get_bool(const std::string& key) const {
    bool b = false;
    parse_bool(get_string(key), b);
    return b;
}

nlohmann::json Config::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
}

std::string architecture_family(nets::Variant v) {
    switch (v) {
        case nets::Variant::kBaseline: return "adain_unet";
        case nets::Variant::kSpadeLandmarks: return "spade_contour";
        case nets::Variant::kUpperBound: return "oracle_spade";
        default: return "layout_spade";
    }
}

std::string Config::architecture_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto feed = [&](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
    };
    feed("family=" + architecture_family(nets::parse_variant(get_string("variant.name"))) + "\n");
    feed("data.resolution=" + get_string("data.resolution") + "\n");
    for (const auto& [k, v] : values_) {
        if (k.rfind("nets.", 0) == 0) feed(k + "=" + v + "\n");
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

nets::VariantConfig variant_config(const Config& cfg) {
    nets::VariantConfig vc;
    try {
        vc.variant = nets::parse_variant(cfg.get_string("variant.name"));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    auto& n = vc.net;
    n.resolution = static_cast<int>(cfg.get_int("data.resolution"));
    n.layout_channels = static_cast<int>(cfg.get_int("nets.layout_channels"));
    n.latent_dim = static_cast<int>(cfg.get_int("nets.latent_dim"));
    n.base_width = static_cast<int>(cfg.get_int("nets.base_width"));
    n.max_width = static_cast<int>(cfg.get_int("nets.max_width"));
    n.spade_hidden = static_cast<int>(cfg.get_int("nets.spade_hidden"));
    n.disc_base_width = static_cast<int>(cfg.get_int("nets.disc_base_width"));
    n.encoder_blocks = static_cast<int>(cfg.get_int("nets.encoder_blocks"));
    n.separate_encoders = cfg.get_bool("nets.separate_encoders");
    n.style_in_blocks = cfg.get_bool("nets.style_in_blocks");
    auto& w = vc.weights;
    w.lambda_r = cfg.get_double("losses.lambda_r");
    w.lambda_adv = cfg.get_double("losses.lambda_adv");
    w.lambda_l2 = cfg.get_double("losses.lambda_l2");
    w.gamma_r1 = cfg.get_double("losses.gamma_r1");
    w.w_perceptual = cfg.get_double("losses.w_perceptual");
    w.w_identity = cfg.get_double("losses.w_identity");
    w.w_l1 = cfg.get_double("losses.w_l1");
    w.w_xent = cfg.get_double("losses.w_xent");
    if (n.layout_channels < 7 && (vc.variant == nets::Variant::kUpperBound || vc.variant == nets::Variant::kLearnedSeg ||
                                  vc.variant == nets::Variant::kLatentLayout)) {
        throw ConfigError("nets.layout_channels must cover the 7 segmentation classes");
    }
    try {
        vc.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return vc;
}

}  // namespace lsr
