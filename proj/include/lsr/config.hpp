// SPDX-License-Identifier: Apache-2.0
//
// Flat "section.key" configuration with typed defaults. Precedence:
// defaults < INI file < explicit overrides.

#ifndef LSR_CONFIG_HPP
#define LSR_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lsr/nets.hpp"

namespace lsr {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ConfigType { kInt, kFloat, kBool, kString };

struct ConfigKey {
    std::string name;  // section.key
    ConfigType type;
    std::string default_value;
    std::string help;
};

/// Every recognised key with its default.
const std::vector<ConfigKey>& config_keys();

class Config {
public:
    /// All defaults.
    Config();

    /// Defaults overlaid with an INI file. Throws ConfigError naming the path if it
    /// cannot be read, and on unknown keys or ill-typed values.
    static Config from_file(const std::filesystem::path& path);
    static Config from_json(const nlohmann::json& j);

    void merge_file(const std::filesystem::path& path);
    /// Throws ConfigError on unknown key or a value that does not parse as the key's type.
    void set(const std::string& key, const std::string& value);
    /// "section.key=value"
    void apply_override(const std::string& assignment);

    std::string get_string(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    const std::map<std::string, std::string>& values() const { return values_; }
    nlohmann::json to_json() const;

    /// Hash over the keys that determine network shapes (resolution, nets.*, and the
    /// variant's architecture family). learned_seg and latent_layout share a family.
    std::string architecture_hash() const;

    bool operator==(const Config&) const = default;

private:
    std::map<std::string, std::string> values_;
};

nets::VariantConfig variant_config(const Config& cfg);

/// Architecture family of a variant: adain_unet, spade_contour, layout_spade, oracle_spade.
std::string architecture_family(nets::Variant v);

}  // namespace lsr

#endif  // LSR_CONFIG_HPP
