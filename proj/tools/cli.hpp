// SPDX-License-Identifier: Apache-2.0
//
// The `lsr` command line: dataset creation, the three training stages, embedding,
// reenactment, evaluation, grids and ablations.

#ifndef LSR_TOOLS_CLI_HPP
#define LSR_TOOLS_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

#include "lsr/nets.hpp"

namespace lsr::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Runs one command. argv[0] is the program name. Returns the exit code.
int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

/// Parses --variants values: baseline, spade, learned_seg, latent, upper, all
/// (full variant names are accepted too). Throws ConfigError on anything else.
std::vector<nets::Variant> parse_variant_list(const std::vector<std::string>& items);

}  // namespace lsr::cli

#endif  // LSR_TOOLS_CLI_HPP
