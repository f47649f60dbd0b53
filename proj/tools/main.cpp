// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) {
    return lsr::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
