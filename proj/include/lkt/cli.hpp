// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace lkt {

/// Runs the `lkt` command line. `args` excludes the program name. Returns 0 on
/// success, 1 on invalid input or usage, 2 on any other failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lkt
