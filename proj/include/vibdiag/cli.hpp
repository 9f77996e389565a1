// SPDX-License-Identifier: Apache-2.0
//
// `vibdiag` command-line front end.
//
// Exit codes: 0 success, 1 usage, 2 config, 3 data, 4 numeric failure. Every
// failure ends with one stderr line "error: <kind>: <message>".
//
// Configuration comes from defaults, then the JSON file named by --config
// (or the VIBDIAG_CONFIG environment variable), then command-line flags.

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace vibdiag::cli {

int run(int argc, char** argv);
// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vibdiag::cli
