// SPDX-License-Identifier: Apache-2.0

#include "vibdiag/cli.hpp"

int main(int argc, char** argv) { return vibdiag::cli::run(argc, argv); }
