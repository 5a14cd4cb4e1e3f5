// SPDX-License-Identifier: Apache-2.0
#include "malcve/cli.hpp"

int main(int argc, char** argv) { return malcve::cli::run(argc, argv); }
