// SPDX-License-Identifier: Apache-2.0
#include "diffpo/cli.hpp"

int main(int argc, char** argv) { return diffpo::cli::run(argc, argv); }
