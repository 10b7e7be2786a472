// SPDX-License-Identifier: Apache-2.0
#include "difflab/cli.hpp"

int main(int argc, char** argv) { return difflab::cli::run(argc, argv); }
