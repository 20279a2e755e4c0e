// SPDX-License-Identifier: Apache-2.0
#include "rapsg/cli.hpp"

int main(int argc, char** argv) { return rapsg::cli::run_cli(argc, argv); }
