// SPDX-License-Identifier: Apache-2.0
#include "meddet/cli.hpp"

int main(int argc, char** argv) { return meddet::cli::run(argc, argv); }
