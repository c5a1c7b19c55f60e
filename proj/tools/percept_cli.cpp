// SPDX-License-Identifier: Apache-2.0
#include "percept/cli.hpp"

int main(int argc, char** argv) { return percept::run_command(argc, argv); }
