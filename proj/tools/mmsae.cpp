// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "mmsae/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mmsae::run_cli(args, std::cout, std::cerr);
}
