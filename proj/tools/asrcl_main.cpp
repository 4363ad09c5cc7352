// SPDX-License-Identifier: Apache-2.0
#include <iostream>
#include <string>
#include <vector>

#include "asrcl/cli.hpp"
#include "asrcl/tensor.hpp"

int main(int argc, char** argv) {
  asrcl::tune_allocator();
  std::vector<std::string> args(argv + 1, argv + argc);
  return asrcl::run_cli(args, std::cout, std::cerr);
}
