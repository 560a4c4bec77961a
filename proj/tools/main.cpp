// SPDX-License-Identifier: Apache-2.0
#include <iostream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "gmnet/train.hpp"

int main(int argc, char** argv) {
  gmnet::tune_allocator();
  return gmnet::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
