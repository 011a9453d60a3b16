#include <iostream>
#include <string>
#include <vector>

#include "radnet/harness.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return radnet::run_command(args, std::cout, std::cerr);
}
