#include <iostream>
#include <string>
#include <vector>

#include "slnet/cli.hpp"

int main(int argc, char** argv) {
  slnet::tune_allocator();
  std::vector<std::string> args(argv + 1, argv + argc);
  return slnet::run_command(args, std::cout, std::cerr);
}
