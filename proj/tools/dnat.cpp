#include <iostream>
#include <string>
#include <vector>

#include "dnat/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dnat::cli::dispatch(args, std::cout, std::cerr);
}
