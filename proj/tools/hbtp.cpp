#include <iostream>
#include <string>
#include <vector>

#include "hbtp/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return hbtp::cli::run(args, std::cout, std::cerr);
}
