#include <iostream>

#include "dqrelo/cli.hpp"

int main(int argc, char** argv) {
  return dqrelo::cli::run_cli(argc, argv, std::cout, std::cerr);
}
