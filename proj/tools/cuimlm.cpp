#include <iostream>

#include "cuimlm/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cuimlm::cli::run(std::move(args), std::cout, std::cerr);
}
