#include <iostream>

#include "attnreg/cli.hpp"

int main(int argc, char** argv) {
  return attnreg::cli_dispatch(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
