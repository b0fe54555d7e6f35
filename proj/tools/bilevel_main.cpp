#include <iostream>

#include "bilevel/cli.hpp"

int main(int argc, char** argv) {
  return bilevel::run_cli(argc, argv, std::cout, std::cerr);
}
