#include <iostream>

#include "voltrl/cli.hpp"

int main(int argc, char** argv) { return voltrl::cli::run(argc, argv, std::cout, std::cerr); }
