#include <iostream>

#include "pieeg/cli.hpp"

int main(int argc, char** argv) { return pieeg::cli::run(argc, argv, std::cout, std::cerr); }
