#include <iostream>

#include "s2c/cli.hpp"

int main(int argc, char** argv) { return s2c::run_cli(argc, argv, std::cout, std::cerr); }
