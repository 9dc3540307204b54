#include "qmwf/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return qmwf::cli::run_cli(argc, argv, std::cout, std::cerr); }
