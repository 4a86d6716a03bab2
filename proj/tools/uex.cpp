#include <iostream>

#include "uex/cli/cli.hpp"

int main(int argc, char** argv) { return uex::cli::run(argc, argv, std::cout, std::cerr); }
