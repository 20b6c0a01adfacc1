#include "iwivig/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return iwivig::cli::run(argc, argv, std::cout, std::cerr); }
