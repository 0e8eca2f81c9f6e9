#include <iostream>

#include "modsquad/cli.hpp"

int main(int argc, char** argv) { return modsquad::cli::run(argc, argv, std::cout, std::cerr); }
