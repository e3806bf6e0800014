#include <iostream>

#include "convnext/cli.hpp"

int main(int argc, char** argv) { return cnx::run_cli(argc, argv, std::cout, std::cerr); }
