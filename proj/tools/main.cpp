#include <iostream>

#include "sharplens/cli.hpp"

int main(int argc, char** argv) { return sharplens::run_cli(argc, argv, std::cout, std::cerr); }
