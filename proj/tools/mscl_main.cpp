#include "mscl/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return mscl::run_command(argc, argv, std::cout, std::cerr); }
