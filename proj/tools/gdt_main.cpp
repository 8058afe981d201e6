#include <iostream>

#include "gdt/cli.hpp"

int main(int argc, char** argv) { return gdt::cli::dispatch(argc, argv, std::cout, std::cerr); }
