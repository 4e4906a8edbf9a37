#include <iostream>

#include "advcomm/harness.hpp"

int main(int argc, char** argv) { return advcomm::harness::cli_main(argc, argv, std::cout, std::cerr); }
