#include <iostream>

#include "docmoe/cli.hpp"

int main(int argc, char** argv) { return docmoe::run_command(argc, argv, std::cout, std::cerr); }
