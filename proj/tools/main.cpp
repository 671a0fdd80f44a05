#include <iostream>

#include "feederclip/cli.hpp"

int main(int argc, char** argv) { return feederclip::cli_dispatch(argc, argv, std::cout, std::cerr); }
