#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return exitrf::cli::run_command(args, std::cout, std::cerr);
}
