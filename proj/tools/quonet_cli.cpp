#include <iostream>
#include <string>
#include <vector>

#include <quonet/cli.hpp>

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return quonet::cli::run_cli(std::move(args), std::cout, std::cerr);
}
