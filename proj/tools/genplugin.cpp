#include <iostream>

#include "genplugin/cli.hpp"

int main(int argc, char** argv) {
    return genplugin::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
