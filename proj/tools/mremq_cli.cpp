#include <vector>

#include "mremq/cli.hpp"

int main(int argc, char** argv) {
    return mremq::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
