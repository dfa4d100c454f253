#include "lanefusion/cli.hpp"

int main(int argc, char** argv) {
    return lanefusion::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
