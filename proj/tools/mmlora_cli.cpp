#include <string>
#include <vector>

#include "mmlora/harness.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return mmlora::harness::cli_main(args);
}
