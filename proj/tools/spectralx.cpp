#include <vector>

#include "spectralx/cli.hpp"

int main(int argc, char** argv) {
  return spectralx::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
