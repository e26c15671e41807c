#include <string>
#include <vector>

#include "spct/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return spct::run_cli(std::move(args));
}
