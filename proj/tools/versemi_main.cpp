#include <vector>

#include "versemi/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return versemi::cli::run(args);
}
