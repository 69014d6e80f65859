#include <string>
#include <vector>

#include "capsroute/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return capsroute::cli_run(args);
}
