#include <string>
#include <vector>

#include "latent_loop/commands.hpp"

int main(int argc, char** argv) {
  return latent_loop::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
