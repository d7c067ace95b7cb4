#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) {
  dpq::cli::Hooks hooks;
#ifdef DPQ_FAULTY_BUILD
  hooks.flip_value_grad_sign = true;
#endif
  return dpq::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr, hooks);
}
