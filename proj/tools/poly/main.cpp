/**
 * @file main.cpp
 * @brief poly command-line entry point.
 */

#include <iostream>
#include <string>
#include <vector>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "poly/cli.hpp"

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("poly"));
  std::vector<std::string> args(argv + 1, argv + argc);
  return poly::run_cli(args, std::cout, std::cerr);
}
