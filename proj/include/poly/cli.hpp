/**
 * @file cli.hpp
 * @brief Command-line front end: preprocess, train, generate, interpolate,
 *        condition, metrics, pca and serve.
 */

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace poly {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

/// Runs one invocation. `args` excludes the program name. Errors go to `err`
/// as a single line prefixed with ERROR:<code>:.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Applies POLY_LOG (error, info or debug) to the default logger.
void configure_logging_from_env();

}  // namespace poly
