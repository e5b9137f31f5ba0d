#pragma once

#include <ostream>

namespace s2c {

// Stable process exit codes.
enum ExitCode : int {
  exit_ok = 0,
  exit_internal = 1,      // unexpected failure
  exit_usage = 2,         // bad flags, unknown or mistyped config key, missing required path
  exit_data = 3,          // unreadable or malformed dataset
  exit_preservation = 4,  // a grown network changed the function
  exit_numeric = 5,       // non-finite loss, gradient or statistics
  exit_checkpoint = 6,    // unreadable, corrupt or incompatible checkpoint
  exit_model = 7,         // shape, graph or consistency violation
};

// Subcommands: train-s2c, train-e2e, grow, eval, report-gamma, verify, synth-demo.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace s2c
