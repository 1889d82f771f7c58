#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace hierdoc {

// Exit statuses of the command-line tool.
enum ExitCode : int {
  exit_ok = 0,
  exit_invalid_config = 1,
  exit_missing_input = 2,
  exit_training_aborted = 3,
  exit_failure = 4,
};

class MissingInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Runs one CLI invocation; args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hierdoc
