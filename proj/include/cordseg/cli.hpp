#pragma once

namespace cordseg {

// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitIo = 3,
  kExitMissingData = 4,
  kExitNoCord = 5,
};

// Entry point of the `cordseg` tool (subcommands phantom, train, segment,
// eval, consensus). Returns the process exit code.
int run_cli(int argc, char** argv);

}  // namespace cordseg
