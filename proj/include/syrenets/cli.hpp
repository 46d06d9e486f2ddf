#pragma once

namespace syrenets {

// Entry point behind the syrenets binary; returns the process exit code
// (0 success, 2 usage/IO, 3 numeric failure). Factored out so tests can
// drive commands in-process.
int run_cli(int argc, const char* const* argv);

} // namespace syrenets
