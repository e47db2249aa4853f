#pragma once

namespace kansae::cli {

// Entry point for the kansae binary. Returns the process exit code:
// 0 success, 2 config/validation, 3 IO, 4 numerical abort.
int run(int argc, char** argv);

}  // namespace kansae::cli
