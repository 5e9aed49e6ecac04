#pragma once

#include <string>
#include <vector>

namespace shotnoise::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNonConvergence = 3;
inline constexpr int kExitInfeasible = 4;

/// Parses `shotnoise <command> --config FILE [--seed N] [--out DIR]
/// [--threads N]`, runs the command and writes its artifacts plus a
/// manifest.json into the output directory. Returns the process exit code.
int dispatch(const std::vector<std::string>& args);

int dispatch(int argc, char** argv);

}  // namespace shotnoise::cli
