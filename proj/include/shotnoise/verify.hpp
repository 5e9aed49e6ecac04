#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace shotnoise {

struct CriterionResult {
  std::string id;
  std::string description;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct VerifyOptions {
  std::string benchmark_dir = "configs";
  double tolerance_scale = 1.0;  // < 1 tightens every tolerance
  std::uint64_t seed = 42;
  int threads = 1;
  std::string scratch_dir;  // determinism artifacts; empty uses a temp dir
};

/// Runs the acceptance criteria A1..A8 against the bundled benchmark models.
std::vector<CriterionResult> run_acceptance_suite(const VerifyOptions& opts);

/// One line per criterion plus a PASS/FAIL summary; returns true when all pass.
bool print_acceptance_results(const std::vector<CriterionResult>& results);

}  // namespace shotnoise
