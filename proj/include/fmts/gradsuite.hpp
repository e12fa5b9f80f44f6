#ifndef FMTS_GRADSUITE_HPP
#define FMTS_GRADSUITE_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace fmts {

struct OpCheckResult {
  std::string op;
  int instances = 0;
  std::size_t checked = 0;  // coordinates compared across all instances
  std::size_t skipped = 0;  // coordinates excluded as kinks or argmax ties
  double max_rel_err = 0.0;
  bool pass = false;
};

struct SuiteOptions {
  std::uint64_t seed = 2024;
  int instances = 20;  // per op
  // Forced-failure hook for the harness: perturbs one analytic gradient so
  // the suite must report a failure.
  bool corrupt = false;
};

/// Central finite differences against the analytic backward of every
/// differentiable op, plus the full training-step composite. Coordinates
/// whose difference quotient is step-dependent (kink or argmax flip in
/// range) are skipped, never silently passed.
std::vector<OpCheckResult> run_gradient_suite(const SuiteOptions& opts);

std::string format_suite_table(const std::vector<OpCheckResult>& results);
bool suite_passed(const std::vector<OpCheckResult>& results);

}  // namespace fmts

#endif
