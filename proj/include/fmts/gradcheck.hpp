#ifndef FMTS_GRADCHECK_HPP
#define FMTS_GRADCHECK_HPP

#include <cstddef>
#include <functional>

#include "fmts/tensor.hpp"

namespace fmts {

struct FdReport {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

constexpr double kFdStep = 1e-5;
constexpr double kFdTol = 1e-4;

/**
 * Central-difference check of an analytic gradient.
 *
 * For each coordinate i the scalar function f is evaluated at point +- step*e_i
 * and compared as rel_err = |analytic - fd| / max(1, |analytic|). Coordinates
 * where `checkable` returns false (near kinks of relu/max/abs) are skipped and
 * counted, never silently dropped.
 */
FdReport finite_diff_check(const std::function<double(const Vec&)>& f, const Vec& point,
                           const Vec& analytic, double step = kFdStep,
                           const std::function<bool(std::size_t)>& checkable = nullptr);

}  // namespace fmts

#endif
