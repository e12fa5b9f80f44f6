#include "fmts/gradcheck.hpp"

#include <cmath>
#include <string>

#include "fmts/errors.hpp"

namespace fmts {

FdReport finite_diff_check(const std::function<double(const Vec&)>& f, const Vec& point,
                           const Vec& analytic, double step,
                           const std::function<bool(std::size_t)>& checkable) {
  if (point.size() != analytic.size()) {
    throw ShapeError("gradient size " + std::to_string(analytic.size()) +
                     " != point size " + std::to_string(point.size()));
  }
  if (!(step > 0.0)) throw ShapeError("fd step must be positive");

  FdReport rep;
  Vec probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    if (checkable && !checkable(i)) {
      ++rep.skipped;
      continue;
    }
    probe[i] = point[i] + step;
    const double fp = f(probe);
    probe[i] = point[i] - step;
    const double fm = f(probe);
    probe[i] = point[i];
    const double fd = (fp - fm) / (2.0 * step);
    if (!std::isfinite(fd)) {
      throw NumericError("non-finite finite difference at coordinate " + std::to_string(i));
    }
    const double rel = std::fabs(analytic[i] - fd) / std::max(1.0, std::fabs(analytic[i]));
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
    }
    ++rep.checked;
  }
  return rep;
}

}  // namespace fmts
