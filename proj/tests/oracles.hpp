#ifndef FMTS_TESTS_ORACLES_HPP
#define FMTS_TESTS_ORACLES_HPP

// Brute-force reference implementations the fast library code is tested
// against. Everything here trades speed for obviousness: quadratic loops,
// no caching, no shared helpers with the production code.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "fmts/geometry.hpp"
#include "fmts/tensor.hpp"

namespace oracle {

inline double box_iou(const fmts::Box& a, const fmts::Box& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Quadratic greedy suppression: repeatedly take the best-scored unvisited
// box (ties by lower index) and drop every unvisited box overlapping it
// strictly above the threshold.
inline std::vector<int> nms(const std::vector<fmts::Box>& boxes,
                            const std::vector<double>& scores, double thresh) {
  const std::size_t n = boxes.size();
  std::vector<bool> removed(n, false), visited(n, false);
  std::vector<int> kept;
  for (;;) {
    int best = -1;
    for (std::size_t i = 0; i < n; ++i) {
      if (removed[i] || visited[i]) continue;
      if (best < 0 || scores[i] > scores[static_cast<std::size_t>(best)]) {
        best = static_cast<int>(i);
      }
    }
    if (best < 0) break;
    visited[static_cast<std::size_t>(best)] = true;
    kept.push_back(best);
    for (std::size_t i = 0; i < n; ++i) {
      if (removed[i] || visited[i]) continue;
      if (box_iou(boxes[static_cast<std::size_t>(best)], boxes[i]) > thresh) {
        removed[i] = true;
      }
    }
  }
  return kept;
}

// AP straight from the definition: walk the ranked list, at every match add
// precision-at-that-rank, divide by the number of positives.
inline double average_precision(const std::vector<bool>& is_match, int n_positives) {
  double sum = 0.0;
  int hits = 0;
  for (std::size_t r = 0; r < is_match.size(); ++r) {
    if (!is_match[r]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return sum / n_positives;
}

inline int cmc_hit(const std::vector<bool>& is_match, int k) {
  for (std::size_t r = 0; r < is_match.size() && r < static_cast<std::size_t>(k); ++r) {
    if (is_match[r]) return 1;
  }
  return 0;
}

// Plain scalar softmax cross-entropy, no max-subtraction, no tensors.
struct SoftmaxRef {
  double loss;
  std::vector<double> probs;
};

inline SoftmaxRef softmax_ce(const std::vector<std::vector<double>>& w_cols,
                             const std::vector<double>& x, int target) {
  std::vector<double> e(w_cols.size());
  double z = 0.0;
  for (std::size_t i = 0; i < w_cols.size(); ++i) {
    double logit = 0.0;
    for (std::size_t d = 0; d < x.size(); ++d) logit += w_cols[i][d] * x[d];
    e[i] = std::exp(logit);
    z += e[i];
  }
  SoftmaxRef out{0.0, {}};
  out.probs.resize(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) out.probs[i] = e[i] / z;
  out.loss = -std::log(out.probs[static_cast<std::size_t>(target)]);
  return out;
}

// Scalar instance-matching probabilities over stored rows v (labeled) and
// u (queue), temperature gamma.
inline SoftmaxRef oim(const std::vector<std::vector<double>>& v,
                      const std::vector<std::vector<double>>& u,
                      const std::vector<double>& x, double gamma, int target) {
  std::vector<double> e;
  double z = 0.0;
  auto push = [&](const std::vector<double>& row) {
    double s = 0.0;
    for (std::size_t d = 0; d < x.size(); ++d) s += row[d] * x[d];
    e.push_back(std::exp(s / gamma));
    z += e.back();
  };
  for (const auto& row : v) push(row);
  for (const auto& row : u) push(row);
  SoftmaxRef out{0.0, {}};
  out.probs.resize(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) out.probs[i] = e[i] / z;
  if (target >= 0) out.loss = -std::log(out.probs[static_cast<std::size_t>(target)]);
  return out;
}

inline fmts::Box random_box(fmts::Rng& rng, double extent) {
  const double x1 = rng.uniform(0.0, extent - 2.0);
  const double y1 = rng.uniform(0.0, extent - 2.0);
  const double x2 = x1 + rng.uniform(1.0, extent - x1);
  const double y2 = y1 + rng.uniform(1.0, extent - y1);
  return {x1, y1, x2, y2};
}

inline std::vector<double> random_unit(fmts::Rng& rng, int dim) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  double n2 = 0.0;
  do {
    n2 = 0.0;
    for (double& c : v) {
      c = rng.uniform(-1.0, 1.0);
      n2 += c * c;
    }
  } while (n2 < 1e-4);
  const double inv = 1.0 / std::sqrt(n2);
  for (double& c : v) c *= inv;
  return v;
}

}  // namespace oracle

#endif
