#include "fmts/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fmts/errors.hpp"
#include "fmts/ops.hpp"

namespace fmts {

namespace {

constexpr double kUnitTol = 1e-9;

void require_unit(const Vec& x, const char* what) {
  const double n = norm2(x);
  if (std::fabs(n - 1.0) > kUnitTol) {
    throw NormalizationError(std::string(what) + " must be unit-norm, got norm " +
                             std::to_string(n));
  }
}

// Stable softmax of logits in place; returns the log of the partition sum
// relative to the subtracted max, for -log p computations.
double softmax_inplace(Vec& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& l : logits) {
    l = std::exp(l - m);
    z += l;
  }
  for (double& l : logits) l /= z;
  return std::log(z);
}

void check_part(double value, const char* name) {
  if (std::isnan(value) || !std::isfinite(value)) {
    throw NumericError(std::string("loss term ") + name + " is not finite");
  }
  if (value < 0.0) {
    throw NumericError(std::string("loss term ") + name + " is negative: " +
                       std::to_string(value));
  }
}

}  // namespace

SoftmaxResult softmax_ce(const SoftmaxClassifier& classifier, const Vec& x, int target) {
  const int D = classifier.dim();
  const int N = classifier.n_classes();
  if (static_cast<int>(x.size()) != D) {
    throw ShapeError("classifier input size " + std::to_string(x.size()) + " != " +
                     std::to_string(D));
  }
  if (target < 0 || target >= N) {
    throw IndexError("class target " + std::to_string(target) + " outside [0, " +
                     std::to_string(N - 1) + "]");
  }

  SoftmaxResult res;
  res.probs.assign(static_cast<std::size_t>(N), 0.0);
  for (int i = 0; i < N; ++i) {
    double logit = 0.0;
    for (int d = 0; d < D; ++d) logit += classifier.w.at2(d, i) * x[static_cast<std::size_t>(d)];
    res.probs[static_cast<std::size_t>(i)] = logit;
  }
  const double max_logit = *std::max_element(res.probs.begin(), res.probs.end());
  const double target_logit = res.probs[static_cast<std::size_t>(target)];
  const double log_z = softmax_inplace(res.probs);
  res.loss = log_z + max_logit - target_logit;
  if (res.loss < 0.0) res.loss = 0.0;  // guards tiny negative round-off

  res.d_x.assign(static_cast<std::size_t>(D), 0.0);
  res.d_w = Tensor({D, N});
  for (int i = 0; i < N; ++i) {
    const double d_logit = res.probs[static_cast<std::size_t>(i)] - (i == target ? 1.0 : 0.0);
    for (int d = 0; d < D; ++d) {
      res.d_x[static_cast<std::size_t>(d)] += d_logit * classifier.w.at2(d, i);
      res.d_w.at2(d, i) = d_logit * x[static_cast<std::size_t>(d)];
    }
  }
  return res;
}

SmoothL1Result smoothed_l1(const Vec& pred, const Vec& target, int n_pos) {
  if (pred.size() != target.size()) {
    throw ShapeError("smoothed_l1 size mismatch: " + std::to_string(pred.size()) + " vs " +
                     std::to_string(target.size()));
  }
  SmoothL1Result res;
  res.d_pred.assign(pred.size(), 0.0);
  if (n_pos <= 0) return res;  // no positives: defined as zero loss
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    sum += std::fabs(d) < 1.0 ? 0.5 * d * d : std::fabs(d) - 0.5;
    res.d_pred[i] = std::clamp(d, -1.0, 1.0) / n_pos;
  }
  res.loss = sum / n_pos;
  return res;
}

OimState make_oim_state(int k, int d, double gamma, double mu, int capacity, Rng& rng) {
  if (k < 1 || d < 2) throw ShapeError("identity memory needs k >= 1 and dim >= 2");
  if (!(gamma > 0.0)) throw ShapeError("gamma must be positive");
  if (mu < 0.0 || mu >= 1.0) throw ShapeError("mu must lie in [0,1)");
  if (capacity < 0) throw ShapeError("queue capacity must be >= 0");
  OimState st;
  st.v = Tensor({k, d});
  st.gamma = gamma;
  st.mu = mu;
  st.capacity = capacity;
  Vec row(static_cast<std::size_t>(d));
  for (int i = 0; i < k; ++i) {
    for (double& r : row) r = rng.uniform(-1.0, 1.0);
    const Vec unit = l2_normalize(row);
    for (int j = 0; j < d; ++j) st.v.at2(i, j) = unit[static_cast<std::size_t>(j)];
  }
  return st;
}

OimResult oim_forward(const OimState& state, const Vec& x, int label) {
  const int K = state.k();
  const int D = state.dim();
  if (static_cast<int>(x.size()) != D) {
    throw ShapeError("embedding size " + std::to_string(x.size()) + " != memory dim " +
                     std::to_string(D));
  }
  require_unit(x, "instance-matching input");
  if (label != kUnlabeledPid && (label < 0 || label >= K)) {
    throw IndexError("labeled identity " + std::to_string(label) + " outside [0, " +
                     std::to_string(K - 1) + "]");
  }

  const int n_u = static_cast<int>(state.u.size());
  OimResult res;
  res.probs.assign(static_cast<std::size_t>(K + n_u), 0.0);
  for (int i = 0; i < K; ++i) {
    double sim = 0.0;
    for (int d = 0; d < D; ++d) sim += state.v.at2(i, d) * x[static_cast<std::size_t>(d)];
    res.probs[static_cast<std::size_t>(i)] = sim / state.gamma;
  }
  for (int k = 0; k < n_u; ++k) {
    res.probs[static_cast<std::size_t>(K + k)] =
        dot(state.u[static_cast<std::size_t>(k)], x) / state.gamma;
  }
  const double max_logit = *std::max_element(res.probs.begin(), res.probs.end());
  const double target_logit =
      label >= 0 ? res.probs[static_cast<std::size_t>(label)] : 0.0;
  const double log_z = softmax_inplace(res.probs);

  res.d_x.assign(static_cast<std::size_t>(D), 0.0);
  if (label == kUnlabeledPid) return res;  // loss 0, gradient 0; queue-only sample

  res.loss = log_z + max_logit - target_logit;
  if (res.loss < 0.0) res.loss = 0.0;
  // d loss / d x = (sum_i p_i row_i - v_label) / gamma
  for (int i = 0; i < K; ++i) {
    const double coeff =
        (res.probs[static_cast<std::size_t>(i)] - (i == label ? 1.0 : 0.0)) / state.gamma;
    for (int d = 0; d < D; ++d) {
      res.d_x[static_cast<std::size_t>(d)] += coeff * state.v.at2(i, d);
    }
  }
  for (int k = 0; k < n_u; ++k) {
    const double coeff = res.probs[static_cast<std::size_t>(K + k)] / state.gamma;
    const Vec& row = state.u[static_cast<std::size_t>(k)];
    for (int d = 0; d < D; ++d) res.d_x[static_cast<std::size_t>(d)] += coeff * row[static_cast<std::size_t>(d)];
  }
  return res;
}

void oim_update(OimState& state, const Vec& x, int label) {
  const int D = state.dim();
  if (static_cast<int>(x.size()) != D) {
    throw ShapeError("embedding size " + std::to_string(x.size()) + " != memory dim " +
                     std::to_string(D));
  }
  require_unit(x, "instance-matching update");
  if (label == kUnlabeledPid) {
    if (state.capacity == 0) return;
    state.u.push_back(x);
    if (static_cast<int>(state.u.size()) > state.capacity) state.u.pop_front();
    return;
  }
  if (label < 0 || label >= state.k()) {
    throw IndexError("labeled identity " + std::to_string(label) + " outside [0, " +
                     std::to_string(state.k() - 1) + "]");
  }
  Vec blended(static_cast<std::size_t>(D));
  for (int d = 0; d < D; ++d) {
    blended[static_cast<std::size_t>(d)] =
        state.mu * state.v.at2(label, d) + (1.0 - state.mu) * x[static_cast<std::size_t>(d)];
  }
  const Vec unit = l2_normalize(blended);
  for (int d = 0; d < D; ++d) state.v.at2(label, d) = unit[static_cast<std::size_t>(d)];
}

LossReport compose_losses(const LossParts& parts) {
  check_part(parts.l_cls, "l_cls");
  check_part(parts.l_reg, "l_reg");
  check_part(parts.l_softmax, "l_softmax");
  check_part(parts.l_oim, "l_oim");
  check_part(parts.l_rpn_cls, "l_rpn_cls");
  check_part(parts.l_rpn_reg, "l_rpn_reg");
  check_part(parts.l_rpn_oim, "l_rpn_oim");
  LossReport r;
  r.l_cls = parts.l_cls;
  r.l_reg = parts.l_reg;
  r.l_softmax = parts.l_softmax;
  r.l_oim = parts.l_oim;
  r.l_rpn_cls = parts.l_rpn_cls;
  r.l_rpn_reg = parts.l_rpn_reg;
  r.l_rpn_oim = parts.l_rpn_oim;
  r.l_rpn = parts.l_rpn_cls + parts.l_rpn_reg + parts.l_rpn_oim;
  r.l_det = parts.l_cls + parts.l_reg;
  r.l_reid = parts.l_softmax + parts.l_oim;
  r.l_total = r.l_det + r.l_reid + r.l_rpn;
  return r;
}

}  // namespace fmts
