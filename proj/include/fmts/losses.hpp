#ifndef FMTS_LOSSES_HPP
#define FMTS_LOSSES_HPP

#include <deque>

#include "fmts/tensor.hpp"

namespace fmts {

// Person-label conventions shared across supervision and data:
// id >= 0 is a labeled identity, kUnlabeledPid an identity-unknown person,
// kNoPid no person at all (background sample).
constexpr int kUnlabeledPid = -1;
constexpr int kNoPid = -2;

/// Identity classifier over K labeled classes plus background. w has dims
/// [D, K+1] with one column per class; class K is background.
struct SoftmaxClassifier {
  Tensor w;

  int dim() const { return w.dim(0); }
  int n_classes() const { return w.dim(1); }
};

struct SoftmaxResult {
  double loss = 0.0;
  Vec probs;
  Vec d_x;
  Tensor d_w;
};

/// Cross-entropy over class scores w_i^T x, computed with max subtraction.
/// target is a 0-based class index. Gradient w.r.t. logits is probs - onehot.
SoftmaxResult softmax_ce(const SoftmaxClassifier& classifier, const Vec& x, int target);

struct SmoothL1Result {
  double loss = 0.0;
  Vec d_pred;
};

/// Per-coordinate huber f(d) = 0.5 d^2 for |d| < 1 else |d| - 0.5, summed and
/// divided by n_pos. n_pos == 0 (no positives in the batch) gives loss 0.
SmoothL1Result smoothed_l1(const Vec& pred, const Vec& target, int n_pos);

/**
 * Identity memory for the instance-matching loss: lookup table v (one
 * unit-norm row per labeled identity) plus a FIFO queue u of recent
 * unlabeled-person embeddings. Rows receive no gradient; they are updated
 * between optimization steps only.
 */
struct OimState {
  Tensor v;            // [K, D], unit-norm rows
  std::deque<Vec> u;   // up to `capacity` unit-norm entries, oldest first
  double gamma = 0.1;  // softmax temperature, > 0
  double mu = 0.5;     // lookup-table update momentum, in [0,1)
  int capacity = 64;

  int k() const { return v.dim(0); }
  int dim() const { return v.dim(1); }
};

/// Fresh state with seeded random unit-norm rows.
OimState make_oim_state(int k, int d, double gamma, double mu, int capacity, Rng& rng);

struct OimResult {
  double loss = 0.0;
  Vec probs;  // over K labeled rows then |u| queue entries
  Vec d_x;
};

/**
 * Instance-matching softmax over similarities to all stored rows at
 * temperature gamma. A labeled target yields -log p_target and its gradient;
 * an unlabeled sample (kUnlabeledPid) contributes no loss and no gradient,
 * it only feeds the queue via oim_update.
 */
OimResult oim_forward(const OimState& state, const Vec& x, int label);

/// Labeled t: v_t <- normalize(mu*v_t + (1-mu)*x). Unlabeled: push x, evict
/// oldest beyond capacity. Callers apply this strictly after the sgd step.
void oim_update(OimState& state, const Vec& x, int label);

struct LossParts {
  double l_cls = 0.0;      // detection head person/background cross-entropy
  double l_reg = 0.0;      // detection head box regression
  double l_softmax = 0.0;  // re-id identity cross-entropy
  double l_oim = 0.0;      // re-id instance matching
  double l_rpn_cls = 0.0;
  double l_rpn_reg = 0.0;
  double l_rpn_oim = 0.0;
};

struct LossReport {
  double l_cls = 0.0, l_reg = 0.0, l_softmax = 0.0, l_oim = 0.0;
  double l_rpn_cls = 0.0, l_rpn_reg = 0.0, l_rpn_oim = 0.0;
  double l_rpn = 0.0, l_det = 0.0, l_reid = 0.0, l_total = 0.0;
};

/// Sums the parts: l_det = cls+reg, l_reid = softmax+oim, l_rpn = its three
/// terms, l_total = det+reid+rpn. Non-finite or negative parts fail fast
/// naming the offending term. Stage-disabled terms are simply 0.
LossReport compose_losses(const LossParts& parts);

}  // namespace fmts

#endif
