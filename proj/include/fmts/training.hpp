#ifndef FMTS_TRAINING_HPP
#define FMTS_TRAINING_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fmts/data.hpp"
#include "fmts/losses.hpp"
#include "fmts/model.hpp"

namespace fmts {

struct TrainConfig {
  double lr0 = 0.001;
  double decay_factor = 0.9;
  int decay_every = 2000;
  int total_iters = 15000;
  // Stage boundaries; negative means the 20% / 50% default split.
  int s1_end = -1;
  int s2_end = -1;
  double rpn_pos_iou = 0.7;
  double rpn_neg_iou = 0.3;
  double head_fg_iou = 0.5;  // inclusive
  int rpn_batch = 32;
  int head_batch = 32;
  double fg_fraction = 0.25;
  std::uint64_t seed = 1;
  double oim_gamma = 0.1;
  double oim_mu = 0.5;
  int oim_capacity = 64;
  // Ablation toggles: identity supervision inside the proposal network, and
  // the identity softmax alongside the instance-matching term.
  bool rpn_person_labels = true;
  bool reid_multiple_loss = true;
  int snapshot_every = 0;  // periodic snapshot callback cadence, 0 = off

  int stage1_end() const { return s1_end >= 0 ? s1_end : total_iters / 5; }
  int stage2_end() const { return s2_end >= 0 ? s2_end : total_iters / 2; }
};

void validate_config(const TrainConfig& cfg);

enum class ObjTarget { positive, negative, ignore };

struct AssignedTargets {
  std::vector<ObjTarget> obj;
  std::vector<std::array<double, 4>> reg;  // meaningful for positives only
  std::vector<int> pid;  // pid >= 0, kUnlabeledPid, or kNoPid
};

/**
 * Anchor is positive when its best IoU reaches rpn_pos_iou or when it is a
 * ground-truth box's best anchor (lowest index on ties); negative when its
 * best IoU is at most rpn_neg_iou; ignored otherwise. Positives inherit the
 * pid and encoded regression target of their best-overlap ground truth.
 */
AssignedTargets assign_rpn_targets(const std::vector<Box>& anchors,
                                   const std::vector<Box>& gt_boxes,
                                   const std::vector<int>& gt_pids, const TrainConfig& cfg);

/// Candidate is foreground at IoU >= head_fg_iou (inclusive), background
/// otherwise; no ignore band at the head.
AssignedTargets assign_head_targets(const std::vector<Box>& candidates,
                                    const std::vector<Box>& gt_boxes,
                                    const std::vector<int>& gt_pids, const TrainConfig& cfg);

/// Up to fg_fraction*batch positives without replacement, the rest
/// negatives; shortfalls fill from the other pool. Positives first.
std::vector<int> sample_minibatch(const std::vector<ObjTarget>& targets, int batch,
                                  double fg_fraction, Rng& rng);

double lr_schedule(const TrainConfig& cfg, int t);

/// p <- p - lr * g on every named tensor; fails fast on a non-finite
/// gradient, naming the tensor.
void sgd_step(ModelParams& params, const ModelGrads& grads, double lr);

struct TrainLogEntry {
  int iter = 0;
  int stage = 0;
  double lr = 0.0;
  LossReport report;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;
  int skipped_iterations = 0;
};

void write_train_log_csv(const TrainLog& log, const std::string& path);

struct TrainResult {
  ModelParams params;
  OimState oim;
  TrainLog log;
};

using SnapshotFn =
    std::function<void(int iter, const ModelParams& params, const OimState& oim)>;

/**
 * Three stages over one continuously trained parameter set, one scene per
 * iteration (cycled in manifest order):
 *   stage 0 (t < stage1_end): detection warmup, proposal cls+reg and head
 *     cls+reg only;
 *   stage 1 (t < stage2_end): adds instance matching at the head and, when
 *     enabled, in the proposal network;
 *   stage 2: adds the identity softmax (when enabled).
 * Identity-memory updates are applied strictly after each sgd step.
 */
TrainResult train(const Dataset& ds, const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const SnapshotFn& snapshot = nullptr);

}  // namespace fmts

#endif
