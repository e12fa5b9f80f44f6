#include "fmts/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "fmts/errors.hpp"
#include "fmts/image.hpp"

namespace fmts {

namespace {

constexpr std::uint64_t kTagParamInit = 11;
constexpr std::uint64_t kTagOimInit = 12;
constexpr std::uint64_t kTagSampling = 13;

struct BestMatch {
  double iou = 0.0;
  int gt = -1;
};

std::vector<BestMatch> best_gt_per_box(const std::vector<Box>& boxes,
                                       const std::vector<Box>& gt_boxes) {
  std::vector<BestMatch> best(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(boxes[i], gt_boxes[g]);
      if (v > best[i].iou) best[i] = {v, static_cast<int>(g)};  // ties keep lowest gt
    }
  }
  return best;
}

}  // namespace

void validate_config(const TrainConfig& cfg) {
  if (!(cfg.lr0 > 0.0)) throw ConfigError("lr0 must be positive");
  if (!(cfg.decay_factor > 0.0 && cfg.decay_factor <= 1.0)) {
    throw ConfigError("decay_factor must lie in (0,1]");
  }
  if (cfg.decay_every < 1) throw ConfigError("decay_every must be >= 1");
  if (cfg.total_iters < 1) throw ConfigError("total_iters must be >= 1");
  if (!(cfg.stage1_end() < cfg.stage2_end() && cfg.stage2_end() <= cfg.total_iters)) {
    throw ConfigError("stage boundaries must satisfy s1_end < s2_end <= total_iters");
  }
  if (cfg.stage1_end() < 0) throw ConfigError("stage boundaries must be non-negative");
  if (!(cfg.rpn_neg_iou > 0.0 && cfg.rpn_neg_iou <= cfg.rpn_pos_iou && cfg.rpn_pos_iou < 1.0)) {
    throw ConfigError("rpn iou thresholds must satisfy 0 < neg <= pos < 1");
  }
  if (!(cfg.head_fg_iou > 0.0 && cfg.head_fg_iou < 1.0)) {
    throw ConfigError("head_fg_iou must lie in (0,1)");
  }
  if (cfg.rpn_batch < 1 || cfg.head_batch < 1) throw ConfigError("batch sizes must be >= 1");
  if (!(cfg.fg_fraction > 0.0 && cfg.fg_fraction <= 1.0)) {
    throw ConfigError("fg_fraction must lie in (0,1]");
  }
  if (!(cfg.oim_gamma > 0.0)) throw ConfigError("oim_gamma must be positive");
  if (cfg.oim_mu < 0.0 || cfg.oim_mu >= 1.0) throw ConfigError("oim_mu must lie in [0,1)");
  if (cfg.oim_capacity < 0) throw ConfigError("oim_capacity must be >= 0");
  if (cfg.snapshot_every < 0) throw ConfigError("snapshot_every must be >= 0");
}

AssignedTargets assign_rpn_targets(const std::vector<Box>& anchors,
                                   const std::vector<Box>& gt_boxes,
                                   const std::vector<int>& gt_pids, const TrainConfig& cfg) {
  if (gt_boxes.size() != gt_pids.size()) {
    throw ShapeError("gt boxes and pids must be parallel");
  }
  AssignedTargets out;
  out.obj.assign(anchors.size(), ObjTarget::negative);
  out.reg.assign(anchors.size(), {0.0, 0.0, 0.0, 0.0});
  out.pid.assign(anchors.size(), kNoPid);
  if (gt_boxes.empty()) return out;  // nothing to match: all negative

  const std::vector<BestMatch> best = best_gt_per_box(anchors, gt_boxes);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (best[i].iou >= cfg.rpn_pos_iou) {
      out.obj[i] = ObjTarget::positive;
    } else if (best[i].iou <= cfg.rpn_neg_iou) {
      out.obj[i] = ObjTarget::negative;
    } else {
      out.obj[i] = ObjTarget::ignore;
    }
  }
  // A ground truth's best anchor is positive even below the threshold.
  for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
    double best_iou = 0.0;
    int best_anchor = -1;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      const double v = iou(anchors[i], gt_boxes[g]);
      if (v > best_iou) {
        best_iou = v;
        best_anchor = static_cast<int>(i);
      }
    }
    if (best_anchor >= 0) {
      out.obj[static_cast<std::size_t>(best_anchor)] = ObjTarget::positive;
      // Rebind its target to this gt only if it is at least as good a match.
      const BestMatch& bm = best[static_cast<std::size_t>(best_anchor)];
      if (bm.gt < 0 || best_iou >= bm.iou) {
        out.reg[static_cast<std::size_t>(best_anchor)] =
            encode_box(gt_boxes[g], anchors[static_cast<std::size_t>(best_anchor)]);
        out.pid[static_cast<std::size_t>(best_anchor)] = gt_pids[g];
      }
    }
  }
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (out.obj[i] == ObjTarget::positive && out.pid[i] == kNoPid) {
      out.reg[i] = encode_box(gt_boxes[static_cast<std::size_t>(best[i].gt)], anchors[i]);
      out.pid[i] = gt_pids[static_cast<std::size_t>(best[i].gt)];
    }
  }
  return out;
}

AssignedTargets assign_head_targets(const std::vector<Box>& candidates,
                                    const std::vector<Box>& gt_boxes,
                                    const std::vector<int>& gt_pids, const TrainConfig& cfg) {
  if (gt_boxes.size() != gt_pids.size()) {
    throw ShapeError("gt boxes and pids must be parallel");
  }
  AssignedTargets out;
  out.obj.assign(candidates.size(), ObjTarget::negative);
  out.reg.assign(candidates.size(), {0.0, 0.0, 0.0, 0.0});
  out.pid.assign(candidates.size(), kNoPid);
  if (gt_boxes.empty()) return out;

  const std::vector<BestMatch> best = best_gt_per_box(candidates, gt_boxes);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (best[i].iou >= cfg.head_fg_iou) {
      out.obj[i] = ObjTarget::positive;
      out.reg[i] = encode_box(gt_boxes[static_cast<std::size_t>(best[i].gt)], candidates[i]);
      out.pid[i] = gt_pids[static_cast<std::size_t>(best[i].gt)];
    }
  }
  return out;
}

std::vector<int> sample_minibatch(const std::vector<ObjTarget>& targets, int batch,
                                  double fg_fraction, Rng& rng) {
  if (batch < 1) throw ConfigError("batch must be >= 1");
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == ObjTarget::positive) pos.push_back(static_cast<int>(i));
    if (targets[i] == ObjTarget::negative) neg.push_back(static_cast<int>(i));
  }
  const int fg_quota = static_cast<int>(fg_fraction * batch);
  rng.shuffle(pos);
  rng.shuffle(neg);
  int n_fg = std::min<int>(fg_quota, static_cast<int>(pos.size()));
  const int n_bg = std::min<int>(batch - n_fg, static_cast<int>(neg.size()));
  if (n_fg + n_bg < batch) {  // negatives ran short: top up with positives
    n_fg = std::min<int>(batch - n_bg, static_cast<int>(pos.size()));
  }
  std::vector<int> out(pos.begin(), pos.begin() + n_fg);
  out.insert(out.end(), neg.begin(), neg.begin() + n_bg);
  return out;
}

double lr_schedule(const TrainConfig& cfg, int t) {
  if (t < 0 || t >= cfg.total_iters) {
    throw IndexError("iteration " + std::to_string(t) + " outside [0, " +
                     std::to_string(cfg.total_iters) + ")");
  }
  return cfg.lr0 * std::pow(cfg.decay_factor, t / cfg.decay_every);
}

void sgd_step(ModelParams& params, const ModelGrads& grads, double lr) {
  std::vector<std::pair<std::string, Tensor*>> ps;
  params.for_each([&](const std::string& name, Tensor& t) { ps.emplace_back(name, &t); });
  std::vector<const Tensor*> gs;
  grads.for_each([&](const std::string&, const Tensor& t) { gs.push_back(&t); });
  if (ps.size() != gs.size()) throw ShapeError("params/grads structure mismatch");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (!gs[i]->all_finite()) {
      throw NumericError("non-finite gradient for tensor " + ps[i].first);
    }
    if (!ps[i].second->same_shape(*gs[i])) {
      throw ShapeError("gradient shape mismatch for tensor " + ps[i].first);
    }
    Vec& p = ps[i].second->raw();
    const Vec& g = gs[i]->data();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * g[k];
  }
}

void write_train_log_csv(const TrainLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write train log " + path);
  out << "iter,stage,lr,l_cls,l_reg,l_oim,l_softmax,l_rpn,l_det,l_reid,l_total\n";
  for (const TrainLogEntry& e : log.entries) {
    out << e.iter << ',' << e.stage << ',' << shortest_double(e.lr) << ','
        << shortest_double(e.report.l_cls) << ',' << shortest_double(e.report.l_reg) << ','
        << shortest_double(e.report.l_oim) << ',' << shortest_double(e.report.l_softmax) << ','
        << shortest_double(e.report.l_rpn) << ',' << shortest_double(e.report.l_det) << ','
        << shortest_double(e.report.l_reid) << ',' << shortest_double(e.report.l_total) << '\n';
  }
  if (!out) throw IoError("failed writing train log " + path);
}

TrainResult train(const Dataset& ds, const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const SnapshotFn& snapshot) {
  validate_config(mcfg);
  validate_config(tcfg);
  if (ds.scenes.empty()) throw ConfigError("training dataset is empty");
  const int K = ds.n_labeled();
  if (K == 0) throw ConfigError("training dataset has no labeled identities");

  Rng init_rng(Rng::substream(tcfg.seed, kTagParamInit));
  Rng oim_rng(Rng::substream(tcfg.seed, kTagOimInit));
  Rng sample_rng(Rng::substream(tcfg.seed, kTagSampling));

  TrainResult res{init_params(mcfg, K, init_rng),
                  make_oim_state(K, mcfg.embedding_dim, tcfg.oim_gamma, tcfg.oim_mu,
                                 tcfg.oim_capacity, oim_rng),
                  {}};
  const std::vector<Box> anchors = model_anchors(mcfg);
  const int n_scenes = static_cast<int>(ds.scenes.size());

  for (int t = 0; t < tcfg.total_iters; ++t) {
    const int stage = t < tcfg.stage1_end() ? 0 : (t < tcfg.stage2_end() ? 1 : 2);
    const double lr = lr_schedule(tcfg, t);
    const int scene_idx = t % n_scenes;
    const SceneAnnotation& scene = ds.scenes[static_cast<std::size_t>(scene_idx)];
    const Tensor image = image_to_tensor(ds.images[static_cast<std::size_t>(scene_idx)]);

    const TrainStepFwd fwd = begin_train_step(res.params, mcfg, image);

    IterationPlan plan;
    plan.use_rpn_oim = stage >= 1 && tcfg.rpn_person_labels;
    plan.use_head_oim = stage >= 1;
    plan.use_reid_softmax = stage >= 2 && tcfg.reid_multiple_loss;

    const AssignedTargets rpn_t = assign_rpn_targets(anchors, scene.boxes, scene.pids, tcfg);
    for (int idx : sample_minibatch(rpn_t.obj, tcfg.rpn_batch, tcfg.fg_fraction, sample_rng)) {
      plan.rpn_anchor.push_back(idx);
      plan.rpn_is_person.push_back(rpn_t.obj[static_cast<std::size_t>(idx)] ==
                                   ObjTarget::positive);
      plan.rpn_reg_target.push_back(rpn_t.reg[static_cast<std::size_t>(idx)]);
    }

    if (plan.use_rpn_oim) {
      const AssignedTargets prop_t =
          assign_head_targets(fwd.proposals, scene.boxes, scene.pids, tcfg);
      for (std::size_t i = 0; i < fwd.proposals.size(); ++i) {
        if (prop_t.obj[i] == ObjTarget::positive && prop_t.pid[i] >= 0) {
          plan.rpn_oim_boxes.push_back(fwd.proposals[i]);
          plan.rpn_oim_labels.push_back(prop_t.pid[i]);
        }
      }
    }

    // Ground-truth boxes join the candidate pool so the head always sees
    // well-placed foreground samples, proposals supply the rest.
    std::vector<Box> candidates = fwd.proposals;
    candidates.insert(candidates.end(), scene.boxes.begin(), scene.boxes.end());
    const AssignedTargets head_t =
        assign_head_targets(candidates, scene.boxes, scene.pids, tcfg);
    for (int idx : sample_minibatch(head_t.obj, tcfg.head_batch, tcfg.fg_fraction, sample_rng)) {
      plan.head_boxes.push_back(candidates[static_cast<std::size_t>(idx)]);
      plan.head_is_person.push_back(head_t.obj[static_cast<std::size_t>(idx)] ==
                                    ObjTarget::positive);
      plan.head_reg_target.push_back(head_t.reg[static_cast<std::size_t>(idx)]);
      plan.head_pids.push_back(head_t.pid[static_cast<std::size_t>(idx)]);
    }

    TrainLogEntry entry{t, stage, lr, {}};
    if (plan.rpn_anchor.empty() && plan.head_boxes.empty()) {
      ++res.log.skipped_iterations;
      res.log.entries.push_back(entry);  // zero losses, parameters untouched
      continue;
    }

    ModelGrads grads = zeros_like(res.params);
    PendingOimUpdates pending;
    const LossParts parts =
        finish_train_step(res.params, mcfg, res.oim, fwd, plan, grads, pending);
    entry.report = compose_losses(parts);

    sgd_step(res.params, grads, lr);
    // Memory updates strictly after the gradient step: labeled embeddings
    // blend into their lookup row, unlabeled ones enter the queue.
    for (std::size_t i = 0; i < pending.embeddings.size(); ++i) {
      oim_update(res.oim, pending.embeddings[i], pending.labels[i]);
    }

    res.log.entries.push_back(entry);
    if (snapshot && tcfg.snapshot_every > 0 && (t + 1) % tcfg.snapshot_every == 0) {
      snapshot(t, res.params, res.oim);
    }
  }
  return res;
}

}  // namespace fmts
