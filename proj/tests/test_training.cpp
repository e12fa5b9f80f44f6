#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "fmts/data.hpp"
#include "fmts/errors.hpp"
#include "fmts/model.hpp"
#include "fmts/training.hpp"
#include "oracles.hpp"

using namespace fmts;

namespace {

TrainConfig base_train_config() {
  TrainConfig cfg;
  cfg.total_iters = 300;
  cfg.rpn_batch = 8;
  return cfg;
}

// Small but fully valid dataset shared by the train() cases.
const Dataset& smoke_dataset() {
  static const Dataset ds = [] {
    SynthConfig scfg;
    scfg.n_identities = 4;
    scfg.scenes_train = 10;
    scfg.scenes_test = 8;
    scfg.seed = 11;
    const std::string dir = "train_smoke_ds";
    std::filesystem::remove_all(dir);
    generate_synthetic(scfg, dir);
    return load_dataset(dir + "/train/manifest.json");
  }();
  return ds;
}

}  // namespace

TEST_CASE("train config validation pins the schedule invariants") {
  TrainConfig cfg;
  CHECK_NOTHROW(validate_config(cfg));
  CHECK(cfg.stage1_end() == 3000);
  CHECK(cfg.stage2_end() == 7500);

  TrainConfig bad = cfg;
  bad.s1_end = 100;
  bad.s2_end = 100;  // stages must be strictly ordered
  CHECK_THROWS_AS(validate_config(bad), ConfigError);

  bad = cfg;
  bad.rpn_neg_iou = 0.8;  // above rpn_pos_iou
  CHECK_THROWS_AS(validate_config(bad), ConfigError);

  bad = cfg;
  bad.fg_fraction = 0.0;
  CHECK_THROWS_AS(validate_config(bad), ConfigError);

  bad = cfg;
  bad.oim_mu = 1.0;
  CHECK_THROWS_AS(validate_config(bad), ConfigError);
}

TEST_CASE("anchors identical to ground truth become positives with its pid") {
  TrainConfig cfg;
  const std::vector<Box> gts = {{10, 10, 26, 26}, {50, 50, 70, 70}};
  const std::vector<int> pids = {3, kUnlabeledPid};
  const std::vector<Box> anchors = {{10, 10, 26, 26}, {50, 50, 70, 70}, {80, 2, 90, 12}};

  const AssignedTargets t = assign_rpn_targets(anchors, gts, pids, cfg);
  REQUIRE(t.obj.size() == 3);
  CHECK(t.obj[0] == ObjTarget::positive);
  CHECK(t.obj[1] == ObjTarget::positive);
  CHECK(t.obj[2] == ObjTarget::negative);  // IoU 0 with everything
  CHECK(t.pid[0] == 3);
  CHECK(t.pid[1] == kUnlabeledPid);
  CHECK(t.pid[2] == kNoPid);
  // Perfect overlap encodes to zero deltas.
  for (double v : t.reg[0]) CHECK(std::fabs(v) <= 1e-12);
}

TEST_CASE("rpn assignment carves positive, ignore and negative bands") {
  TrainConfig cfg;  // pos 0.7, neg 0.3
  const std::vector<Box> gts = {{0, 0, 20, 20}};
  const std::vector<int> pids = {1};
  // IoU with the gt: 1.0, ~0.61 (in the ignore band), ~0.09 (negative).
  const std::vector<Box> anchors = {{0, 0, 20, 20}, {0, 5, 20, 25}, {15, 15, 35, 35}};

  const AssignedTargets t = assign_rpn_targets(anchors, gts, pids, cfg);
  CHECK(t.obj[0] == ObjTarget::positive);
  CHECK(t.obj[1] == ObjTarget::ignore);
  CHECK(t.obj[2] == ObjTarget::negative);
}

TEST_CASE("every ground truth claims its best anchor even below the threshold") {
  TrainConfig cfg;
  const std::vector<Box> gts = {{8, 8, 24, 24}};
  const std::vector<int> pids = {5};
  // Best IoU is ~0.52: below rpn_pos_iou but forced positive as the gt's best.
  const std::vector<Box> anchors = {{4, 4, 20, 20}, {40, 40, 56, 56}};

  const AssignedTargets t = assign_rpn_targets(anchors, gts, pids, cfg);
  CHECK(t.obj[0] == ObjTarget::positive);
  CHECK(t.pid[0] == 5);
  CHECK(t.obj[1] == ObjTarget::negative);

  // On a tie between equally good anchors (IoU 0.625 each, inside the ignore
  // band) the forced positive lands on the lowest anchor index only.
  const std::vector<Box> tied = {{8, 8, 24, 18}, {8, 14, 24, 24}, {0, 0, 4, 4}};
  const AssignedTargets t2 = assign_rpn_targets(tied, gts, pids, cfg);
  CHECK(t2.obj[0] == ObjTarget::positive);
  CHECK(t2.obj[1] == ObjTarget::ignore);
}

TEST_CASE("rpn assignment without ground truth is all negative") {
  TrainConfig cfg;
  const std::vector<Box> anchors = {{0, 0, 16, 16}, {8, 8, 24, 24}};
  const AssignedTargets t = assign_rpn_targets(anchors, {}, {}, cfg);
  for (const ObjTarget o : t.obj) CHECK(o == ObjTarget::negative);
  for (const int p : t.pid) CHECK(p == kNoPid);
}

TEST_CASE("head assignment is inclusive at the foreground threshold") {
  TrainConfig cfg;  // head_fg_iou 0.5
  const std::vector<Box> gts = {{0, 0, 10, 10}};
  const std::vector<int> pids = {2};
  // IoU exactly 0.5, just under, and disjoint.
  const std::vector<Box> cands = {{0, 0, 10, 5}, {0, 0, 10, 4.9}, {50, 50, 60, 60}};

  const AssignedTargets t = assign_head_targets(cands, gts, pids, cfg);
  CHECK(t.obj[0] == ObjTarget::positive);
  CHECK(t.obj[1] == ObjTarget::negative);  // no ignore band at the head
  CHECK(t.obj[2] == ObjTarget::negative);
  CHECK(t.pid[0] == 2);
  CHECK(t.pid[1] == kNoPid);
  // Foreground regression target points from candidate to its gt.
  const std::array<double, 4> expect = encode_box(gts[0], cands[0]);
  for (int i = 0; i < 4; ++i) CHECK(t.reg[0][i] == expect[i]);
}

TEST_CASE("minibatch sampling respects the foreground quota") {
  std::vector<ObjTarget> targets(100, ObjTarget::negative);
  for (int i = 0; i < 40; ++i) targets[static_cast<std::size_t>(i)] = ObjTarget::positive;
  for (int i = 90; i < 100; ++i) targets[static_cast<std::size_t>(i)] = ObjTarget::ignore;

  Rng rng(5);
  const std::vector<int> picks = sample_minibatch(targets, 32, 0.25, rng);
  REQUIRE(picks.size() == 32);
  int n_pos = 0;
  for (int idx : picks) {
    CHECK(targets[static_cast<std::size_t>(idx)] != ObjTarget::ignore);
    if (targets[static_cast<std::size_t>(idx)] == ObjTarget::positive) ++n_pos;
  }
  CHECK(n_pos == 8);  // fg_fraction * batch

  // No duplicate picks.
  std::vector<int> sorted = picks;
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
}

TEST_CASE("minibatch sampling fills shortfalls from the other pool") {
  // Scarce positives: the two available ride along with 30 negatives.
  std::vector<ObjTarget> scarce(64, ObjTarget::negative);
  scarce[3] = scarce[40] = ObjTarget::positive;
  Rng rng(6);
  const std::vector<int> a = sample_minibatch(scarce, 32, 0.25, rng);
  REQUIRE(a.size() == 32);
  int n_pos = 0;
  for (int idx : a) n_pos += scarce[static_cast<std::size_t>(idx)] == ObjTarget::positive;
  CHECK(n_pos == 2);

  // Scarce negatives: positives top the batch back up.
  std::vector<ObjTarget> negscarce(40, ObjTarget::positive);
  for (int i = 0; i < 3; ++i) negscarce[static_cast<std::size_t>(i)] = ObjTarget::negative;
  const std::vector<int> b = sample_minibatch(negscarce, 16, 0.25, rng);
  REQUIRE(b.size() == 16);
  int n_neg = 0;
  for (int idx : b) n_neg += negscarce[static_cast<std::size_t>(idx)] == ObjTarget::negative;
  CHECK(n_neg == 3);

  // Both scarce: the batch shrinks rather than repeating an index.
  std::vector<ObjTarget> tiny(4, ObjTarget::positive);
  tiny[0] = ObjTarget::negative;
  CHECK(sample_minibatch(tiny, 32, 0.25, rng).size() == 4);

  CHECK_THROWS_AS(sample_minibatch(tiny, 0, 0.25, rng), ConfigError);
}

TEST_CASE("minibatch sampling is deterministic per rng stream") {
  std::vector<ObjTarget> targets(200, ObjTarget::negative);
  for (int i = 0; i < 50; ++i) targets[static_cast<std::size_t>(i * 3)] = ObjTarget::positive;
  Rng a(99), b(99);
  CHECK(sample_minibatch(targets, 32, 0.25, a) == sample_minibatch(targets, 32, 0.25, b));
  CHECK(sample_minibatch(targets, 32, 0.25, a) == sample_minibatch(targets, 32, 0.25, b));
}

TEST_CASE("learning rate decays stepwise") {
  TrainConfig cfg;
  cfg.total_iters = 4000;
  cfg.decay_every = 1000;
  CHECK(lr_schedule(cfg, 0) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(lr_schedule(cfg, 999) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(lr_schedule(cfg, 1000) == doctest::Approx(0.0009).epsilon(1e-12));
  CHECK(lr_schedule(cfg, 2500) == doctest::Approx(0.00081).epsilon(1e-12));
  CHECK_THROWS_AS(lr_schedule(cfg, -1), IndexError);
  CHECK_THROWS_AS(lr_schedule(cfg, 4000), IndexError);

  cfg.decay_factor = 1.0;  // constant schedule
  CHECK(lr_schedule(cfg, 3999) == 0.001);
}

TEST_CASE("sgd_step applies p -= lr * g and names bad tensors") {
  ModelConfig mcfg;
  mcfg.channels = {4};
  mcfg.image_h = mcfg.image_w = 16;
  mcfg.feature_dim = 8;
  mcfg.embedding_dim = 4;
  Rng rng(1);
  ModelParams p = init_params(mcfg, 2, rng);
  const double before = p.head_cls.w.at2(0, 0);

  ModelGrads g = zeros_like(p);
  g.head_cls.w.at2(0, 0) = 2.0;
  sgd_step(p, g, 0.1);
  CHECK(p.head_cls.w.at2(0, 0) == doctest::Approx(before - 0.2).epsilon(1e-12));

  g.head_fc.w.at2(0, 0) = std::nan("");
  CHECK_THROWS_WITH_AS(sgd_step(p, g, 0.1), doctest::Contains("head_fc.w"), NumericError);
}

TEST_CASE("training stages gate the identity losses") {
  const Dataset& ds = smoke_dataset();
  TrainConfig tcfg = base_train_config();  // s1_end 60, s2_end 150
  ModelConfig mcfg;

  const TrainResult res = train(ds, mcfg, tcfg);
  REQUIRE(res.log.entries.size() == 300);

  bool oim_seen = false, softmax_seen = false, rpn_oim_seen = false;
  for (const TrainLogEntry& e : res.log.entries) {
    const LossReport& r = e.report;
    if (e.iter < 60) {
      CHECK(e.stage == 0);
      CHECK(r.l_oim == 0.0);
      CHECK(r.l_rpn_oim == 0.0);
    }
    if (e.iter < 150) {
      CHECK(r.l_softmax == 0.0);
    } else {
      CHECK(e.stage == 2);
    }
    if (e.iter >= 60 && e.iter < 150) CHECK(e.stage == 1);
    oim_seen = oim_seen || r.l_oim > 0.0;
    softmax_seen = softmax_seen || r.l_softmax > 0.0;
    rpn_oim_seen = rpn_oim_seen || r.l_rpn_oim > 0.0;

    // Reported aggregates stay exact sums of their parts.
    CHECK(std::fabs(r.l_det - (r.l_cls + r.l_reg)) <= 1e-12);
    CHECK(std::fabs(r.l_reid - (r.l_softmax + r.l_oim)) <= 1e-12);
    CHECK(std::fabs(r.l_rpn - (r.l_rpn_cls + r.l_rpn_reg + r.l_rpn_oim)) <= 1e-12);
    CHECK(std::fabs(r.l_total - (r.l_det + r.l_reid + r.l_rpn)) <= 1e-12);
    CHECK(e.lr == lr_schedule(tcfg, e.iter));
  }
  CHECK(oim_seen);
  CHECK(softmax_seen);
  CHECK(rpn_oim_seen);
}

TEST_CASE("disabling proposal identity supervision zeroes its loss") {
  const Dataset& ds = smoke_dataset();
  TrainConfig tcfg = base_train_config();
  tcfg.total_iters = 120;  // past stage1_end = 24
  tcfg.rpn_person_labels = false;
  ModelConfig mcfg;

  const TrainResult res = train(ds, mcfg, tcfg);
  bool oim_seen = false;
  for (const TrainLogEntry& e : res.log.entries) {
    CHECK(e.report.l_rpn_oim == 0.0);
    oim_seen = oim_seen || e.report.l_oim > 0.0;
  }
  CHECK(oim_seen);  // head-side matching is unaffected
}

TEST_CASE("training twice from the same seed is bit identical") {
  const Dataset& ds = smoke_dataset();
  TrainConfig tcfg = base_train_config();
  tcfg.total_iters = 80;
  ModelConfig mcfg;

  const TrainResult a = train(ds, mcfg, tcfg);
  const TrainResult b = train(ds, mcfg, tcfg);
  REQUIRE(a.log.entries.size() == b.log.entries.size());
  for (std::size_t i = 0; i < a.log.entries.size(); ++i) {
    CHECK(a.log.entries[i].report.l_total == b.log.entries[i].report.l_total);
  }
  CHECK(a.params.head_fc.w.raw() == b.params.head_fc.w.raw());
  CHECK(a.params.backbone[0].w.raw() == b.params.backbone[0].w.raw());
  CHECK(a.oim.v.raw() == b.oim.v.raw());

  TrainConfig other = tcfg;
  other.seed = tcfg.seed + 1;
  const TrainResult c = train(ds, mcfg, other);
  CHECK(a.params.head_fc.w.raw() != c.params.head_fc.w.raw());
}

TEST_CASE("snapshot callback fires on its cadence") {
  const Dataset& ds = smoke_dataset();
  TrainConfig tcfg = base_train_config();
  tcfg.total_iters = 50;
  tcfg.snapshot_every = 20;
  ModelConfig mcfg;

  std::vector<int> fired;
  train(ds, mcfg, tcfg, [&](int iter, const ModelParams&, const OimState&) {
    fired.push_back(iter);
  });
  CHECK(fired == std::vector<int>{19, 39});
}

TEST_CASE("training demands at least one labeled identity") {
  Dataset ds;
  ds.root = ".";
  ds.image_h = ds.image_w = 96;
  Image img;
  img.h = img.w = 96;
  img.rgb.assign(96 * 96 * 3, 128);
  ds.images.push_back(img);
  ds.scenes.push_back({"s0", "s0.png", {Box{10, 10, 30, 30}}, {kUnlabeledPid}});

  TrainConfig tcfg = base_train_config();
  tcfg.total_iters = 10;
  ModelConfig mcfg;
  CHECK_THROWS_AS(train(ds, mcfg, tcfg), ConfigError);
}
