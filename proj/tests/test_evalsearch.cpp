#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "fmts/data.hpp"
#include "fmts/errors.hpp"
#include "fmts/evalsearch.hpp"
#include "fmts/model.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace fmts;
namespace fs = std::filesystem;

namespace {

Vec unit(std::initializer_list<double> vals) {
  Vec v(vals);
  const double n = norm2(v);
  for (double& x : v) x /= n;
  return v;
}

Detection det_with(const Box& box, double score, const Vec& emb) {
  return Detection{box, score, emb};
}

// Shared tiny dataset + untrained model for the end-to-end comparisons.
struct Fixture {
  Dataset test;
  ModelConfig mcfg;
  ModelParams params;

  Fixture() : params(make_params()) {
    const fs::path dir = "evalsearch_ds";
    if (!fs::exists(dir / "test/manifest.json")) {
      fs::remove_all(dir);
      SynthConfig scfg;
      scfg.n_identities = 5;
      scfg.scenes_train = 8;
      scfg.scenes_test = 10;
      scfg.seed = 21;
      generate_synthetic(scfg, dir.string());
    }
    test = load_dataset((dir / "test/manifest.json").string());
  }

  static ModelParams make_params() {
    ModelConfig cfg;
    Rng rng(77);
    return init_params(cfg, 4, rng);
  }
};

}  // namespace

TEST_CASE("average precision matches the hand-worked rankings") {
  CHECK(average_precision({true, true}, 2) == doctest::Approx(1.0).epsilon(1e-12));
  // Hits at ranks 1 and 3 out of two positives: (1/1 + 2/3) / 2.
  CHECK(average_precision({true, false, true}, 2) ==
        doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
  // Single positive found at rank 4.
  CHECK(average_precision({false, false, false, true}, 1) ==
        doctest::Approx(0.25).epsilon(1e-12));
  // Unfound positives shrink the normalizer's share.
  CHECK(average_precision({true}, 2) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(average_precision({}, 3) == 0.0);
  CHECK_THROWS_AS(average_precision({true}, 0), ValidationError);

  // Random rankings agree with the independent oracle.
  Rng rng(31);
  for (int it = 0; it < 300; ++it) {
    const int n = 1 + static_cast<int>(rng.below(12));
    std::vector<bool> is_match(static_cast<std::size_t>(n));
    int hits = 0;
    for (auto&& m : is_match) {
      m = rng.uniform() < 0.4;
      hits += m;
    }
    const int n_pos = std::max(hits, 1 + static_cast<int>(rng.below(4)));
    CHECK(average_precision(is_match, n_pos) ==
          doctest::Approx(oracle::average_precision(is_match, n_pos)).epsilon(1e-12));
  }
}

TEST_CASE("cmc hit scans exactly the first k ranks") {
  const std::vector<bool> third{false, false, true, false};
  CHECK(cmc_hit(third, 1) == 0);
  CHECK(cmc_hit(third, 2) == 0);
  CHECK(cmc_hit(third, 3) == 1);
  CHECK(cmc_hit(third, 10) == 1);  // k beyond the list is fine
  CHECK(cmc_hit({}, 5) == 0);
  CHECK(cmc_hit({false, false}, 5) == 0);
  CHECK_THROWS_AS(cmc_hit(third, 0), ValidationError);

  // Monotone in k by construction.
  Rng rng(13);
  for (int it = 0; it < 100; ++it) {
    std::vector<bool> m(8);
    for (auto&& b : m) b = rng.uniform() < 0.3;
    int prev = 0;
    for (int k = 1; k <= 10; ++k) {
      const int h = cmc_hit(m, k);
      CHECK(h >= prev);
      prev = h;
    }
  }
}

TEST_CASE("match_detection claims each ground truth once, best first") {
  const std::vector<Box> gts = {{0, 0, 20, 20}, {40, 40, 60, 60}};
  std::vector<bool> claimed(2, false);

  CHECK(match_detection(Box{1, 1, 21, 21}, gts, claimed));  // IoU ~0.82 with gt 0
  CHECK(claimed[0]);
  CHECK(!claimed[1]);
  // Same region again: its box is already claimed.
  CHECK(!match_detection(Box{0, 0, 20, 20}, gts, claimed));
  // IoU below 0.5 (here 180/400) never matches.
  CHECK(!match_detection(Box{40, 40, 49, 60}, gts, claimed));
  CHECK(match_detection(Box{41, 41, 61, 61}, gts, claimed));
  CHECK(claimed[1]);
  std::vector<bool> untouched(2, false);
  CHECK(!match_detection(Box{100, 100, 120, 120}, gts, untouched));
  CHECK(untouched == std::vector<bool>(2, false));

  // When two boxes qualify the detection claims its best overlap.
  const std::vector<Box> near = {{0, 0, 16, 16}, {2, 2, 18, 18}};
  std::vector<bool> c2(2, false);
  CHECK(match_detection(Box{2, 2, 17, 17}, near, c2));
  CHECK(c2[1]);  // higher IoU than the first box
  CHECK(!c2[0]);
}

TEST_CASE("rank_gallery orders by distance with deterministic ties") {
  const Vec q = unit({1.0, 0.0, 0.0, 0.0});
  std::vector<GalleryDetections> gallery(2);
  gallery[0].image_id = "b";
  gallery[0].dets = {
      det_with({0, 0, 10, 10}, 0.9, unit({1.0, 1.0, 0.0, 0.0})),
      det_with({20, 0, 30, 10}, 0.8, unit({1.0, 0.0, 0.0, 0.0})),  // exact hit
  };
  gallery[1].image_id = "a";
  gallery[1].dets = {
      det_with({0, 20, 10, 30}, 0.7, unit({1.0, 1.0, 0.0, 0.0})),  // ties with b:0
      det_with({20, 20, 30, 30}, 0.6, unit({0.0, 1.0, 0.0, 0.0})),
  };

  const RankedList ranked = rank_gallery(q, gallery);
  REQUIRE(ranked.size() == 4);
  CHECK(ranked[0].image_id == "b");
  CHECK(ranked[0].det_index == 1);
  CHECK(ranked[0].distance == doctest::Approx(0.0).epsilon(1e-9));
  // The two equidistant entries sort by image id, then detection index.
  CHECK(ranked[1].image_id == "a");
  CHECK(ranked[1].det_index == 0);
  CHECK(ranked[2].image_id == "b");
  CHECK(ranked[2].det_index == 0);
  CHECK(ranked[3].image_id == "a");
  CHECK(ranked[3].det_index == 1);
  CHECK(ranked[3].distance == doctest::Approx(std::sqrt(2.0)).epsilon(1e-9));

  // Distances never decrease.
  for (std::size_t i = 1; i < ranked.size(); ++i) {
    CHECK(ranked[i].distance >= ranked[i - 1].distance);
  }

  // Detections without an embedding are unrankable.
  gallery[1].dets.push_back(Detection{Box{1, 1, 9, 9}, 0.99, std::nullopt});
  CHECK(rank_gallery(q, gallery).size() == 4);
}

TEST_CASE("euclidean ranking equals descending cosine similarity on unit vectors") {
  Rng rng(47);
  for (int it = 0; it < 200; ++it) {
    const Vec q = oracle::random_unit(rng, 8);
    std::vector<GalleryDetections> gallery(1);
    gallery[0].image_id = "img";
    const int n = 2 + static_cast<int>(rng.below(6));
    std::vector<double> cosines;
    for (int i = 0; i < n; ++i) {
      const Vec e = oracle::random_unit(rng, 8);
      gallery[0].dets.push_back(det_with({0, 0, 10, 10}, 0.5, e));
      cosines.push_back(dot(q, e));
    }
    const RankedList ranked = rank_gallery(q, gallery);
    REQUIRE(ranked.size() == static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      // distance = sqrt(2 - 2 cos), monotone dual of the cosine
      const double expect = std::sqrt(std::max(0.0, 2.0 - 2.0 * cosines[static_cast<std::size_t>(ranked[i].det_index)]));
      CHECK(std::fabs(ranked[i].distance - expect) <= 1e-9);
      if (i > 0) {
        CHECK(cosines[static_cast<std::size_t>(ranked[i].det_index)] <=
              cosines[static_cast<std::size_t>(ranked[i - 1].det_index)] + 1e-12);
      }
    }
  }
}

TEST_CASE("query embedding reuses the shared detection pathway") {
  const Fixture fx;
  const ModelConfig& cfg = fx.mcfg;
  const SceneAnnotation& scene = fx.test.scenes[0];
  const Tensor img = image_to_tensor(fx.test.images[0]);
  const QuerySpec q{scene.image_id, scene.boxes[0], scene.pids[0]};

  const Vec emb = embed_query(fx.params, cfg, q, img);
  REQUIRE(emb.size() == static_cast<std::size_t>(cfg.embedding_dim));
  CHECK(norm2(emb) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(embed_query(fx.params, cfg, q, img) == emb);

  // Same result as running the stages by hand.
  const Tensor features = backbone_forward(fx.params, cfg, img);
  const RoiPoolResult pooled =
      roi_pool_forward(features, q.box, cfg.roi_size, cfg.roi_size, cfg.feature_stride());
  const Vec manual = reid_head(fx.params, pooled.output);
  REQUIRE(manual.size() == emb.size());
  for (std::size_t i = 0; i < emb.size(); ++i) {
    CHECK(emb[i] == doctest::Approx(manual[i]).epsilon(1e-12));
  }
}

TEST_CASE("evaluate agrees with a monolithic reimplementation") {
  const Fixture fx;
  const Protocol protocol = make_protocol(fx.test, {2, 4}, 13);
  const EvalReport report = evaluate(fx.params, fx.mcfg, fx.test, protocol);

  REQUIRE(report.rows.size() == 2);

  // Brute-force reference: rerun the detector per scene, rank with plain
  // sorts, score with the oracle AP. No sharing with the library internals
  // beyond the model forward itself.
  std::map<std::string, std::vector<Detection>> dets_by_scene;
  for (std::size_t s = 0; s < fx.test.scenes.size(); ++s) {
    dets_by_scene[fx.test.scenes[s].image_id] =
        search_forward(fx.params, fx.mcfg, image_to_tensor(fx.test.images[s]));
  }

  int covered = 0, total_gt = 0;
  {
    // Recall: per scene, score-ordered one-to-one claiming at IoU >= 0.5.
    for (const SceneAnnotation& scene : fx.test.scenes) {
      total_gt += static_cast<int>(scene.boxes.size());
      std::vector<Detection> dets = dets_by_scene[scene.image_id];
      std::stable_sort(dets.begin(), dets.end(),
                       [](const Detection& a, const Detection& b) { return a.score > b.score; });
      std::vector<bool> used(scene.boxes.size(), false);
      for (const Detection& d : dets) {
        int best = -1;
        double best_iou = 0.5;
        for (std::size_t g = 0; g < scene.boxes.size(); ++g) {
          if (used[g]) continue;
          const double v = iou(d.box, scene.boxes[g]);
          if (v >= best_iou) {
            best = static_cast<int>(g);
            best_iou = v;
          }
        }
        if (best >= 0) {
          used[static_cast<std::size_t>(best)] = true;
          ++covered;
        }
      }
    }
  }
  CHECK(report.det_recall ==
        doctest::Approx(static_cast<double>(covered) / total_gt).epsilon(1e-12));

  for (std::size_t s = 0; s < protocol.per_size.size(); ++s) {
    const auto& cases = protocol.per_size[s];
    REQUIRE(report.rows[s].per_query_ap.size() == cases.size());
    CHECK(report.rows[s].gallery_size == protocol.gallery_sizes[s]);

    double map_sum = 0.0;
    int top1_hits = 0;
    for (std::size_t qi = 0; qi < cases.size(); ++qi) {
      const QueryCase& qc = cases[qi];
      const int scene_idx = fx.test.scene_index(qc.query.image_id);
      const Vec q_emb = embed_query(fx.params, fx.mcfg, qc.query,
                                    image_to_tensor(fx.test.images[static_cast<std::size_t>(scene_idx)]));

      struct Entry {
        double dist;
        std::string image_id;
        int det_index;
        Box box;
      };
      std::vector<Entry> entries;
      int n_pos = 0;
      for (const std::string& gid : qc.gallery) {
        const auto& dets = dets_by_scene[gid];
        for (std::size_t di = 0; di < dets.size(); ++di) {
          if (!dets[di].embedding) continue;
          double sq = 0.0;
          for (std::size_t k = 0; k < q_emb.size(); ++k) {
            const double d = q_emb[k] - (*dets[di].embedding)[k];
            sq += d * d;
          }
          entries.push_back({std::sqrt(sq), gid, static_cast<int>(di), dets[di].box});
        }
        const SceneAnnotation& scene =
            fx.test.scenes[static_cast<std::size_t>(fx.test.scene_index(gid))];
        for (int pid : scene.pids) n_pos += pid == qc.query.pid;
      }
      std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.dist != b.dist) return a.dist < b.dist;
        if (a.image_id != b.image_id) return a.image_id < b.image_id;
        return a.det_index < b.det_index;
      });

      std::map<std::string, std::vector<bool>> claimed;
      std::vector<bool> is_match;
      for (const Entry& e : entries) {
        const SceneAnnotation& scene =
            fx.test.scenes[static_cast<std::size_t>(fx.test.scene_index(e.image_id))];
        std::vector<Box> own_boxes;
        for (std::size_t g = 0; g < scene.boxes.size(); ++g) {
          if (scene.pids[g] == qc.query.pid) own_boxes.push_back(scene.boxes[g]);
        }
        auto& used = claimed[e.image_id];
        if (used.empty()) used.assign(own_boxes.size(), false);
        bool hit = false;
        int best = -1;
        double best_iou = 0.5;
        for (std::size_t g = 0; g < own_boxes.size(); ++g) {
          if (used[g]) continue;
          const double v = iou(e.box, own_boxes[g]);
          if (v >= best_iou) {
            best = static_cast<int>(g);
            best_iou = v;
          }
        }
        if (best >= 0) {
          used[static_cast<std::size_t>(best)] = true;
          hit = true;
        }
        is_match.push_back(hit);
      }

      const double ap = n_pos >= 1 ? oracle::average_precision(is_match, n_pos) : 0.0;
      CHECK(report.rows[s].per_query_ap[qi] == doctest::Approx(ap).epsilon(1e-12));
      map_sum += ap;
      top1_hits += oracle::cmc_hit(is_match, 1);
    }
    CHECK(report.rows[s].map ==
          doctest::Approx(map_sum / static_cast<double>(cases.size())).epsilon(1e-12));
    CHECK(report.rows[s].top1 ==
          doctest::Approx(static_cast<double>(top1_hits) / cases.size()).epsilon(1e-12));
  }
}

TEST_CASE("reports round trip through csv and json") {
  EvalReport report;
  report.det_recall = 0.875;
  SizeMetrics a;
  a.gallery_size = 2;
  a.map = 1.0 / 3.0;
  a.top1 = 0.5;
  a.top5 = 0.75;
  a.top10 = 1.0;
  a.per_query_ap = {0.25, 1.0 / 3.0};
  SizeMetrics b;
  b.gallery_size = 10;
  b.map = 0.125;
  b.top1 = 0.25;
  b.top5 = 0.5;
  b.top10 = 0.625;
  b.per_query_ap = {0.125};
  report.rows = {a, b};
  report.warnings = {"identity 3 skipped"};

  emit_report(report, "report_rt.csv", ReportFormat::csv);
  std::ifstream csv("report_rt.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "gallery_size,mAP,top1,top5,top10,det_recall");
  std::getline(csv, line);
  CHECK(line.substr(0, 2) == "2,");
  // Shortest-roundtrip doubles: a third survives textually as 0.3333... and
  // parses back to the same bits.
  CHECK(line.find("0.3333333333333333") != std::string::npos);
  std::getline(csv, line);
  CHECK(line.substr(0, 3) == "10,");
  CHECK(!std::getline(csv, line));  // exactly one row per size

  emit_report(report, "report_rt.json", ReportFormat::json);
  std::ifstream jf("report_rt.json");
  const nlohmann::json j = nlohmann::json::parse(jf);
  REQUIRE(j["rows"].size() == 2);
  CHECK(j["rows"][0]["gallery_size"] == 2);
  CHECK(j["rows"][0]["mAP"].get<double>() == 1.0 / 3.0);
  CHECK(j["rows"][1]["top10"].get<double>() == 0.625);
  CHECK(j["rows"][0]["per_query_ap"].size() == 2);
  CHECK(j["det_recall"].get<double>() == 0.875);
  CHECK(j["warnings"].size() == 1);
  std::remove("report_rt.csv");
  std::remove("report_rt.json");
}
