#include "fmts/evalsearch.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "fmts/errors.hpp"
#include "json.hpp"

namespace fmts {

Vec embed_query(const ModelParams& params, const ModelConfig& cfg, const QuerySpec& query,
                const Tensor& image) {
  if (query.pid < 0) throw ValidationError("query pid must be labeled");
  if (!query.box.valid()) throw ValidationError("query box is degenerate");
  const Tensor features = backbone_forward(params, cfg, image);
  const RoiPoolResult pooled =
      roi_pool_forward(features, query.box, cfg.roi_size, cfg.roi_size, cfg.feature_stride());
  return reid_head(params, pooled.output);
}

RankedList rank_gallery(const Vec& query_emb, const std::vector<GalleryDetections>& gallery) {
  RankedList out;
  for (const GalleryDetections& g : gallery) {
    for (std::size_t i = 0; i < g.dets.size(); ++i) {
      const Detection& d = g.dets[i];
      if (!d.embedding) continue;
      double dot = 0.0;
      const Vec& e = *d.embedding;
      if (e.size() != query_emb.size()) throw ShapeError("embedding dimension mismatch");
      for (std::size_t k = 0; k < e.size(); ++k) dot += e[k] * query_emb[k];
      RankedEntry entry;
      entry.image_id = g.image_id;
      entry.det_index = static_cast<int>(i);
      entry.box = d.box;
      entry.score = d.score;
      entry.distance = std::sqrt(std::max(0.0, 2.0 - 2.0 * dot));
      out.push_back(std::move(entry));
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const RankedEntry& a, const RankedEntry& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return a.det_index < b.det_index;
  });
  return out;
}

bool match_detection(const Box& det_box, const std::vector<Box>& gt_boxes,
                     std::vector<bool>& claimed) {
  if (claimed.size() != gt_boxes.size()) throw ShapeError("claimed flags must parallel gt boxes");
  double best = 0.0;
  int best_g = -1;
  for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
    if (claimed[g]) continue;
    const double v = iou(det_box, gt_boxes[g]);
    if (v >= 0.5 && v > best) {
      best = v;
      best_g = static_cast<int>(g);
    }
  }
  if (best_g < 0) return false;
  claimed[static_cast<std::size_t>(best_g)] = true;
  return true;
}

void mark_matches(RankedList& ranked, const Dataset& ds, int pid) {
  // Ground-truth boxes of this identity per gallery scene, with claim flags.
  struct PerImage {
    std::vector<Box> boxes;
    std::vector<bool> claimed;
  };
  std::vector<std::string> ids;
  std::vector<PerImage> state;
  auto lookup = [&](const std::string& image_id) -> PerImage& {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] == image_id) return state[i];
    }
    const SceneAnnotation& scene = ds.scenes[static_cast<std::size_t>(ds.scene_index(image_id))];
    PerImage p;
    for (std::size_t b = 0; b < scene.boxes.size(); ++b) {
      if (scene.pids[b] == pid) p.boxes.push_back(scene.boxes[b]);
    }
    p.claimed.assign(p.boxes.size(), false);
    ids.push_back(image_id);
    state.push_back(std::move(p));
    return state.back();
  };
  for (RankedEntry& e : ranked) {
    PerImage& p = lookup(e.image_id);
    e.is_match = match_detection(e.box, p.boxes, p.claimed);
  }
}

double average_precision(const std::vector<bool>& is_match, int n_positives) {
  if (n_positives < 1) throw ValidationError("average_precision needs n_positives >= 1");
  double sum = 0.0;
  int hits = 0;
  for (std::size_t r = 0; r < is_match.size(); ++r) {
    if (is_match[r]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return sum / n_positives;
}

int cmc_hit(const std::vector<bool>& is_match, int k) {
  if (k < 1) throw ValidationError("cmc_hit needs k >= 1");
  const std::size_t limit = std::min<std::size_t>(is_match.size(), static_cast<std::size_t>(k));
  for (std::size_t r = 0; r < limit; ++r) {
    if (is_match[r]) return 1;
  }
  return 0;
}

double detection_recall(const std::vector<GalleryDetections>& cached, const Dataset& ds) {
  if (cached.size() != ds.scenes.size()) throw ShapeError("cached detections must cover dataset");
  long total = 0;
  long covered = 0;
  for (std::size_t s = 0; s < ds.scenes.size(); ++s) {
    const std::vector<Box>& gts = ds.scenes[s].boxes;
    total += static_cast<long>(gts.size());
    std::vector<bool> claimed(gts.size(), false);
    for (const Detection& d : cached[s].dets) {  // already in descending score order
      if (match_detection(d.box, gts, claimed)) ++covered;
    }
  }
  if (total == 0) return 0.0;
  return static_cast<double>(covered) / static_cast<double>(total);
}

EvalReport evaluate(const ModelParams& params, const ModelConfig& cfg, const Dataset& ds,
                    const Protocol& protocol) {
  if (protocol.gallery_sizes.size() != protocol.per_size.size()) {
    throw ValidationError("protocol sizes and query lists must be parallel");
  }
  EvalReport report;
  report.warnings = protocol.warnings;

  std::vector<GalleryDetections> cached(ds.scenes.size());
  std::vector<Tensor> tensors(ds.scenes.size());
  for (std::size_t s = 0; s < ds.scenes.size(); ++s) {
    tensors[s] = image_to_tensor(ds.images[s]);
    cached[s].image_id = ds.scenes[s].image_id;
    cached[s].dets = search_forward(params, cfg, tensors[s]);
  }
  report.det_recall = detection_recall(cached, ds);

  for (std::size_t gi = 0; gi < protocol.gallery_sizes.size(); ++gi) {
    SizeMetrics row;
    row.gallery_size = protocol.gallery_sizes[gi];
    double sum_ap = 0.0;
    int sum1 = 0, sum5 = 0, sum10 = 0;
    int n_queries = 0;
    for (const QueryCase& qc : protocol.per_size[gi]) {
      int n_pos = 0;
      std::vector<GalleryDetections> gallery;
      gallery.reserve(qc.gallery.size());
      for (const std::string& gid : qc.gallery) {
        const std::size_t s = static_cast<std::size_t>(ds.scene_index(gid));
        gallery.push_back(cached[s]);
        for (int pid : ds.scenes[s].pids) {
          if (pid == qc.query.pid) ++n_pos;
        }
      }
      if (n_pos == 0) {
        report.warnings.push_back("query " + qc.query.image_id + " pid " +
                                  std::to_string(qc.query.pid) + " has no gallery positives, skipped");
        continue;
      }
      Vec q;
      try {
        q = embed_query(params, cfg, qc.query,
                        tensors[static_cast<std::size_t>(ds.scene_index(qc.query.image_id))]);
      } catch (const DegenerateVectorError&) {
        // A collapsed query embedding scores zero everywhere rather than
        // aborting the whole report.
        sum_ap += 0.0;
        ++n_queries;
        row.per_query_ap.push_back(0.0);
        continue;
      }
      RankedList ranked = rank_gallery(q, gallery);
      mark_matches(ranked, ds, qc.query.pid);
      std::vector<bool> flags;
      flags.reserve(ranked.size());
      for (const RankedEntry& e : ranked) flags.push_back(e.is_match);
      const double ap = average_precision(flags, n_pos);
      sum_ap += ap;
      sum1 += cmc_hit(flags, 1);
      sum5 += cmc_hit(flags, 5);
      sum10 += cmc_hit(flags, 10);
      ++n_queries;
      row.per_query_ap.push_back(ap);
    }
    if (n_queries > 0) {
      row.map = sum_ap / n_queries;
      row.top1 = static_cast<double>(sum1) / n_queries;
      row.top5 = static_cast<double>(sum5) / n_queries;
      row.top10 = static_cast<double>(sum10) / n_queries;
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

void emit_report(const EvalReport& report, const std::string& path, ReportFormat format) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report " + path);
  if (format == ReportFormat::csv) {
    out << "gallery_size,mAP,top1,top5,top10,det_recall\n";
    for (const SizeMetrics& r : report.rows) {
      out << r.gallery_size << ',' << shortest_double(r.map) << ',' << shortest_double(r.top1)
          << ',' << shortest_double(r.top5) << ',' << shortest_double(r.top10) << ','
          << shortest_double(report.det_recall) << '\n';
    }
  } else {
    nlohmann::ordered_json j;
    j["det_recall"] = report.det_recall;
    j["rows"] = nlohmann::ordered_json::array();
    for (const SizeMetrics& r : report.rows) {
      nlohmann::ordered_json row;
      row["gallery_size"] = r.gallery_size;
      row["mAP"] = r.map;
      row["top1"] = r.top1;
      row["top5"] = r.top5;
      row["top10"] = r.top10;
      row["per_query_ap"] = r.per_query_ap;
      j["rows"].push_back(std::move(row));
    }
    j["warnings"] = report.warnings;
    out << j.dump(1) << '\n';
  }
  if (!out) throw IoError("failed writing report " + path);
}

}  // namespace fmts
