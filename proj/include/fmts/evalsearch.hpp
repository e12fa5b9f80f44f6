#ifndef FMTS_EVALSEARCH_HPP
#define FMTS_EVALSEARCH_HPP

#include <string>
#include <vector>

#include "fmts/data.hpp"
#include "fmts/geometry.hpp"
#include "fmts/model.hpp"
#include "fmts/tensor.hpp"

namespace fmts {

/// Detections of one scene, cached so each image runs the detector once per
/// evaluation no matter how many queries touch it.
struct GalleryDetections {
  std::string image_id;
  std::vector<Detection> dets;
};

struct RankedEntry {
  std::string image_id;
  int det_index = 0;  // position within that image's detection list
  Box box;
  double score = 0.0;
  double distance = 0.0;
  bool is_match = false;
};

/// Ascending distance; ties broken by (image_id, det_index).
using RankedList = std::vector<RankedEntry>;

/// Embeds the query person through the same pathway as gallery detections:
/// backbone on the full image, roi pool at the ground-truth box, re-id head.
/// Throws DegenerateVectorError when the projection collapses.
Vec embed_query(const ModelParams& params, const ModelConfig& cfg, const QuerySpec& query,
                const Tensor& image);

/// Pools all gallery detections and sorts by Euclidean distance to the query
/// embedding. With unit vectors this equals descending cosine similarity
/// (||a-b||^2 = 2 - 2 a.b). Detections without an embedding are unrankable
/// and dropped here (they still count toward detection recall).
RankedList rank_gallery(const Vec& query_emb, const std::vector<GalleryDetections>& gallery);

/// One matching step: true when `det_box` overlaps an unclaimed ground-truth
/// box at IoU >= 0.5, claiming the best such box. Call in rank order so the
/// higher-ranked detection wins each box.
bool match_detection(const Box& det_box, const std::vector<Box>& gt_boxes,
                     std::vector<bool>& claimed);

/// Flags matches across a ranked list against the query identity's boxes in
/// each gallery scene, one-to-one per ground-truth box.
void mark_matches(RankedList& ranked, const Dataset& ds, int pid);

/// AP = (1/n_positives) * sum over match ranks r of matches_so_far / r.
/// Unmatched positives contribute zero. Requires n_positives >= 1.
double average_precision(const std::vector<bool>& is_match, int n_positives);

/// 1 iff any of the first k entries is a match; k >= 1.
int cmc_hit(const std::vector<bool>& is_match, int k);

/// Fraction of all ground-truth boxes in the dataset covered by a detection
/// with IoU >= 0.5, one detection per box, higher scores claiming first.
double detection_recall(const std::vector<GalleryDetections>& cached, const Dataset& ds);

struct SizeMetrics {
  int gallery_size = 0;
  double map = 0.0;
  double top1 = 0.0, top5 = 0.0, top10 = 0.0;
  std::vector<double> per_query_ap;
};

struct EvalReport {
  std::vector<SizeMetrics> rows;  // one per gallery size, protocol order
  double det_recall = 0.0;
  std::vector<std::string> warnings;
};

/// Runs the detector once per scene, then ranks and scores every query of
/// every gallery size. Read-only on the model.
EvalReport evaluate(const ModelParams& params, const ModelConfig& cfg, const Dataset& ds,
                    const Protocol& protocol);

enum class ReportFormat { csv, json };

/// csv: header gallery_size,mAP,top1,top5,top10,det_recall and one row per
/// gallery size. json: the full report, per-query APs included.
void emit_report(const EvalReport& report, const std::string& path, ReportFormat format);

}  // namespace fmts

#endif
