#ifndef FMTS_GEOMETRY_HPP
#define FMTS_GEOMETRY_HPP

#include <array>
#include <cstddef>
#include <optional>
#include <vector>

#include "fmts/tensor.hpp"

namespace fmts {

// Continuous corner-coordinate box, area = (x2-x1)*(y2-y1).
struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  double w() const { return x2 - x1; }
  double h() const { return y2 - y1; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  double area() const { return w() * h(); }
  bool valid() const { return x2 > x1 && y2 > y1; }
};

struct Detection {
  Box box;
  double score = 0.0;
  // Unit-norm appearance embedding; absent when the re-id head could not
  // produce one (collapsed feature on an untrained model).
  std::optional<Vec> embedding;
};

double iou(const Box& a, const Box& b);

/// Clamps corners into [0,w]x[0,h]. May return a degenerate box (zero side)
/// when the input lies entirely outside; callers filter by min_size.
Box clip_box(const Box& b, double image_w, double image_h);

/**
 * One anchor per (cell, size, ratio), centered at ((j+0.5)*stride,
 * (i+0.5)*stride). Order: row-major over cells, then sizes, then ratios.
 * `ratio` is the squared width/height aspect with area preserved:
 * w = size * ratio^(1/4), h = size / ratio^(1/4), so w/h = sqrt(ratio).
 */
std::vector<Box> generate_anchors(int feat_h, int feat_w, int stride,
                                  const std::vector<double>& sizes,
                                  const std::vector<double>& ratios);

/// (tx,ty,tw,th): center offsets in anchor units, log size ratios.
std::array<double, 4> encode_box(const Box& gt, const Box& anchor);

/// Inverse of encode_box; tw/th clamped to +-4 so exp cannot overflow on
/// untrained regressors.
Box decode_box(const std::array<double, 4>& deltas, const Box& anchor);

/**
 * Greedy NMS. Boxes are visited in descending score order (ties by lower
 * index); each visited box is kept unless it has IoU strictly above
 * iou_thresh with an already-kept box. Returns kept indices in visit order.
 */
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_thresh);
std::vector<int> nms(const std::vector<Detection>& dets, double iou_thresh);

struct RoiPoolResult {
  Tensor output;
  // Flat index into the feature tensor per output element, or -1 for an
  // empty bin (zero output, zero gradient).
  std::vector<std::ptrdiff_t> argmax;
};

/**
 * Max pooling of the box region into out_h x out_w bins. The box is mapped
 * to feature cells by dividing by stride and rounding outward (floor start,
 * ceil end); bin b spans cells [floor(b*n/out), ceil((b+1)*n/out)).
 */
RoiPoolResult roi_pool_forward(const Tensor& features, const Box& box, int out_h,
                               int out_w, int stride);
Tensor roi_pool_backward(const Tensor& upstream, const Tensor& features,
                         const RoiPoolResult& fwd);

}  // namespace fmts

#endif
