#include "fmts/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fmts/errors.hpp"

namespace fmts {

double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return inter / uni;
}

Box clip_box(const Box& b, double image_w, double image_h) {
  Box c;
  c.x1 = std::clamp(b.x1, 0.0, image_w);
  c.y1 = std::clamp(b.y1, 0.0, image_h);
  c.x2 = std::clamp(b.x2, 0.0, image_w);
  c.y2 = std::clamp(b.y2, 0.0, image_h);
  return c;
}

std::vector<Box> generate_anchors(int feat_h, int feat_w, int stride,
                                  const std::vector<double>& sizes,
                                  const std::vector<double>& ratios) {
  if (stride < 1) throw ShapeError("anchor stride must be >= 1");
  if (sizes.empty() || ratios.empty()) throw ShapeError("anchor sizes/ratios must be non-empty");
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(feat_h) * feat_w * sizes.size() * ratios.size());
  for (int i = 0; i < feat_h; ++i) {
    for (int j = 0; j < feat_w; ++j) {
      const double cx = (j + 0.5) * stride;
      const double cy = (i + 0.5) * stride;
      for (double size : sizes) {
        for (double ratio : ratios) {
          const double q = std::pow(ratio, 0.25);
          const double w = size * q;
          const double h = size / q;
          anchors.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
        }
      }
    }
  }
  return anchors;
}

std::array<double, 4> encode_box(const Box& gt, const Box& anchor) {
  const double aw = anchor.w(), ah = anchor.h();
  return {(gt.cx() - anchor.cx()) / aw, (gt.cy() - anchor.cy()) / ah,
          std::log(gt.w() / aw), std::log(gt.h() / ah)};
}

Box decode_box(const std::array<double, 4>& deltas, const Box& anchor) {
  const double kClamp = 4.0;
  const double cx = anchor.cx() + deltas[0] * anchor.w();
  const double cy = anchor.cy() + deltas[1] * anchor.h();
  const double w = anchor.w() * std::exp(std::clamp(deltas[2], -kClamp, kClamp));
  const double h = anchor.h() * std::exp(std::clamp(deltas[3], -kClamp, kClamp));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_thresh) {
  if (boxes.size() != scores.size()) {
    throw ShapeError("nms: " + std::to_string(boxes.size()) + " boxes vs " +
                     std::to_string(scores.size()) + " scores");
  }
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0)) {
    throw ShapeError("nms threshold must lie in (0,1)");
  }
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)]) {
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    }
    return a < b;
  });
  std::vector<int> kept;
  for (int idx : order) {
    bool suppressed = false;
    for (int k : kept) {
      if (iou(boxes[static_cast<std::size_t>(idx)], boxes[static_cast<std::size_t>(k)]) >
          iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

std::vector<int> nms(const std::vector<Detection>& dets, double iou_thresh) {
  std::vector<Box> boxes(dets.size());
  std::vector<double> scores(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    boxes[i] = dets[i].box;
    scores[i] = dets[i].score;
  }
  return nms(boxes, scores, iou_thresh);
}

RoiPoolResult roi_pool_forward(const Tensor& features, const Box& box, int out_h,
                               int out_w, int stride) {
  if (features.rank() != 3) {
    throw ShapeError("roi_pool features must be rank 3, got " + features.shape_str());
  }
  if (out_h < 1 || out_w < 1 || stride < 1) {
    throw ShapeError("roi_pool out size and stride must be >= 1");
  }
  const int C = features.dim(0), H = features.dim(1), W = features.dim(2);
  // Outward rounding to whole feature cells.
  const int fx1 = static_cast<int>(std::floor(box.x1 / stride));
  const int fy1 = static_cast<int>(std::floor(box.y1 / stride));
  const int fx2 = static_cast<int>(std::ceil(box.x2 / stride));
  const int fy2 = static_cast<int>(std::ceil(box.y2 / stride));
  if (fx2 <= 0 || fy2 <= 0 || fx1 >= W || fy1 >= H) {
    throw OutOfBoundsError("roi box lies outside the feature map");
  }
  const int rw = fx2 - fx1;
  const int rh = fy2 - fy1;

  RoiPoolResult res{Tensor({C, out_h, out_w}),
                    std::vector<std::ptrdiff_t>(
                        static_cast<std::size_t>(C) * out_h * out_w, -1)};
  std::size_t o = 0;
  for (int c = 0; c < C; ++c) {
    for (int by = 0; by < out_h; ++by) {
      const int ys = std::max(fy1 + static_cast<int>(std::floor(double(by) * rh / out_h)), 0);
      const int ye = std::min(fy1 + static_cast<int>(std::ceil(double(by + 1) * rh / out_h)), H);
      for (int bx = 0; bx < out_w; ++bx, ++o) {
        const int xs = std::max(fx1 + static_cast<int>(std::floor(double(bx) * rw / out_w)), 0);
        const int xe = std::min(fx1 + static_cast<int>(std::ceil(double(bx + 1) * rw / out_w)), W);
        if (ys >= ye || xs >= xe) continue;  // empty bin: output 0, no gradient
        double best = 0.0;
        std::ptrdiff_t best_idx = -1;
        for (int y = ys; y < ye; ++y) {
          for (int x = xs; x < xe; ++x) {
            const double v = features.at3(c, y, x);
            if (best_idx < 0 || v > best) {
              best = v;
              best_idx = static_cast<std::ptrdiff_t>(features.idx3(c, y, x));
            }
          }
        }
        res.output.raw()[o] = best;
        res.argmax[o] = best_idx;
      }
    }
  }
  return res;
}

Tensor roi_pool_backward(const Tensor& upstream, const Tensor& features,
                         const RoiPoolResult& fwd) {
  if (!upstream.same_shape(fwd.output)) {
    throw ShapeError("roi_pool backward shape mismatch: " + upstream.shape_str() + " vs " +
                     fwd.output.shape_str());
  }
  Tensor g(features.dims());
  const Vec& up = upstream.data();
  for (std::size_t o = 0; o < up.size(); ++o) {
    if (fwd.argmax[o] >= 0) g.raw()[static_cast<std::size_t>(fwd.argmax[o])] += up[o];
  }
  return g;
}

}  // namespace fmts
