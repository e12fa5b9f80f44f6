#include "fmts/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fmts/errors.hpp"

namespace fmts {

namespace {

Vec vrelu(const Vec& x) {
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

Vec vrelu_backward(const Vec& up, const Vec& x) {
  Vec g(x.size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > 0.0 ? up[i] : 0.0;
  return g;
}

void add_into(Tensor& dst, const Tensor& src) {
  if (!dst.same_shape(src)) {
    throw ShapeError("gradient accumulation shape mismatch: " + dst.shape_str() + " vs " +
                     src.shape_str());
  }
  for (std::size_t i = 0; i < src.size(); ++i) dst.raw()[i] += src.data()[i];
}

void add_into(Tensor& dst, const Vec& src) {
  if (dst.size() != src.size()) {
    throw ShapeError("gradient accumulation size mismatch");
  }
  for (std::size_t i = 0; i < src.size(); ++i) dst.raw()[i] += src[i];
}

struct Ce2 {
  double loss;
  double d_first;
  double d_second;
};

// Two-way cross-entropy on raw logits, max-subtracted.
Ce2 ce2(double l_first, double l_second, bool target_first) {
  const double m = std::max(l_first, l_second);
  const double e1 = std::exp(l_first - m);
  const double e2 = std::exp(l_second - m);
  const double z = e1 + e2;
  const double p1 = e1 / z;
  const double target_logit = target_first ? l_first : l_second;
  double loss = std::log(z) + m - target_logit;
  if (loss < 0.0) loss = 0.0;
  return {loss, p1 - (target_first ? 1.0 : 0.0), (1.0 - p1) - (target_first ? 0.0 : 1.0)};
}

Tensor lecun_uniform(const std::vector<int>& dims, int fan_in, Rng& rng) {
  Tensor t(dims);
  const double bound = std::sqrt(3.0 / fan_in);
  for (double& v : t.raw()) v = rng.uniform(-bound, bound);
  return t;
}

ConvLayer init_conv(int out_ch, int in_ch, int k, Rng& rng) {
  return {lecun_uniform({out_ch, in_ch, k, k}, in_ch * k * k, rng), Tensor::zeros({out_ch})};
}

LinearLayer init_linear(int out_dim, int in_dim, Rng& rng) {
  return {lecun_uniform({out_dim, in_dim}, in_dim, rng), Tensor::zeros({out_dim})};
}

// Shared head trunk evaluated on one pooled roi.
struct TrunkCache {
  RoiPoolResult pool;
  Vec flat;
  Vec fc_pre;
  Vec fc_out;
};

TrunkCache run_trunk(const ModelParams& params, const ModelConfig& cfg,
                     const Tensor& features, const Box& box) {
  TrunkCache c{roi_pool_forward(features, box, cfg.roi_size, cfg.roi_size,
                                cfg.feature_stride()),
               {}, {}, {}};
  c.flat = c.pool.output.data();
  c.fc_pre = linear_forward(c.flat, params.head_fc.w, params.head_fc.b.data());
  c.fc_out = vrelu(c.fc_pre);
  return c;
}

// Routes a gradient at the trunk output back to head_fc and the feature map.
void trunk_backward(const ModelParams& params, const TrunkCache& c, const Vec& d_fc_out,
                    const Tensor& features, ModelGrads& grads, Tensor& d_features) {
  const Vec d_fc_pre = vrelu_backward(d_fc_out, c.fc_pre);
  LinearGrads lg = linear_backward(d_fc_pre, c.flat, params.head_fc.w);
  add_into(grads.head_fc.w, lg.d_weights);
  add_into(grads.head_fc.b, lg.d_bias);
  const Tensor d_pooled(c.pool.output.dims(), lg.d_input);
  add_into(d_features, roi_pool_backward(d_pooled, features, c.pool));
}

}  // namespace

void validate_config(const ModelConfig& cfg) {
  if (cfg.channels.empty()) throw ConfigError("backbone needs at least one conv block");
  for (int c : cfg.channels) {
    if (c < 1) throw ConfigError("backbone channel widths must be positive");
  }
  const int stride = cfg.feature_stride();
  if (cfg.image_h % stride != 0 || cfg.image_w % stride != 0) {
    throw ConfigError("image size " + std::to_string(cfg.image_h) + "x" +
                      std::to_string(cfg.image_w) + " not divisible by feature stride " +
                      std::to_string(stride));
  }
  if (cfg.feat_h() < 1 || cfg.feat_w() < 1) throw ConfigError("feature map is empty");
  if (cfg.anchor_sizes.empty() || cfg.anchor_ratios.empty()) {
    throw ConfigError("anchor sizes/ratios must be non-empty");
  }
  if (cfg.embedding_dim < 2) throw ConfigError("embedding_dim must be >= 2");
  if (cfg.feature_dim < 2) throw ConfigError("feature_dim must be >= 2");
  if (cfg.roi_size < 1) throw ConfigError("roi_size must be >= 1");
  if (cfg.pre_nms_top_n < 1 || cfg.post_nms_top_n < 1) {
    throw ConfigError("proposal counts must be >= 1");
  }
  if (!(cfg.proposal_nms_thresh > 0.0 && cfg.proposal_nms_thresh < 1.0) ||
      !(cfg.final_nms_thresh > 0.0 && cfg.final_nms_thresh < 1.0)) {
    throw ConfigError("nms thresholds must lie in (0,1)");
  }
  if (cfg.score_thresh < 0.0 || cfg.score_thresh > 1.0) {
    throw ConfigError("score_thresh must lie in [0,1]");
  }
  if (cfg.min_size <= 0.0) throw ConfigError("min_size must be positive");
}

ModelParams init_params(const ModelConfig& cfg, int n_labeled, Rng& rng) {
  validate_config(cfg);
  if (n_labeled < 1) throw ConfigError("model needs at least one labeled identity");
  ModelParams p;
  int in_ch = 3;
  for (int out_ch : cfg.channels) {
    p.backbone.push_back(init_conv(out_ch, in_ch, 3, rng));
    in_ch = out_ch;
  }
  const int C = cfg.feature_channels();
  const int A = cfg.anchors_per_cell();
  p.rpn_conv = init_conv(C, C, 3, rng);
  p.rpn_obj = init_conv(2 * A, C, 1, rng);
  p.rpn_reg = init_conv(4 * A, C, 1, rng);
  p.rpn_id = init_linear(cfg.embedding_dim, cfg.flat_dim(), rng);
  p.head_fc = init_linear(cfg.feature_dim, cfg.flat_dim(), rng);
  p.head_cls = init_linear(2, cfg.feature_dim, rng);
  p.head_reg = init_linear(4, cfg.feature_dim, rng);
  p.reid_proj = init_linear(cfg.embedding_dim, cfg.feature_dim, rng);
  p.reid_softmax_w =
      lecun_uniform({cfg.embedding_dim, n_labeled + 1}, cfg.embedding_dim, rng);
  p.n_labeled = n_labeled;
  return p;
}

ModelGrads zeros_like(const ModelParams& params) {
  ModelGrads g = params;
  g.for_each([](const std::string&, Tensor& t) { t.fill(0.0); });
  return g;
}

Tensor backbone_forward(const ModelParams& params, const ModelConfig& cfg,
                        const Tensor& image, BackboneCache* cache) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg.image_h ||
      image.dim(2) != cfg.image_w) {
    throw ShapeError("backbone expects [3," + std::to_string(cfg.image_h) + "," +
                     std::to_string(cfg.image_w) + "], got " + image.shape_str());
  }
  if (cache) {
    cache->input = image;
    cache->conv_out.clear();
    cache->relu_out.clear();
    cache->pooled.clear();
  }
  Tensor x = image;
  for (const ConvLayer& layer : params.backbone) {
    Tensor conv = conv2d_forward(x, layer.w, layer.b.data(), 1);
    Tensor act = relu_forward(conv);
    MaxPoolResult pool = maxpool2d_forward(act, 2, 2);
    x = pool.output;
    if (cache) {
      cache->conv_out.push_back(std::move(conv));
      cache->relu_out.push_back(std::move(act));
      cache->pooled.push_back(std::move(pool));
    }
  }
  return x;
}

RpnOut rpn_forward(const ModelParams& params, const Tensor& features) {
  RpnOut out;
  out.conv_out = conv2d_forward(features, params.rpn_conv.w, params.rpn_conv.b.data(), 1);
  out.relu_out = relu_forward(out.conv_out);
  out.obj_logits = conv2d_forward(out.relu_out, params.rpn_obj.w, params.rpn_obj.b.data(), 1);
  out.deltas = conv2d_forward(out.relu_out, params.rpn_reg.w, params.rpn_reg.b.data(), 1);

  const int A = out.obj_logits.dim(0) / 2;
  const int Hf = out.obj_logits.dim(1), Wf = out.obj_logits.dim(2);
  out.objectness = Tensor({A, Hf, Wf});
  for (int a = 0; a < A; ++a) {
    for (int i = 0; i < Hf; ++i) {
      for (int j = 0; j < Wf; ++j) {
        // person probability = sigmoid(person logit - background logit)
        const double diff = out.obj_logits.at3(2 * a, i, j) - out.obj_logits.at3(2 * a + 1, i, j);
        out.objectness.at3(a, i, j) = 1.0 / (1.0 + std::exp(-diff));
      }
    }
  }
  return out;
}

std::vector<Box> model_anchors(const ModelConfig& cfg) {
  return generate_anchors(cfg.feat_h(), cfg.feat_w(), cfg.feature_stride(), cfg.anchor_sizes,
                          cfg.anchor_ratios);
}

std::vector<Box> propose(const Tensor& objectness, const Tensor& deltas,
                         const std::vector<Box>& anchors, const ModelConfig& cfg) {
  const int A = objectness.dim(0);
  const int Hf = objectness.dim(1), Wf = objectness.dim(2);
  if (anchors.size() != static_cast<std::size_t>(A) * Hf * Wf) {
    throw ShapeError("anchor count does not match objectness grid");
  }
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (int i = 0; i < Hf; ++i) {
    for (int j = 0; j < Wf; ++j) {
      for (int a = 0; a < A; ++a) {
        const std::size_t anchor_idx = (static_cast<std::size_t>(i) * Wf + j) * A + a;
        const std::array<double, 4> d = {deltas.at3(4 * a + 0, i, j), deltas.at3(4 * a + 1, i, j),
                                         deltas.at3(4 * a + 2, i, j), deltas.at3(4 * a + 3, i, j)};
        Box box = clip_box(decode_box(d, anchors[anchor_idx]), cfg.image_w, cfg.image_h);
        if (box.w() < cfg.min_size || box.h() < cfg.min_size) continue;
        boxes.push_back(box);
        scores.push_back(objectness.at3(a, i, j));
      }
    }
  }
  // Keep the pre_nms_top_n best, ties by collection (anchor) order.
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)]) {
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    }
    return a < b;
  });
  if (static_cast<int>(order.size()) > cfg.pre_nms_top_n) order.resize(cfg.pre_nms_top_n);

  std::vector<Box> top_boxes;
  std::vector<double> top_scores;
  for (int idx : order) {
    top_boxes.push_back(boxes[static_cast<std::size_t>(idx)]);
    top_scores.push_back(scores[static_cast<std::size_t>(idx)]);
  }
  const std::vector<int> kept = nms(top_boxes, top_scores, cfg.proposal_nms_thresh);
  std::vector<Box> out;
  for (int idx : kept) {
    if (static_cast<int>(out.size()) >= cfg.post_nms_top_n) break;
    out.push_back(top_boxes[static_cast<std::size_t>(idx)]);
  }
  return out;
}

DetHeadOut detection_head(const ModelParams& params, const Tensor& pooled) {
  const Vec flat = pooled.data();
  const Vec fc = vrelu(linear_forward(flat, params.head_fc.w, params.head_fc.b.data()));
  const Vec logits = linear_forward(fc, params.head_cls.w, params.head_cls.b.data());
  const Vec reg = linear_forward(fc, params.head_reg.w, params.head_reg.b.data());
  const double m = std::max(logits[0], logits[1]);
  const double e0 = std::exp(logits[0] - m), e1 = std::exp(logits[1] - m);
  DetHeadOut out;
  out.probs = {e0 / (e0 + e1), e1 / (e0 + e1)};
  out.deltas = {reg[0], reg[1], reg[2], reg[3]};
  return out;
}

Vec reid_head(const ModelParams& params, const Tensor& pooled) {
  const Vec flat = pooled.data();
  const Vec fc = vrelu(linear_forward(flat, params.head_fc.w, params.head_fc.b.data()));
  return l2_normalize(linear_forward(fc, params.reid_proj.w, params.reid_proj.b.data()));
}

RpnIdentityOut rpn_identity_embed(const ModelParams& params, const ModelConfig& cfg,
                                  const Tensor& features, const std::vector<Box>& proposals) {
  RpnIdentityOut out;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    try {
      const RoiPoolResult pool = roi_pool_forward(features, proposals[i], cfg.roi_size,
                                                  cfg.roi_size, cfg.feature_stride());
      out.embeddings.push_back(l2_normalize(
          linear_forward(pool.output.data(), params.rpn_id.w, params.rpn_id.b.data())));
      out.kept.push_back(static_cast<int>(i));
    } catch (const DegenerateVectorError&) {
      ++out.skipped;
    } catch (const OutOfBoundsError&) {
      ++out.skipped;
    }
  }
  return out;
}

std::vector<Detection> search_forward(const ModelParams& params, const ModelConfig& cfg,
                                      const Tensor& image) {
  const Tensor features = backbone_forward(params, cfg, image);
  const RpnOut rpn = rpn_forward(params, features);
  const std::vector<Box> proposals = propose(rpn.objectness, rpn.deltas, model_anchors(cfg), cfg);

  std::vector<Detection> candidates;
  for (const Box& prop : proposals) {
    const RoiPoolResult pool =
        roi_pool_forward(features, prop, cfg.roi_size, cfg.roi_size, cfg.feature_stride());
    const DetHeadOut head = detection_head(params, pool.output);
    if (head.probs[0] < cfg.score_thresh) continue;
    const Box refined = clip_box(decode_box(head.deltas, prop), cfg.image_w, cfg.image_h);
    if (!refined.valid()) continue;
    candidates.push_back({refined, head.probs[0], std::nullopt});
  }

  const std::vector<int> kept = nms(candidates, cfg.final_nms_thresh);
  std::vector<Detection> out;
  for (int idx : kept) {
    Detection det = candidates[static_cast<std::size_t>(idx)];
    try {
      const RoiPoolResult pool = roi_pool_forward(features, det.box, cfg.roi_size,
                                                  cfg.roi_size, cfg.feature_stride());
      det.embedding = reid_head(params, pool.output);
    } catch (const DegenerateVectorError&) {
      det.embedding = std::nullopt;  // collapsed feature; detection still reported
    } catch (const OutOfBoundsError&) {
      det.embedding = std::nullopt;
    }
    out.push_back(std::move(det));
  }
  return out;
}

TrainStepFwd begin_train_step(const ModelParams& params, const ModelConfig& cfg,
                              const Tensor& image) {
  TrainStepFwd fwd;
  fwd.features = backbone_forward(params, cfg, image, &fwd.backbone);
  fwd.rpn = rpn_forward(params, fwd.features);
  fwd.proposals = propose(fwd.rpn.objectness, fwd.rpn.deltas, model_anchors(cfg), cfg);
  return fwd;
}

LossParts finish_train_step(const ModelParams& params, const ModelConfig& cfg,
                            const OimState& oim, const TrainStepFwd& fwd,
                            const IterationPlan& plan, ModelGrads& grads,
                            PendingOimUpdates& pending) {
  const Tensor& features = fwd.features;
  Tensor d_features = Tensor::zeros(features.dims());
  LossParts parts;
  const int K = params.n_labeled;

  // ---- detection + re-id head over the sampled candidate boxes ----
  const int n_head = static_cast<int>(plan.head_boxes.size());
  if (n_head > 0) {
    struct HeadSample {
      TrunkCache trunk;
      Vec cls_logits;
      Vec reg_pred;
      Vec emb_pre, emb;
      bool has_emb = false;
    };
    std::vector<HeadSample> samples;
    samples.reserve(static_cast<std::size_t>(n_head));
    const bool need_emb = plan.use_head_oim || plan.use_reid_softmax;
    for (int i = 0; i < n_head; ++i) {
      HeadSample s{run_trunk(params, cfg, features, plan.head_boxes[static_cast<std::size_t>(i)]),
                   {}, {}, {}, {}, false};
      s.cls_logits = linear_forward(s.trunk.fc_out, params.head_cls.w, params.head_cls.b.data());
      s.reg_pred = linear_forward(s.trunk.fc_out, params.head_reg.w, params.head_reg.b.data());
      if (need_emb && plan.head_pids[static_cast<std::size_t>(i)] != kNoPid) {
        s.emb_pre = linear_forward(s.trunk.fc_out, params.reid_proj.w, params.reid_proj.b.data());
        try {
          s.emb = l2_normalize(s.emb_pre);
          s.has_emb = true;
        } catch (const DegenerateVectorError&) {
          s.has_emb = false;
        }
      } else if (plan.use_reid_softmax && plan.head_pids[static_cast<std::size_t>(i)] == kNoPid) {
        // Background samples feed the background class of the identity softmax.
        s.emb_pre = linear_forward(s.trunk.fc_out, params.reid_proj.w, params.reid_proj.b.data());
        try {
          s.emb = l2_normalize(s.emb_pre);
          s.has_emb = true;
        } catch (const DegenerateVectorError&) {
          s.has_emb = false;
        }
      }
      samples.push_back(std::move(s));
    }

    // Contributor counts decide the per-term averaging.
    int n_fg = 0, n_oim = 0, n_softmax = 0;
    for (int i = 0; i < n_head; ++i) {
      const int pid = plan.head_pids[static_cast<std::size_t>(i)];
      if (plan.head_is_person[static_cast<std::size_t>(i)]) ++n_fg;
      if (plan.use_head_oim && pid >= 0 && samples[static_cast<std::size_t>(i)].has_emb) ++n_oim;
      if (plan.use_reid_softmax && pid != kUnlabeledPid &&
          samples[static_cast<std::size_t>(i)].has_emb) {
        ++n_softmax;  // labeled foreground or background; unlabeled persons excluded
      }
    }

    // Box regression over foreground samples, one shared normalizer.
    Vec reg_pred, reg_target;
    std::vector<int> fg_index;
    for (int i = 0; i < n_head; ++i) {
      if (!plan.head_is_person[static_cast<std::size_t>(i)]) continue;
      fg_index.push_back(i);
      for (int c = 0; c < 4; ++c) {
        reg_pred.push_back(samples[static_cast<std::size_t>(i)].reg_pred[static_cast<std::size_t>(c)]);
        reg_target.push_back(plan.head_reg_target[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]);
      }
    }
    const SmoothL1Result reg_res = smoothed_l1(reg_pred, reg_target, n_fg);
    parts.l_reg = reg_res.loss;

    SoftmaxClassifier reid_cls{params.reid_softmax_w};
    for (int i = 0; i < n_head; ++i) {
      HeadSample& s = samples[static_cast<std::size_t>(i)];
      const int pid = plan.head_pids[static_cast<std::size_t>(i)];
      const bool is_person = plan.head_is_person[static_cast<std::size_t>(i)] != 0;

      const Ce2 cls = ce2(s.cls_logits[0], s.cls_logits[1], is_person);
      parts.l_cls += cls.loss / n_head;
      const Vec d_cls_logits = {cls.d_first / n_head, cls.d_second / n_head};

      Vec d_reg(4, 0.0);
      if (is_person) {
        const auto pos = std::find(fg_index.begin(), fg_index.end(), i) - fg_index.begin();
        for (int c = 0; c < 4; ++c) {
          d_reg[static_cast<std::size_t>(c)] =
              reg_res.d_pred[static_cast<std::size_t>(pos) * 4 + static_cast<std::size_t>(c)];
        }
      }

      Vec d_emb(s.emb.size(), 0.0);
      bool touched_emb = false;
      if (plan.use_head_oim && pid >= 0 && s.has_emb) {
        const OimResult r = oim_forward(oim, s.emb, pid);
        parts.l_oim += r.loss / n_oim;
        for (std::size_t d = 0; d < d_emb.size(); ++d) d_emb[d] += r.d_x[d] / n_oim;
        touched_emb = true;
      }
      if (plan.use_reid_softmax && pid != kUnlabeledPid && s.has_emb) {
        const int target = pid >= 0 ? pid : K;  // background class is last
        const SoftmaxResult r = softmax_ce(reid_cls, s.emb, target);
        parts.l_softmax += r.loss / n_softmax;
        for (std::size_t d = 0; d < d_emb.size(); ++d) d_emb[d] += r.d_x[d] / n_softmax;
        for (std::size_t w = 0; w < r.d_w.size(); ++w) {
          grads.reid_softmax_w.raw()[w] += r.d_w.data()[w] / n_softmax;
        }
        touched_emb = true;
      }
      if (plan.use_head_oim && pid != kNoPid && s.has_emb) {
        pending.embeddings.push_back(s.emb);
        pending.labels.push_back(pid);
      }

      // Backward through the three branches into the shared trunk.
      Vec d_fc_out(s.trunk.fc_out.size(), 0.0);
      {
        LinearGrads g = linear_backward(d_cls_logits, s.trunk.fc_out, params.head_cls.w);
        add_into(grads.head_cls.w, g.d_weights);
        add_into(grads.head_cls.b, g.d_bias);
        for (std::size_t d = 0; d < d_fc_out.size(); ++d) d_fc_out[d] += g.d_input[d];
      }
      if (is_person) {
        LinearGrads g = linear_backward(d_reg, s.trunk.fc_out, params.head_reg.w);
        add_into(grads.head_reg.w, g.d_weights);
        add_into(grads.head_reg.b, g.d_bias);
        for (std::size_t d = 0; d < d_fc_out.size(); ++d) d_fc_out[d] += g.d_input[d];
      }
      if (touched_emb) {
        const Vec d_emb_pre = l2_normalize_backward(d_emb, s.emb_pre);
        LinearGrads g = linear_backward(d_emb_pre, s.trunk.fc_out, params.reid_proj.w);
        add_into(grads.reid_proj.w, g.d_weights);
        add_into(grads.reid_proj.b, g.d_bias);
        for (std::size_t d = 0; d < d_fc_out.size(); ++d) d_fc_out[d] += g.d_input[d];
      }
      trunk_backward(params, s.trunk, d_fc_out, features, grads, d_features);
    }
  }

  // ---- identity supervision on proposals (person-label pathway) ----
  if (plan.use_rpn_oim && !plan.rpn_oim_boxes.empty()) {
    struct IdSample {
      RoiPoolResult pool;
      Vec flat, pre, emb;
      int label;
    };
    std::vector<IdSample> ids;
    for (std::size_t i = 0; i < plan.rpn_oim_boxes.size(); ++i) {
      try {
        IdSample s{roi_pool_forward(features, plan.rpn_oim_boxes[i], cfg.roi_size,
                                    cfg.roi_size, cfg.feature_stride()),
                   {}, {}, {}, plan.rpn_oim_labels[i]};
        s.flat = s.pool.output.data();
        s.pre = linear_forward(s.flat, params.rpn_id.w, params.rpn_id.b.data());
        s.emb = l2_normalize(s.pre);
        ids.push_back(std::move(s));
      } catch (const DegenerateVectorError&) {
      } catch (const OutOfBoundsError&) {
      }
    }
    const int n_ids = static_cast<int>(ids.size());
    for (const IdSample& s : ids) {
      const OimResult r = oim_forward(oim, s.emb, s.label);
      parts.l_rpn_oim += r.loss / n_ids;
      Vec d_emb(s.emb.size());
      for (std::size_t d = 0; d < d_emb.size(); ++d) d_emb[d] = r.d_x[d] / n_ids;
      const Vec d_pre = l2_normalize_backward(d_emb, s.pre);
      LinearGrads g = linear_backward(d_pre, s.flat, params.rpn_id.w);
      add_into(grads.rpn_id.w, g.d_weights);
      add_into(grads.rpn_id.b, g.d_bias);
      const Tensor d_pooled(s.pool.output.dims(), g.d_input);
      add_into(d_features, roi_pool_backward(d_pooled, features, s.pool));
    }
  }

  // ---- proposal network objectness + regression over sampled anchors ----
  const int n_rpn = static_cast<int>(plan.rpn_anchor.size());
  Tensor d_obj_logits = Tensor::zeros(fwd.rpn.obj_logits.dims());
  Tensor d_deltas = Tensor::zeros(fwd.rpn.deltas.dims());
  bool rpn_touched = false;
  if (n_rpn > 0) {
    rpn_touched = true;
    const int A = cfg.anchors_per_cell();
    const int Wf = cfg.feat_w();
    Vec rpn_reg_pred, rpn_reg_target;
    std::vector<std::array<int, 3>> pos_loc;  // (a, i, j) per positive sample
    int n_pos = 0;
    for (int k = 0; k < n_rpn; ++k) {
      const int idx = plan.rpn_anchor[static_cast<std::size_t>(k)];
      const int a = idx % A;
      const int cell = idx / A;
      const int i = cell / Wf, j = cell % Wf;
      const bool is_person = plan.rpn_is_person[static_cast<std::size_t>(k)] != 0;
      const Ce2 cls =
          ce2(fwd.rpn.obj_logits.at3(2 * a, i, j), fwd.rpn.obj_logits.at3(2 * a + 1, i, j),
              is_person);
      parts.l_rpn_cls += cls.loss / n_rpn;
      d_obj_logits.at3(2 * a, i, j) += cls.d_first / n_rpn;
      d_obj_logits.at3(2 * a + 1, i, j) += cls.d_second / n_rpn;
      if (is_person) {
        ++n_pos;
        pos_loc.push_back({a, i, j});
        for (int c = 0; c < 4; ++c) {
          rpn_reg_pred.push_back(fwd.rpn.deltas.at3(4 * a + c, i, j));
          rpn_reg_target.push_back(plan.rpn_reg_target[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)]);
        }
      }
    }
    const SmoothL1Result reg_res = smoothed_l1(rpn_reg_pred, rpn_reg_target, n_pos);
    parts.l_rpn_reg = reg_res.loss;
    for (std::size_t p = 0; p < pos_loc.size(); ++p) {
      const auto [a, i, j] = pos_loc[p];
      for (int c = 0; c < 4; ++c) {
        d_deltas.at3(4 * a + c, i, j) += reg_res.d_pred[p * 4 + static_cast<std::size_t>(c)];
      }
    }
  }

  if (rpn_touched) {
    Conv2dGrads og = conv2d_backward(d_obj_logits, fwd.rpn.relu_out, params.rpn_obj.w, 1);
    add_into(grads.rpn_obj.w, og.d_weights);
    add_into(grads.rpn_obj.b, og.d_bias);
    Conv2dGrads rg = conv2d_backward(d_deltas, fwd.rpn.relu_out, params.rpn_reg.w, 1);
    add_into(grads.rpn_reg.w, rg.d_weights);
    add_into(grads.rpn_reg.b, rg.d_bias);
    Tensor d_relu = og.d_input;
    add_into(d_relu, rg.d_input);
    const Tensor d_conv = relu_backward(d_relu, fwd.rpn.conv_out);
    Conv2dGrads cg = conv2d_backward(d_conv, features, params.rpn_conv.w, 1);
    add_into(grads.rpn_conv.w, cg.d_weights);
    add_into(grads.rpn_conv.b, cg.d_bias);
    add_into(d_features, cg.d_input);
  }

  // ---- backbone backward ----
  Tensor d = d_features;
  for (int b = static_cast<int>(params.backbone.size()) - 1; b >= 0; --b) {
    const Tensor& block_input = b == 0 ? fwd.backbone.input
                                       : fwd.backbone.pooled[static_cast<std::size_t>(b - 1)].output;
    d = maxpool2d_backward(d, fwd.backbone.relu_out[static_cast<std::size_t>(b)],
                           fwd.backbone.pooled[static_cast<std::size_t>(b)]);
    d = relu_backward(d, fwd.backbone.conv_out[static_cast<std::size_t>(b)]);
    Conv2dGrads g = conv2d_backward(d, block_input, params.backbone[static_cast<std::size_t>(b)].w, 1);
    add_into(grads.backbone[static_cast<std::size_t>(b)].w, g.d_weights);
    add_into(grads.backbone[static_cast<std::size_t>(b)].b, g.d_bias);
    d = std::move(g.d_input);
  }

  return parts;
}

LossParts model_train_step(const ModelParams& params, const ModelConfig& cfg,
                           const OimState& oim, const Tensor& image,
                           const IterationPlan& plan, ModelGrads& grads,
                           PendingOimUpdates& pending) {
  const TrainStepFwd fwd = begin_train_step(params, cfg, image);
  return finish_train_step(params, cfg, oim, fwd, plan, grads, pending);
}

}  // namespace fmts
