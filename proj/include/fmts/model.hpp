#ifndef FMTS_MODEL_HPP
#define FMTS_MODEL_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fmts/geometry.hpp"
#include "fmts/losses.hpp"
#include "fmts/ops.hpp"
#include "fmts/tensor.hpp"

namespace fmts {

/**
 * Network layout. The backbone is a stack of conv3x3 + relu + maxpool2x2
 * blocks, one per entry of `channels`, so the feature stride is
 * 2^channels.size(). Two-class outputs order the person logit first and
 * background second everywhere (detection head, RPN objectness); the re-id
 * classifier keeps background as its last class.
 */
struct ModelConfig {
  int image_h = 96, image_w = 96;
  std::vector<int> channels = {8, 16, 32};
  std::vector<double> anchor_sizes = {16.0, 22.0, 28.0};
  std::vector<double> anchor_ratios = {1.0};
  int roi_size = 7;
  int feature_dim = 64;    // shared head trunk width
  int embedding_dim = 32;  // E
  int pre_nms_top_n = 128;
  int post_nms_top_n = 16;
  double proposal_nms_thresh = 0.7;
  double min_size = 4.0;      // smallest proposal side in pixels
  double score_thresh = 0.5;  // detection keep threshold
  double final_nms_thresh = 0.3;

  int feature_stride() const { return 1 << static_cast<int>(channels.size()); }
  int anchors_per_cell() const {
    return static_cast<int>(anchor_sizes.size() * anchor_ratios.size());
  }
  int feature_channels() const { return channels.empty() ? 3 : channels.back(); }
  int feat_h() const { return image_h / feature_stride(); }
  int feat_w() const { return image_w / feature_stride(); }
  int flat_dim() const { return feature_channels() * roi_size * roi_size; }
};

/// Throws ConfigError when fields are inconsistent.
void validate_config(const ModelConfig& cfg);

struct ConvLayer {
  Tensor w;  // [F, C, k, k]
  Tensor b;  // [F]
};

struct LinearLayer {
  Tensor w;  // [D_out, D_in]
  Tensor b;  // [D_out]
};

struct ModelParams {
  std::vector<ConvLayer> backbone;
  ConvLayer rpn_conv;  // 3x3, C -> C
  ConvLayer rpn_obj;   // 1x1, C -> 2A (person, background per anchor)
  ConvLayer rpn_reg;   // 1x1, C -> 4A
  LinearLayer rpn_id;    // flat roi -> E, identity pathway of the proposal net
  LinearLayer head_fc;   // flat roi -> feature_dim, shared head trunk
  LinearLayer head_cls;  // feature_dim -> 2
  LinearLayer head_reg;  // feature_dim -> 4
  LinearLayer reid_proj;       // feature_dim -> E
  Tensor reid_softmax_w;       // [E, K+1], identity classifier incl. background
  int n_labeled = 0;           // K

  template <typename F>
  void for_each(F&& f) {
    for (std::size_t i = 0; i < backbone.size(); ++i) {
      const std::string base = "backbone" + std::to_string(i);
      f(base + ".w", backbone[i].w);
      f(base + ".b", backbone[i].b);
    }
    f("rpn_conv.w", rpn_conv.w);
    f("rpn_conv.b", rpn_conv.b);
    f("rpn_obj.w", rpn_obj.w);
    f("rpn_obj.b", rpn_obj.b);
    f("rpn_reg.w", rpn_reg.w);
    f("rpn_reg.b", rpn_reg.b);
    f("rpn_id.w", rpn_id.w);
    f("rpn_id.b", rpn_id.b);
    f("head_fc.w", head_fc.w);
    f("head_fc.b", head_fc.b);
    f("head_cls.w", head_cls.w);
    f("head_cls.b", head_cls.b);
    f("head_reg.w", head_reg.w);
    f("head_reg.b", head_reg.b);
    f("reid_proj.w", reid_proj.w);
    f("reid_proj.b", reid_proj.b);
    f("reid_softmax.w", reid_softmax_w);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<ModelParams*>(this)->for_each(
        [&](const std::string& name, Tensor& t) { f(name, const_cast<const Tensor&>(t)); });
  }
};

using ModelGrads = ModelParams;

/// Weights uniform in +-sqrt(3/fan_in), biases zero.
ModelParams init_params(const ModelConfig& cfg, int n_labeled, Rng& rng);
ModelGrads zeros_like(const ModelParams& params);

struct BackboneCache {
  Tensor input;
  std::vector<Tensor> conv_out;       // pre-relu
  std::vector<Tensor> relu_out;
  std::vector<MaxPoolResult> pooled;  // output of each block
};

Tensor backbone_forward(const ModelParams& params, const ModelConfig& cfg,
                        const Tensor& image, BackboneCache* cache = nullptr);

struct RpnOut {
  Tensor objectness;  // [A, Hf, Wf], person probability per anchor
  Tensor deltas;      // [4A, Hf, Wf]
  // caches for backward
  Tensor conv_out;  // pre-relu
  Tensor relu_out;
  Tensor obj_logits;  // [2A, Hf, Wf]
};

RpnOut rpn_forward(const ModelParams& params, const Tensor& features);

/**
 * Decode every anchor, clip to the image, drop sides below min_size, keep the
 * pre_nms_top_n best scores (ties by anchor index), greedy-NMS at
 * proposal_nms_thresh, truncate to post_nms_top_n. Returned in descending
 * score order.
 */
std::vector<Box> propose(const Tensor& objectness, const Tensor& deltas,
                         const std::vector<Box>& anchors, const ModelConfig& cfg);

std::vector<Box> model_anchors(const ModelConfig& cfg);

struct DetHeadOut {
  std::array<double, 2> probs;   // person, background
  std::array<double, 4> deltas;  // refinement
};

DetHeadOut detection_head(const ModelParams& params, const Tensor& pooled);

/// Unit-norm appearance embedding; throws DegenerateVectorError when the
/// projection collapses.
Vec reid_head(const ModelParams& params, const Tensor& pooled);

struct RpnIdentityOut {
  std::vector<Vec> embeddings;   // parallel to kept indices
  std::vector<int> kept;         // proposal indices that embedded cleanly
  int skipped = 0;               // degenerate proposals
};

/// Identity pathway of the proposal network: roi pool each proposal and
/// project to a unit-norm embedding. Training-only supervision input.
RpnIdentityOut rpn_identity_embed(const ModelParams& params, const ModelConfig& cfg,
                                  const Tensor& features, const std::vector<Box>& proposals);

/// Full inference: propose, score, refine, threshold at score_thresh, final
/// NMS, then embed every surviving detection. Detections whose embedding
/// collapses keep an empty embedding rather than failing the pipeline.
std::vector<Detection> search_forward(const ModelParams& params, const ModelConfig& cfg,
                                      const Tensor& image);

// ---------------------------------------------------------------------------
// Training-mode step. The non-differentiable decisions of an iteration
// (which anchors/boxes are sampled and their targets) are frozen into an
// IterationPlan, making the loss a deterministic function of the parameters;
// the same plan drives both the optimizer and the composite gradient check.

struct TrainStepFwd {
  BackboneCache backbone;
  Tensor features;
  RpnOut rpn;
  std::vector<Box> proposals;
};

TrainStepFwd begin_train_step(const ModelParams& params, const ModelConfig& cfg,
                              const Tensor& image);

struct IterationPlan {
  // RPN minibatch over anchors.
  std::vector<int> rpn_anchor;                         // anchor index
  std::vector<int> rpn_is_person;                      // 1 person / 0 background
  std::vector<std::array<double, 4>> rpn_reg_target;   // person entries only, others unused
  // Identity supervision on proposals (labeled ones only).
  std::vector<Box> rpn_oim_boxes;
  std::vector<int> rpn_oim_labels;
  // Head minibatch over candidate boxes.
  std::vector<Box> head_boxes;
  std::vector<int> head_is_person;                     // 1 foreground / 0 background
  std::vector<std::array<double, 4>> head_reg_target;  // foreground entries only
  std::vector<int> head_pids;  // pid >= 0, kUnlabeledPid, or kNoPid for background
  // Term toggles resolved from the stage and ablation variant.
  bool use_rpn_oim = false;
  bool use_head_oim = false;
  bool use_reid_softmax = false;
};

/// Embeddings the optimizer must feed into oim_update after its sgd step.
struct PendingOimUpdates {
  std::vector<Vec> embeddings;
  std::vector<int> labels;  // pid or kUnlabeledPid
};

/**
 * Evaluates every loss site of the plan against the cached forward pass and
 * accumulates analytic gradients for all parameters. Classification terms
 * are averaged over their minibatch, regression terms divided by the
 * positive count, identity terms averaged over contributing samples.
 */
LossParts finish_train_step(const ModelParams& params, const ModelConfig& cfg,
                            const OimState& oim, const TrainStepFwd& fwd,
                            const IterationPlan& plan, ModelGrads& grads,
                            PendingOimUpdates& pending);

/// begin + finish in one call with a fixed plan; the composite target of the
/// finite-difference suite.
LossParts model_train_step(const ModelParams& params, const ModelConfig& cfg,
                           const OimState& oim, const Tensor& image,
                           const IterationPlan& plan, ModelGrads& grads,
                           PendingOimUpdates& pending);

}  // namespace fmts

#endif
