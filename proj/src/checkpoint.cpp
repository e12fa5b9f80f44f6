#include "fmts/checkpoint.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"

#include "fmts/errors.hpp"
#include "fmts/ops.hpp"

namespace fmts {

namespace {

using ordered_json = nlohmann::ordered_json;

ordered_json tensor_to_json(const Tensor& t) {
  ordered_json j;
  j["dims"] = t.dims();
  j["data"] = t.data();
  return j;
}

Tensor tensor_from_json(const ordered_json& j, const std::string& what) {
  if (!j.contains("dims") || !j.contains("data")) {
    throw ValidationError("checkpoint tensor " + what + " needs dims and data");
  }
  try {
    return Tensor(j["dims"].get<std::vector<int>>(), j["data"].get<Vec>());
  } catch (const ShapeError& e) {
    throw ValidationError("checkpoint tensor " + what + ": " + e.what());
  }
}

ordered_json config_to_json(const ModelConfig& cfg) {
  ordered_json j;
  j["image_h"] = cfg.image_h;
  j["image_w"] = cfg.image_w;
  j["channels"] = cfg.channels;
  j["anchor_sizes"] = cfg.anchor_sizes;
  j["anchor_ratios"] = cfg.anchor_ratios;
  j["roi_size"] = cfg.roi_size;
  j["feature_dim"] = cfg.feature_dim;
  j["embedding_dim"] = cfg.embedding_dim;
  j["pre_nms_top_n"] = cfg.pre_nms_top_n;
  j["post_nms_top_n"] = cfg.post_nms_top_n;
  j["proposal_nms_thresh"] = cfg.proposal_nms_thresh;
  j["min_size"] = cfg.min_size;
  j["score_thresh"] = cfg.score_thresh;
  j["final_nms_thresh"] = cfg.final_nms_thresh;
  return j;
}

ModelConfig config_from_json(const ordered_json& j) {
  ModelConfig cfg;
  cfg.image_h = j.at("image_h").get<int>();
  cfg.image_w = j.at("image_w").get<int>();
  cfg.channels = j.at("channels").get<std::vector<int>>();
  cfg.anchor_sizes = j.at("anchor_sizes").get<std::vector<double>>();
  cfg.anchor_ratios = j.at("anchor_ratios").get<std::vector<double>>();
  cfg.roi_size = j.at("roi_size").get<int>();
  cfg.feature_dim = j.at("feature_dim").get<int>();
  cfg.embedding_dim = j.at("embedding_dim").get<int>();
  cfg.pre_nms_top_n = j.at("pre_nms_top_n").get<int>();
  cfg.post_nms_top_n = j.at("post_nms_top_n").get<int>();
  cfg.proposal_nms_thresh = j.at("proposal_nms_thresh").get<double>();
  cfg.min_size = j.at("min_size").get<double>();
  cfg.score_thresh = j.at("score_thresh").get<double>();
  cfg.final_nms_thresh = j.at("final_nms_thresh").get<double>();
  return cfg;
}

ModelParams make_empty_params(const ModelConfig& cfg, int n_labeled) {
  const int C = cfg.feature_channels();
  const int A = cfg.anchors_per_cell();
  ModelParams p;
  int in_ch = 3;
  for (int out_ch : cfg.channels) {
    p.backbone.push_back({Tensor::zeros({out_ch, in_ch, 3, 3}), Tensor::zeros({out_ch})});
    in_ch = out_ch;
  }
  p.rpn_conv = {Tensor::zeros({C, C, 3, 3}), Tensor::zeros({C})};
  p.rpn_obj = {Tensor::zeros({2 * A, C, 1, 1}), Tensor::zeros({2 * A})};
  p.rpn_reg = {Tensor::zeros({4 * A, C, 1, 1}), Tensor::zeros({4 * A})};
  p.rpn_id = {Tensor::zeros({cfg.embedding_dim, cfg.flat_dim()}),
              Tensor::zeros({cfg.embedding_dim})};
  p.head_fc = {Tensor::zeros({cfg.feature_dim, cfg.flat_dim()}),
               Tensor::zeros({cfg.feature_dim})};
  p.head_cls = {Tensor::zeros({2, cfg.feature_dim}), Tensor::zeros({2})};
  p.head_reg = {Tensor::zeros({4, cfg.feature_dim}), Tensor::zeros({4})};
  p.reid_proj = {Tensor::zeros({cfg.embedding_dim, cfg.feature_dim}),
                 Tensor::zeros({cfg.embedding_dim})};
  p.reid_softmax_w = Tensor::zeros({cfg.embedding_dim, n_labeled + 1});
  p.n_labeled = n_labeled;
  return p;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ModelParams& params, const OimState& oim) {
  ordered_json j;
  j["format_version"] = 1;
  j["model_config"] = config_to_json(cfg);
  j["n_labeled"] = params.n_labeled;

  ordered_json tensors;
  params.for_each([&](const std::string& name, const Tensor& t) {
    if (!t.all_finite()) {
      throw NumericError("refusing to save non-finite tensor " + name);
    }
    tensors[name] = tensor_to_json(t);
  });
  j["tensors"] = std::move(tensors);

  ordered_json jo;
  jo["gamma"] = oim.gamma;
  jo["mu"] = oim.mu;
  jo["capacity"] = oim.capacity;
  jo["v"] = tensor_to_json(oim.v);
  ordered_json ju = ordered_json::array();
  for (const Vec& row : oim.u) ju.push_back(row);
  jo["u"] = std::move(ju);
  j["oim_state"] = std::move(jo);

  std::ofstream out(path);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out << j.dump(1) << "\n";
  if (!out) throw IoError("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint " + path);
  ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ValidationError("checkpoint " + path + " is not valid JSON: " + e.what());
  }
  if (!j.contains("format_version") || j["format_version"] != 1) {
    throw ValidationError("checkpoint format_version must be 1");
  }

  Checkpoint ck;
  ck.config = config_from_json(j.at("model_config"));
  validate_config(ck.config);
  const int n_labeled = j.at("n_labeled").get<int>();
  if (n_labeled < 1) throw ValidationError("checkpoint n_labeled must be >= 1");
  ck.params = make_empty_params(ck.config, n_labeled);

  const auto& tensors = j.at("tensors");
  std::set<std::string> seen;
  ck.params.for_each([&](const std::string& name, Tensor& t) {
    if (!tensors.contains(name)) {
      throw ValidationError("checkpoint is missing tensor " + name);
    }
    Tensor loaded = tensor_from_json(tensors[name], name);
    if (!loaded.same_shape(t)) {
      throw ValidationError("checkpoint tensor " + name + " has dims " + loaded.shape_str() +
                            ", expected " + t.shape_str());
    }
    if (!loaded.all_finite()) {
      throw ValidationError("checkpoint tensor " + name + " contains non-finite values");
    }
    t = std::move(loaded);
    seen.insert(name);
  });
  if (seen.size() != tensors.size()) {
    throw ValidationError("checkpoint contains unexpected extra tensors");
  }

  const auto& jo = j.at("oim_state");
  ck.oim.gamma = jo.at("gamma").get<double>();
  ck.oim.mu = jo.at("mu").get<double>();
  ck.oim.capacity = jo.at("capacity").get<int>();
  ck.oim.v = tensor_from_json(jo.at("v"), "oim v");
  if (ck.oim.v.rank() != 2 || ck.oim.v.dim(0) != n_labeled) {
    throw ValidationError("identity memory shape does not match n_labeled");
  }
  if (!(ck.oim.gamma > 0.0)) throw ValidationError("oim gamma must be positive");
  if (ck.oim.mu < 0.0 || ck.oim.mu >= 1.0) throw ValidationError("oim mu must lie in [0,1)");
  if (ck.oim.capacity < 0) throw ValidationError("oim capacity must be >= 0");
  for (const auto& jrow : jo.at("u")) {
    Vec row = jrow.get<Vec>();
    if (static_cast<int>(row.size()) != ck.oim.v.dim(1)) {
      throw ValidationError("queue row dimension mismatch");
    }
    ck.oim.u.push_back(std::move(row));
  }
  if (static_cast<int>(ck.oim.u.size()) > ck.oim.capacity) {
    throw ValidationError("queue exceeds its capacity");
  }
  const int D = ck.oim.v.dim(1);
  for (int i = 0; i < n_labeled; ++i) {
    Vec row(static_cast<std::size_t>(D));
    for (int d = 0; d < D; ++d) row[static_cast<std::size_t>(d)] = ck.oim.v.at2(i, d);
    if (std::fabs(norm2(row) - 1.0) > 1e-9) {
      throw ValidationError("identity memory row " + std::to_string(i) + " is not unit-norm");
    }
  }
  for (const Vec& row : ck.oim.u) {
    if (std::fabs(norm2(row) - 1.0) > 1e-9) {
      throw ValidationError("queue entry is not unit-norm");
    }
  }
  return ck;
}

}  // namespace fmts
