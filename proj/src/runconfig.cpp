#include "fmts/runconfig.hpp"

#include <fstream>

#include "fmts/errors.hpp"
#include "json.hpp"

namespace fmts {

namespace {

using nlohmann::ordered_json;

ordered_json synth_json(const SynthConfig& c) {
  ordered_json j;
  j["n_identities"] = c.n_identities;
  j["unlabeled_fraction"] = c.unlabeled_fraction;
  j["scenes_train"] = c.scenes_train;
  j["scenes_test"] = c.scenes_test;
  j["image_h"] = c.image_h;
  j["image_w"] = c.image_w;
  j["persons_min"] = c.persons_min;
  j["persons_max"] = c.persons_max;
  j["patch_min"] = c.patch_min;
  j["patch_max"] = c.patch_max;
  j["jitter"] = c.jitter;
  j["seed"] = c.seed;
  return j;
}

ordered_json model_json(const ModelConfig& c) {
  ordered_json j;
  j["image_h"] = c.image_h;
  j["image_w"] = c.image_w;
  j["channels"] = c.channels;
  j["anchor_sizes"] = c.anchor_sizes;
  j["anchor_ratios"] = c.anchor_ratios;
  j["roi_size"] = c.roi_size;
  j["feature_dim"] = c.feature_dim;
  j["embedding_dim"] = c.embedding_dim;
  j["pre_nms_top_n"] = c.pre_nms_top_n;
  j["post_nms_top_n"] = c.post_nms_top_n;
  j["proposal_nms_thresh"] = c.proposal_nms_thresh;
  j["min_size"] = c.min_size;
  j["score_thresh"] = c.score_thresh;
  j["final_nms_thresh"] = c.final_nms_thresh;
  return j;
}

ordered_json train_json(const TrainConfig& c) {
  ordered_json j;
  j["lr0"] = c.lr0;
  j["decay_factor"] = c.decay_factor;
  j["decay_every"] = c.decay_every;
  j["total_iters"] = c.total_iters;
  j["s1_end"] = c.s1_end;
  j["s2_end"] = c.s2_end;
  j["rpn_pos_iou"] = c.rpn_pos_iou;
  j["rpn_neg_iou"] = c.rpn_neg_iou;
  j["head_fg_iou"] = c.head_fg_iou;
  j["rpn_batch"] = c.rpn_batch;
  j["head_batch"] = c.head_batch;
  j["fg_fraction"] = c.fg_fraction;
  j["seed"] = c.seed;
  j["oim_gamma"] = c.oim_gamma;
  j["oim_mu"] = c.oim_mu;
  j["oim_capacity"] = c.oim_capacity;
  j["rpn_person_labels"] = c.rpn_person_labels;
  j["reid_multiple_loss"] = c.reid_multiple_loss;
  j["snapshot_every"] = c.snapshot_every;
  return j;
}

ordered_json full_json(const RunConfig& cfg) {
  ordered_json j;
  j["synth"] = synth_json(cfg.synth);
  j["model"] = model_json(cfg.model);
  j["train"] = train_json(cfg.train);
  ordered_json e;
  e["gallery_sizes"] = cfg.gallery_sizes;
  e["protocol_seed"] = cfg.protocol_seed;
  j["eval"] = e;
  j["out_dir"] = cfg.out_dir;
  return j;
}

// Reads one field out of a section, enforcing a matching JSON type.
template <typename T>
void take(ordered_json& section, const char* key, T& into, const std::string& where) {
  auto it = section.find(key);
  if (it == section.end()) return;
  try {
    into = it->get<T>();
  } catch (const ordered_json::exception& e) {
    throw ConfigError("bad value for " + where + "." + key + ": " + e.what());
  }
  section.erase(it);
}

void reject_leftovers(const ordered_json& section, const std::string& where) {
  for (auto it = section.begin(); it != section.end(); ++it) {
    throw ConfigError("unknown config key " + where + "." + it.key());
  }
}

void parse_synth(ordered_json s, SynthConfig& c) {
  take(s, "n_identities", c.n_identities, "synth");
  take(s, "unlabeled_fraction", c.unlabeled_fraction, "synth");
  take(s, "scenes_train", c.scenes_train, "synth");
  take(s, "scenes_test", c.scenes_test, "synth");
  take(s, "image_h", c.image_h, "synth");
  take(s, "image_w", c.image_w, "synth");
  take(s, "persons_min", c.persons_min, "synth");
  take(s, "persons_max", c.persons_max, "synth");
  take(s, "patch_min", c.patch_min, "synth");
  take(s, "patch_max", c.patch_max, "synth");
  take(s, "jitter", c.jitter, "synth");
  take(s, "seed", c.seed, "synth");
  reject_leftovers(s, "synth");
}

void parse_model(ordered_json s, ModelConfig& c) {
  take(s, "image_h", c.image_h, "model");
  take(s, "image_w", c.image_w, "model");
  take(s, "channels", c.channels, "model");
  take(s, "anchor_sizes", c.anchor_sizes, "model");
  take(s, "anchor_ratios", c.anchor_ratios, "model");
  take(s, "roi_size", c.roi_size, "model");
  take(s, "feature_dim", c.feature_dim, "model");
  take(s, "embedding_dim", c.embedding_dim, "model");
  take(s, "pre_nms_top_n", c.pre_nms_top_n, "model");
  take(s, "post_nms_top_n", c.post_nms_top_n, "model");
  take(s, "proposal_nms_thresh", c.proposal_nms_thresh, "model");
  take(s, "min_size", c.min_size, "model");
  take(s, "score_thresh", c.score_thresh, "model");
  take(s, "final_nms_thresh", c.final_nms_thresh, "model");
  reject_leftovers(s, "model");
}

void parse_train(ordered_json s, TrainConfig& c) {
  take(s, "lr0", c.lr0, "train");
  take(s, "decay_factor", c.decay_factor, "train");
  take(s, "decay_every", c.decay_every, "train");
  take(s, "total_iters", c.total_iters, "train");
  take(s, "s1_end", c.s1_end, "train");
  take(s, "s2_end", c.s2_end, "train");
  take(s, "rpn_pos_iou", c.rpn_pos_iou, "train");
  take(s, "rpn_neg_iou", c.rpn_neg_iou, "train");
  take(s, "head_fg_iou", c.head_fg_iou, "train");
  take(s, "rpn_batch", c.rpn_batch, "train");
  take(s, "head_batch", c.head_batch, "train");
  take(s, "fg_fraction", c.fg_fraction, "train");
  take(s, "seed", c.seed, "train");
  take(s, "oim_gamma", c.oim_gamma, "train");
  take(s, "oim_mu", c.oim_mu, "train");
  take(s, "oim_capacity", c.oim_capacity, "train");
  take(s, "rpn_person_labels", c.rpn_person_labels, "train");
  take(s, "reid_multiple_loss", c.reid_multiple_loss, "train");
  take(s, "snapshot_every", c.snapshot_every, "train");
  reject_leftovers(s, "train");
}

RunConfig parse_full(const ordered_json& root) {
  if (!root.is_object()) throw ConfigError("config root must be a JSON object");
  RunConfig cfg;
  ordered_json j = root;
  if (auto it = j.find("synth"); it != j.end()) {
    parse_synth(*it, cfg.synth);
    j.erase(it);
  }
  if (auto it = j.find("model"); it != j.end()) {
    parse_model(*it, cfg.model);
    j.erase(it);
  }
  if (auto it = j.find("train"); it != j.end()) {
    parse_train(*it, cfg.train);
    j.erase(it);
  }
  if (auto it = j.find("eval"); it != j.end()) {
    ordered_json e = *it;
    take(e, "gallery_sizes", cfg.gallery_sizes, "eval");
    take(e, "protocol_seed", cfg.protocol_seed, "eval");
    reject_leftovers(e, "eval");
    j.erase(it);
  }
  if (auto it = j.find("out_dir"); it != j.end()) {
    if (!it->is_string()) throw ConfigError("out_dir must be a string");
    cfg.out_dir = it->get<std::string>();
    j.erase(it);
  }
  reject_leftovers(j, "config");
  return cfg;
}

// "train.lr0=0.001" -> path into the document, value parsed as JSON when it
// scans, else kept as a string.
void apply_override(ordered_json& doc, const std::string& spec) {
  const std::size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override must look like section.key=value: " + spec);
  }
  const std::string path = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);
  ordered_json value = ordered_json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  ordered_json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string part = path.substr(start, dot - start);
    if (part.empty()) throw ConfigError("empty path segment in override " + spec);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (!node->is_object() && !node->is_null()) {
      throw ConfigError("override path crosses a non-object: " + spec);
    }
    start = dot + 1;
  }
}

}  // namespace

std::string run_config_to_json(const RunConfig& cfg) { return full_json(cfg).dump(1) + "\n"; }

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  ordered_json doc = ordered_json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    try {
      doc = ordered_json::parse(in);
    } catch (const ordered_json::exception& e) {
      throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
  }
  for (const std::string& o : overrides) apply_override(doc, o);
  RunConfig cfg = parse_full(doc);
  validate_config(cfg.synth);
  validate_config(cfg.model);
  validate_config(cfg.train);
  if (cfg.gallery_sizes.empty()) throw ConfigError("eval.gallery_sizes must be non-empty");
  for (int g : cfg.gallery_sizes) {
    if (g < 2) throw ConfigError("gallery sizes must be >= 2");
  }
  if (cfg.out_dir.empty()) throw ConfigError("out_dir must be non-empty");
  return cfg;
}

}  // namespace fmts
