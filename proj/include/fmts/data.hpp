#ifndef FMTS_DATA_HPP
#define FMTS_DATA_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "fmts/geometry.hpp"
#include "fmts/image.hpp"
#include "fmts/tensor.hpp"

namespace fmts {

struct SynthConfig {
  int n_identities = 16;           // total rendered identities
  double unlabeled_fraction = 0.25;  // trailing fraction annotated as pid -1
  int scenes_train = 200;
  int scenes_test = 40;
  int image_h = 96;
  int image_w = 96;
  int persons_min = 1;
  int persons_max = 4;
  int patch_min = 16;
  int patch_max = 28;
  bool jitter = true;  // per-instance +-10% brightness
  std::uint64_t seed = 7;
};

/// Throws ConfigError on an unusable configuration.
void validate_config(const SynthConfig& cfg);

/**
 * Deterministic appearance for one identity: a 1px light border around a
 * 4x4 two-color block pattern. Patterns are distance-8 binary codes and the
 * two colors come from disjoint palettes, so any two identities (up to 32)
 * differ in well over a quarter of their pixels at any size >= 8.
 * `instance` seeds the optional brightness jitter only.
 */
Image render_identity_patch(int pid, int size, std::uint64_t seed, long instance = 0,
                            bool jitter = true);

/**
 * Writes out_dir/{train,test}/manifest.json plus images/. Every identity
 * occurs in at least two distinct train scenes; every labeled identity in at
 * least two distinct test scenes. Boxes within a scene have pairwise
 * IoU <= 0.3 (rejection sampling). Byte-identical across reruns.
 */
void generate_synthetic(const SynthConfig& cfg, const std::string& out_dir);

struct SceneAnnotation {
  std::string image_id;
  std::string image_path;  // relative to the manifest
  std::vector<Box> boxes;
  std::vector<int> pids;  // parallel to boxes; >= 0 labeled, -1 unlabeled
};

struct Dataset {
  std::string root;  // directory containing the manifest
  int image_h = 0, image_w = 0;
  std::vector<SceneAnnotation> scenes;
  std::vector<Image> images;  // parallel to scenes

  /// 1 + the largest labeled pid, 0 when none.
  int n_labeled() const;
  int scene_index(const std::string& image_id) const;
};

/// Loads and fully re-validates a dataset; throws ValidationError naming the
/// offending scene on any violation.
Dataset load_dataset(const std::string& manifest_path);

struct QuerySpec {
  std::string image_id;
  Box box;  // ground-truth crop of the query person
  int pid = 0;
};

struct QueryCase {
  QuerySpec query;
  std::vector<std::string> gallery;  // scene ids, query scene excluded
};

struct Protocol {
  std::vector<int> gallery_sizes;
  std::vector<std::vector<QueryCase>> per_size;  // parallel to gallery_sizes
  std::vector<std::string> warnings;
};

/**
 * One query per labeled identity (its first occurrence in scene order). Each
 * gallery holds one seeded positive scene plus seeded distractors up to the
 * requested size, never the query scene itself; identities seen in fewer
 * than two scenes are skipped with a warning.
 */
Protocol make_protocol(const Dataset& ds, const std::vector<int>& gallery_sizes,
                       std::uint64_t seed);

}  // namespace fmts

#endif
