#ifndef FMTS_RUNCONFIG_HPP
#define FMTS_RUNCONFIG_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "fmts/data.hpp"
#include "fmts/model.hpp"
#include "fmts/training.hpp"

namespace fmts {

/// Everything a run needs, loadable from one JSON file. Sections: "synth",
/// "model", "train", "eval" (gallery_sizes, protocol_seed, score thresholds
/// live in model), plus top-level "out_dir".
struct RunConfig {
  SynthConfig synth;
  ModelConfig model;
  TrainConfig train;
  std::vector<int> gallery_sizes = {2, 5, 10, 20, 40};
  std::uint64_t protocol_seed = 7;
  std::string out_dir = "out";
};

/// Defaults serialized back out, for --dump-config style introspection.
std::string run_config_to_json(const RunConfig& cfg);

/**
 * Loads `path` (empty path = all defaults), then applies dotted overrides of
 * the form "train.lr0=0.001" or "eval.gallery_sizes=[2,5]" (values parsed as
 * JSON, bare words as strings). Unknown keys anywhere reject with
 * ConfigError. The result is fully validated.
 */
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

}  // namespace fmts

#endif
