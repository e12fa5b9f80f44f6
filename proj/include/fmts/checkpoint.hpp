#ifndef FMTS_CHECKPOINT_HPP
#define FMTS_CHECKPOINT_HPP

#include <string>

#include "fmts/losses.hpp"
#include "fmts/model.hpp"

namespace fmts {

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  OimState oim;
};

/**
 * Single JSON document: format_version, model_config, n_labeled, every named
 * parameter tensor as {dims, data}, and the identity memory. Doubles are
 * printed shortest-roundtrip, so save -> load -> save is byte-identical.
 */
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ModelParams& params, const OimState& oim);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace fmts

#endif
