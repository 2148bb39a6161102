#pragma once

#include <string>

#include "sri/trainer.hpp"

namespace sri {

// Versioned binary checkpoint: "SRIG" magic, format version, LayerSpec,
// little-endian 64-bit parameter array, optional trainer section (optimizer
// moments, step size, iteration, seed, running statistics), CRC-32 trailer.
// Byte layout is documented in the README; round trips are bit-exact.
void checkpoint_save(const std::string& path, const TrainState& state,
                     bool include_trainer_section = true);
TrainState checkpoint_load(const std::string& path);

void checkpoint_save_params(const std::string& path, const LayerSpec& spec, const ParamSet& params);

// Atomic file write used for every artifact output (tmp + rename).
void write_file_atomic(const std::string& path, const std::string& bytes);

}  // namespace sri
