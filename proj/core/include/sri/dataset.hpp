#pragma once

#include <cstdint>
#include <string>

#include "sri/tensor.hpp"

namespace sri {

// Examples as [N, C, H, W] with values in [-1, 1].
struct Dataset {
  Tensor data;
  std::string provenance;

  int count() const { return data.shape.empty() ? 0 : data.shape[0]; }
  int channels() const { return data.shape[1]; }
  int height() const { return data.shape[2]; }
  int width() const { return data.shape[3]; }
  Tensor example(int i) const;  // [C, H, W]
  void validate() const;
};

// IDX image file (big-endian magic 0x00000803), bytes rescaled to [-1, 1].
Dataset load_idx(const std::string& path);

// Raw dataset: "SRIR", u32 version, u32 n/c/h/w, little-endian f64 payload.
Dataset load_raw(const std::string& path);
void save_raw(const std::string& path, const Dataset& ds);

enum class SynthKind { Gaussians2d, Bars, Teacher };
SynthKind parse_synth_kind(const std::string& name);

struct TeacherParams {
  double w = 0.25;
  double bias = 0.0;
  double sigma = 0.1;
};

Dataset synth_dataset(SynthKind kind, int n, std::uint64_t seed);
Dataset teacher_dataset(const TeacherParams& teacher, int n, std::uint64_t seed);

// Parses "idx:PATH", "raw:PATH" or "synth:KIND[:N]".
Dataset load_dataset(const std::string& uri, std::uint64_t seed);

}  // namespace sri
