#pragma once

#include <string>
#include <vector>

#include "sri/shortrun.hpp"

namespace sri {

// Pixel visibility mask; 1 = observed. At least one pixel must be observed.
struct OcclusionMask {
  Tensor mask;  // shape of x, entries 0 or 1

  void validate() const;
  static OcclusionMask random_pixels(int c, int h, int w, double keep_prob, std::uint64_t seed);
  static OcclusionMask center_square(int c, int h, int w);   // quarter-area occlusion
  static OcclusionMask horizontal_bar(int c, int h, int w);  // occluded band
  static OcclusionMask all_observed(int c, int h, int w);
};

OcclusionMask parse_mask_kind(const std::string& kind, int c, int h, int w, std::uint64_t seed);

double mse(const Tensor& a, const Tensor& b);

struct Reconstruction {
  Tensor xhat;  // [C, H, W]
  double mse = 0;
  LatentStack z;
};

// Short-run inference on a test example, then decode.
Reconstruction reconstruct(const Generator& gen, const ParamSet& theta, const Tensor& x,
                           const ShortRunConfig& cfg, ObsModel obs, std::uint64_t seed);

// Inference with the reconstruction term restricted to observed pixels;
// occluded entries of x cannot influence the result.
Tensor inpaint(const Generator& gen, const ParamSet& theta, const Tensor& x,
               const OcclusionMask& mask, const ShortRunConfig& cfg, ObsModel obs,
               std::uint64_t seed);

struct SampleGrid {
  int rows = 0, cols = 0;
  std::vector<Tensor> images;  // rows*cols entries, each [C, H, W]
  std::string caption;
};

// Resamples layer `vary_layer` (1..L, 1 = bottom) from its conditional prior
// while all other layers keep their exact values, then decodes each draw.
SampleGrid layerwise_sample(const Generator& gen, const ParamSet& theta, const LatentStack& base,
                            int vary_layer, int count, std::uint64_t seed);

SampleGrid prior_sample_grid(const Generator& gen, const ParamSet& theta, int rows, int cols,
                             std::uint64_t seed);

// Binary PPM (P6) montage plus a sidecar text file with the caption/layout.
std::string encode_ppm(const SampleGrid& grid);
void write_ppm_with_sidecar(const std::string& path, const SampleGrid& grid);

}  // namespace sri
