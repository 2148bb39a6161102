#pragma once

#include <span>
#include <string>
#include <vector>

#include "sri/shortrun.hpp"

namespace sri {

struct StepGrid {
  std::vector<double> values;  // strictly increasing, all positive

  static StepGrid range(double lo, double hi, double step);
  void validate() const;
};

struct TuneCandidate {
  double s = 0;
  double surrogate = 0;
  double std_error = 0;
  double wall_ms = 0;
  bool diverged = false;
};

struct TuneReport {
  std::string method;  // "grid" or "gradient"
  std::vector<TuneCandidate> rows;
  double chosen = 0;
};

struct TuneOptions {
  int samples = 16;        // outer Monte Carlo draws per example
  EntropyOptions entropy;  // estimator family for the surrogate
  double lr = 1e-3;        // gradient mode
  int iterations = 10;     // gradient mode
  double s_floor = 1e-4;   // projection floor for gradient mode
};

// Evaluates the surrogate at each candidate with common random traces (the
// same z0 and eps across candidates) and returns the argmin; ties break
// toward smaller s. Diverged candidates are recorded and skipped; if every
// candidate diverges the error lists them all.
TuneReport grid_search(const Generator& gen, const ParamSet& theta, std::span<const Tensor> batch,
                       ShortRunConfig cfg, const StepGrid& grid, std::uint64_t seed, ObsModel obs,
                       const TuneOptions& opts = {});

// Projected gradient descent on the surrogate, differentiating through the
// unrolled chain, the log-determinant, and log p(x, z_K). On a non-finite
// gradient the last valid iterate is returned.
TuneReport gradient_descent_s(const Generator& gen, const ParamSet& theta,
                              std::span<const Tensor> batch, ShortRunConfig cfg,
                              std::uint64_t seed, ObsModel obs, const TuneOptions& opts = {});

// CSV rows: method, s, surrogate, stderr, wall_ms. Timings are zeroed unless
// include_timing is set, keeping seeded outputs byte-identical.
std::string tune_report_csv(const TuneReport& report, bool include_timing = false);

}  // namespace sri
