#pragma once

#include <functional>
#include <optional>
#include <string>

#include "sri/dataset.hpp"
#include "sri/shortrun.hpp"
#include "sri/stepsize.hpp"

namespace sri {

// Piecewise-constant learning rate: values[i] applies until boundaries[i].
struct LrSchedule {
  std::vector<double> values = {1e-4, 5e-5, 1e-5};
  std::vector<std::int64_t> boundaries = {10000, 20000};  // size = values.size() - 1

  double at(std::int64_t t) const;
  void validate() const;
};

struct SigmaSchedule {
  double start = 0.5;
  double end = 0.15;
  double anneal_frac = 0.6;  // fraction of total iterations spent annealing
};

enum class OptMode { Adam, Sgd };
enum class TuneMethod { Off, Grid, Gradient };

struct TuneSettings {
  TuneMethod method = TuneMethod::Grid;
  std::int64_t interval = 500;  // T_s
  StepGrid grid = StepGrid::range(0.01, 0.15, 0.01);
  int batch = 16;
  int samples = 16;       // outer draws M
  int inner_samples = 0;  // mixture inner draws, 0 -> M
  double lr = 1e-3;
  int iterations = 10;
};

struct TrainConfig {
  std::int64_t iterations = 2000;
  int batch = 64;
  LrSchedule lr;
  SigmaSchedule sigma;
  int steps = 25;  // Langevin K
  double s_init = 0.05;
  TuneSettings tune;
  OptMode optimizer = OptMode::Adam;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  int posterior_samples = 1;
  std::int64_t checkpoint_interval = 0;  // 0 -> final checkpoint only
  std::int64_t monitor_interval = 100;   // Jacobian health + surrogate metric
  std::uint64_t seed = 0;
  std::string out_dir;  // empty -> no files written
  bool timing = false;  // real wall_ms in metrics (breaks byte-determinism)

  void validate() const;
};

struct TrainState {
  LayerSpec spec;
  ParamSet theta;
  std::vector<double> m1, m2;  // optimizer moments
  std::int64_t opt_steps = 0;  // bias-correction counter
  double s = 0.05;
  std::int64_t iter = 0;
  std::uint64_t seed = 0;
  double ema_recon = 0.0;
  double last_surrogate = 0.0;
  double last_min_eig = 0.0;
};

struct MetricsRow {
  std::int64_t iteration = 0;
  double wall_ms = 0;
  double sigma = 0;
  double s = 0;
  double recon_mse = 0;
  double surrogate_kl = 0;
  double grad_norm = 0;
  double min_abs_eigenvalue = 0;
};
std::string metrics_header();
std::string metrics_csv_row(const MetricsRow& row);

struct TrainCallbacks {
  std::function<void(const TrainState&, const MetricsRow&)> on_iteration;
  std::function<void(std::int64_t, const TuneReport&)> on_tune;
};

double anneal_sigma(std::int64_t t, const TrainConfig& cfg);

TrainState init_train_state(const LayerSpec& spec, const TrainConfig& cfg);

// One ascent step on the batch-mean theta-gradient at the inferred latents.
// Returns false (leaving theta untouched) when the gradient is non-finite.
bool update_theta(TrainState& state, const TrainConfig& cfg, const Generator& gen,
                  std::span<const Tensor> xs, std::span<const LatentStack> zs, double lr,
                  double sigma_now, double* grad_norm_out = nullptr);

TrainState train(const LayerSpec& spec, const TrainConfig& cfg, const Dataset& dataset,
                 const TrainCallbacks& callbacks = {},
                 const TrainState* resume = nullptr);

}  // namespace sri
