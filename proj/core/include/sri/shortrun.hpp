#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "sri/generator.hpp"
#include "sri/tape.hpp"

namespace sri {

// K-step Langevin dynamics with a fixed step size, initialized from the
// standard-normal prior on every layer.
struct ShortRunConfig {
  int steps = 25;
  double step_size = 0.05;

  void validate() const;
};

// The injected randomness making z_K = F(z0, eps) a deterministic map.
struct NoiseTrace {
  LatentStack z0;
  std::vector<LatentStack> eps;  // one per step
};

// Regenerable from (seed, iteration, example).
NoiseTrace make_noise_trace(const LayerSpec& spec, int steps, std::uint64_t seed,
                            std::uint64_t iteration, std::uint64_t example);

struct InferOptions {
  bool record_trajectory = false;
  const Tensor* mask = nullptr;  // 0/1 over pixels; restricts the data term
};

struct InferenceResult {
  LatentStack zK;
  std::vector<LatentStack> trajectory;  // K+1 states when recorded
  std::vector<double> grad_norms;
};

// z + s grad_z log p(x, z) + sqrt(2 s) eps, applied jointly over all layers.
// Accepts s = 0 for the identity-limit case.
LatentStack langevin_step(const Generator& gen, const ParamSet& theta, const Tensor& x,
                          const LatentStack& z, double s, const LatentStack& eps, ObsModel obs,
                          const Tensor* mask = nullptr);

InferenceResult infer(const Generator& gen, const ParamSet& theta, const Tensor& x,
                      const ShortRunConfig& cfg, const NoiseTrace& trace, ObsModel obs,
                      const InferOptions& opts = {});

// Unrolled K-step chain recorded on a tape; per-step posterior gradients are
// emitted as differentiable nodes so the chain can be differentiated through.
struct ChainGraph {
  ad::Var z0;  // leaf [d]
  ad::Var zK;  // [d]
  ad::Var s;   // scalar leaf when requested, otherwise invalid
  ad::Var x;   // the observation constant
  Generator::ThetaVars theta;
};
ChainGraph build_chain_graph(ad::Tape& t, const Generator& gen, const ParamSet& theta,
                             const Tensor& x, const ShortRunConfig& cfg, const NoiseTrace& trace,
                             ObsModel obs, bool s_as_leaf = false, const Tensor* mask = nullptr);

// Dense d x d Jacobian dF(z0, eps)/dz0, rows assembled from VJPs.
Tensor short_run_jacobian(const Generator& gen, const ParamSet& theta, const Tensor& x,
                          const ShortRunConfig& cfg, const NoiseTrace& trace, ObsModel obs);

// Estimator family for -E[log q_s(z_K)]. SingleTrace evaluates the density of
// each draw on its own generating trace, log p(z0) - log|det dF/dz0|; Mixture
// averages inverted-trace densities over inner_samples independent noise
// draws (the consistent reading of the nested expectation).
enum class EntropyMode { SingleTrace, Mixture };

struct EntropyOptions {
  EntropyMode mode = EntropyMode::Mixture;
  int inner_samples = 0;  // 0 -> same as the outer sample count
  int newton_max_iters = 40;
  double newton_tol = 1e-9;
  bool strict_inversion = false;  // throw instead of falling back on failure
};

double entropy_estimate(const Generator& gen, const ParamSet& theta, const Tensor& x,
                        const ShortRunConfig& cfg, int samples, std::uint64_t seed, ObsModel obs,
                        const EntropyOptions& opts = {});

// Core change-of-variable estimator over an arbitrary differentiable map.
// The builder receives the z0 draw and (outer, inner) trace indices; inner is
// -1 for the generating trace.
struct MapGraph {
  ad::Var z0;
  ad::Var out;
};
using TraceMap = std::function<MapGraph(ad::Tape&, const Tensor& z0, int outer, int inner)>;
double entropy_core(const TraceMap& map, int dim, int samples, std::uint64_t seed,
                    const EntropyOptions& opts);

// Batch-mean surrogate E_q[log q_s(z) - log p(x, z)]; differs from the mean
// KL to the posterior by the s-independent constant mean log p(x).
struct SurrogateStats {
  double value = 0.0;
  double std_error = 0.0;
  long evaluations = 0;
};
SurrogateStats kl_surrogate(const Generator& gen, const ParamSet& theta,
                            std::span<const Tensor> batch, const ShortRunConfig& cfg, int samples,
                            std::uint64_t seed, ObsModel obs, const EntropyOptions& opts = {});

// Surrogate value plus d(surrogate)/ds via forward tangents through the
// unrolled chain; the log-det derivative uses the LU trace identity, and
// mixture-mode inner traces are corrected through the implicit function
// theorem at the inverted point.
struct SurrogateGrad {
  double value = 0.0;
  double grad = 0.0;
  double std_error = 0.0;
};
SurrogateGrad kl_surrogate_with_sgrad(const Generator& gen, const ParamSet& theta,
                                      std::span<const Tensor> batch, const ShortRunConfig& cfg,
                                      int samples, std::uint64_t seed, ObsModel obs,
                                      const EntropyOptions& opts = {});

// log of the standard-normal density of a flat vector.
double std_normal_log_density(const Tensor& z);

}  // namespace sri
