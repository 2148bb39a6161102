#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sri/rng.hpp"
#include "sri/tape.hpp"
#include "sri/tensor.hpp"

namespace sri {

enum class GenMode { Conv, Mlp, Linear };
enum class Activation { Gelu, Tanh };

// Architecture of the top-down generator. latent_dims are listed top-down
// (d_L first). `width` is the conv channel count or the MLP hidden width.
struct LayerSpec {
  int layers = 1;
  std::vector<int> latent_dims = {16};
  int width = 16;
  int image_h = 16, image_w = 16, image_c = 1;
  GenMode mode = GenMode::Mlp;
  Activation activation = Activation::Gelu;
  bool skip_connections = true;
  bool tanh_output = true;

  int total_latent_dim() const;
  int data_dim() const { return image_h * image_w * image_c; }
  void validate() const;

  bool operator==(const LayerSpec&) const = default;
};

// Observation model x | z_1 ~ N(g_theta(z), sigma^2 I).
struct ObsModel {
  double sigma = 0.15;
};

// Per-example latents, one block per layer, top-down (z_L first).
struct LatentStack {
  std::vector<Tensor> blocks;

  Tensor flat() const;
  static LatentStack from_flat(const Tensor& flat, const LayerSpec& spec);
  static LatentStack zeros(const LayerSpec& spec);
  int total_dim() const;
};

// All generator weights and biases, flat-addressable for optimizer updates.
struct ParamSet {
  struct Entry {
    std::string name;
    Shape shape;
    std::int64_t offset = 0;
    std::int64_t fan_in = 1;
  };
  std::vector<Entry> entries;
  std::vector<double> flat;

  std::int64_t size() const { return static_cast<std::int64_t>(flat.size()); }
  const Entry& find(const std::string& name) const;
  Tensor get(const std::string& name) const;
  void set(const std::string& name, const Tensor& value);
};

class Generator {
 public:
  explicit Generator(LayerSpec spec);
  const LayerSpec& spec() const { return spec_; }

  // Fan-in-scaled Gaussian weights (std 1/sqrt(fan_in)), zero biases.
  ParamSet init_params(std::uint64_t seed) const;

  struct ThetaVars {
    std::vector<ad::Var> vars;  // one per ParamSet entry, same order
  };
  ThetaVars theta_consts(ad::Tape& t, const ParamSet& p) const;
  ThetaVars theta_leaves(ad::Tape& t, const ParamSet& p) const;

  // Mean image g_theta(z) for a full latent stack given as flat [d_total].
  ad::Var decode(ad::Tape& t, const ThetaVars& theta, ad::Var z_flat) const;

  // log p_theta(x, z) with every Gaussian normalizing constant included.
  // A 0/1 mask over pixels restricts the reconstruction term to observed ones.
  ad::Var log_joint(ad::Tape& t, const ThetaVars& theta, ad::Var x, ad::Var z_flat, double sigma,
                    ad::Var mask = {}) const;
  // Factors in generative order: p(z_L), p(z_{L-1}|..), ..., p(x|..).
  std::vector<ad::Var> log_joint_terms(ad::Tape& t, const ThetaVars& theta, ad::Var x,
                                       ad::Var z_flat, double sigma, ad::Var mask = {}) const;

  Tensor generate(const ParamSet& p, const LatentStack& z) const;
  double log_joint_value(const ParamSet& p, const Tensor& x, const LatentStack& z,
                         ObsModel obs) const;
  // grad_z log p(x, z), which equals grad_z log p(z | x).
  LatentStack grad_z_log_posterior(const ParamSet& p, const Tensor& x, const LatentStack& z,
                                   ObsModel obs) const;
  std::vector<double> grad_theta_log_joint(const ParamSet& p, const Tensor& x,
                                           const LatentStack& z, ObsModel obs) const;
  // Ancestral top-down sample; x is the mean image, no observation noise.
  // zero_layer_noise suppresses the per-layer innovation (test mode).
  std::pair<LatentStack, Tensor> sample_prior(const ParamSet& p, CounterRng& rng,
                                              bool zero_layer_noise = false) const;

 private:
  ad::Var act(ad::Tape& t, ad::Var v) const;
  ad::Var trunk_stage(ad::Tape& t, const ThetaVars& theta, int stage, ad::Var input,
                      ad::Var prev_trunk) const;
  ad::Var output_head(ad::Tape& t, const ThetaVars& theta, ad::Var trunk) const;
  ad::Var theta_var(const ThetaVars& theta, const std::string& name) const;

  LayerSpec spec_;
  ParamSet layout_;  // shapes/offsets only; flat empty
};

// Spec-level convenience.
ParamSet build_params(const LayerSpec& spec, std::uint64_t seed);

}  // namespace sri
