#include "sri/shortrun.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "linalg.hpp"
#include "sri/error.hpp"
#include "sri/parallel.hpp"

namespace sri {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kChainNormGuard = 1e6;

LatentStack draw_latent_normal(const LayerSpec& spec, CounterRng& rng) {
  LatentStack z;
  for (int d : spec.latent_dims) z.blocks.push_back(rng.normal_tensor({d}));
  return z;
}

std::vector<LatentStack> draw_noise_stack(const LayerSpec& spec, int steps, CounterRng& rng) {
  std::vector<LatentStack> eps;
  eps.reserve(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k) eps.push_back(draw_latent_normal(spec, rng));
  return eps;
}

std::uint64_t trace_key(std::uint64_t example, std::uint64_t outer) {
  return (example << 32) ^ outer;
}

double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

void ShortRunConfig::validate() const {
  if (steps < 0) throw ConfigError("short-run steps must be >= 0");
  if (step_size <= 0) throw ConfigError("step size must be positive");
}

double std_normal_log_density(const Tensor& z) {
  double q = 0;
  for (double v : z.data) q += v * v;
  return -0.5 * q - 0.5 * static_cast<double>(z.size()) * kLog2Pi;
}

NoiseTrace make_noise_trace(const LayerSpec& spec, int steps, std::uint64_t seed,
                            std::uint64_t iteration, std::uint64_t example) {
  NoiseTrace tr;
  CounterRng init(seed, RngStream::ChainInit, iteration, example);
  tr.z0 = draw_latent_normal(spec, init);
  CounterRng noise(seed, RngStream::ChainNoise, iteration, example);
  tr.eps = draw_noise_stack(spec, steps, noise);
  return tr;
}

LatentStack langevin_step(const Generator& gen, const ParamSet& theta, const Tensor& x,
                          const LatentStack& z, double s, const LatentStack& eps, ObsModel obs,
                          const Tensor* mask) {
  if (s < 0) throw Error("langevin_step: negative step size");
  ad::Tape t;
  auto tv = gen.theta_consts(t, theta);
  ad::Var xc = t.constant(x.reshaped({gen.spec().data_dim()}));
  ad::Var zl = t.leaf(z.flat());
  ad::Var mk;
  if (mask) mk = t.constant(mask->reshaped({gen.spec().data_dim()}));
  ad::Var lj = gen.log_joint(t, tv, xc, zl, obs.sigma, mk);
  auto g = t.backward_values(lj, std::vector<ad::Var>{zl});
  Tensor grad = g.count(zl.id) ? g.at(zl.id) : Tensor::zeros(zl.shape());
  if (!grad.finite()) throw Error("langevin_step: non-finite posterior gradient");
  Tensor zf = z.flat();
  Tensor ef = eps.flat();
  double c = std::sqrt(2.0 * s);
  for (std::int64_t i = 0; i < zf.size(); ++i) zf[i] = (zf[i] + s * grad[i]) + c * ef[i];
  return LatentStack::from_flat(zf, gen.spec());
}

InferenceResult infer(const Generator& gen, const ParamSet& theta, const Tensor& x,
                      const ShortRunConfig& cfg, const NoiseTrace& trace, ObsModel obs,
                      const InferOptions& opts) {
  cfg.validate();
  if (static_cast<int>(trace.eps.size()) < cfg.steps)
    throw ShapeError("noise trace has " + std::to_string(trace.eps.size()) + " steps, config needs " +
                     std::to_string(cfg.steps));
  InferenceResult res;
  LatentStack z = trace.z0;
  if (opts.record_trajectory) res.trajectory.push_back(z);
  for (int k = 0; k < cfg.steps; ++k) {
    LatentStack next;
    try {
      next = langevin_step(gen, theta, x, z, cfg.step_size, trace.eps[static_cast<std::size_t>(k)],
                           obs, opts.mask);
    } catch (const Error& e) {
      throw ChainDivergedError("langevin step " + std::to_string(k) + ": " + e.what(), k);
    }
    Tensor zf = z.flat();
    Tensor nf = next.flat();
    Tensor g({static_cast<int>(zf.size())});
    // recover the gradient norm from the update (noise term removed)
    double c = std::sqrt(2.0 * cfg.step_size);
    Tensor ef = trace.eps[static_cast<std::size_t>(k)].flat();
    for (std::int64_t i = 0; i < zf.size(); ++i)
      g[i] = cfg.step_size > 0 ? (nf[i] - c * ef[i] - zf[i]) / cfg.step_size : 0.0;
    res.grad_norms.push_back(norm2(g));
    z = std::move(next);
    double zn = norm2(z.flat());
    if (zn > kChainNormGuard)
      throw ChainDivergedError("chain state norm " + std::to_string(zn) +
                                   " exceeded stability guard at step " + std::to_string(k),
                               k);
    if (opts.record_trajectory) res.trajectory.push_back(z);
  }
  res.zK = std::move(z);
  return res;
}

ChainGraph build_chain_graph(ad::Tape& t, const Generator& gen, const ParamSet& theta,
                             const Tensor& x, const ShortRunConfig& cfg, const NoiseTrace& trace,
                             ObsModel obs, bool s_as_leaf, const Tensor* mask) {
  cfg.validate();
  if (static_cast<int>(trace.eps.size()) < cfg.steps)
    throw ShapeError("noise trace too short for chain graph");
  ChainGraph cg;
  cg.theta = gen.theta_consts(t, theta);
  cg.x = t.constant(x.reshaped({gen.spec().data_dim()}));
  ad::Var mk;
  if (mask) mk = t.constant(mask->reshaped({gen.spec().data_dim()}));
  cg.z0 = t.leaf(trace.z0.flat());
  ad::Var sqrt2s;
  if (s_as_leaf) {
    cg.s = t.leaf(Tensor::scalar(cfg.step_size));
    sqrt2s = t.sqrt(t.scale(cg.s, 2.0));
  }
  double c = std::sqrt(2.0 * cfg.step_size);
  ad::Var z = cg.z0;
  for (int k = 0; k < cfg.steps; ++k) {
    ad::Var lj = gen.log_joint(t, cg.theta, cg.x, z, obs.sigma, mk);
    auto grads = t.backward(lj, std::vector<ad::Var>{z});
    auto it = grads.find(z.id);
    if (it == grads.end()) throw Error("chain graph: posterior gradient vanished structurally");
    ad::Var g = it->second;
    ad::Var ec = t.constant(trace.eps[static_cast<std::size_t>(k)].flat());
    if (s_as_leaf)
      z = t.add(t.add(z, t.smul(cg.s, g)), t.smul(sqrt2s, ec));
    else
      z = t.add(t.add(z, t.scale(g, cfg.step_size)), t.scale(ec, c));
    double zn = norm2(z.value());
    if (zn > kChainNormGuard)
      throw ChainDivergedError("chain graph state norm " + std::to_string(zn) +
                                   " exceeded stability guard at step " + std::to_string(k),
                               k);
  }
  cg.zK = z;
  return cg;
}

Tensor short_run_jacobian(const Generator& gen, const ParamSet& theta, const Tensor& x,
                          const ShortRunConfig& cfg, const NoiseTrace& trace, ObsModel obs) {
  int d = gen.spec().total_latent_dim();
  if (d > 128) throw ConfigError("short_run_jacobian: latent dimension exceeds the 128 cap");
  ad::Tape t;
  ChainGraph cg = build_chain_graph(t, gen, theta, x, cfg, trace, obs);
  return jacobian_values(t, cg.zK, cg.z0);
}

namespace {

// Newton inversion of a trace map at a target output. The Jacobian is
// refreshed every iteration and therefore valid at the solution.
struct InvertOutcome {
  Tensor z0;
  Tensor jac;
  bool ok = false;
};

InvertOutcome invert_map(const TraceMap& map, const Tensor& target, const Tensor& z0_init,
                         int outer, int inner, const EntropyOptions& opts) {
  InvertOutcome out;
  Tensor z = z0_init;
  double target_scale = 1.0 + max_abs(target);
  for (int it = 0; it < opts.newton_max_iters; ++it) {
    ad::Tape t;
    MapGraph mg = map(t, z, outer, inner);
    Tensor f = mg.out.value();
    Tensor r = f;
    axpy(-1.0, target, r);
    Tensor jac = jacobian_values(t, mg.out, mg.z0);
    if (max_abs(r) <= opts.newton_tol * target_scale) {
      out.z0 = std::move(z);
      out.jac = std::move(jac);
      out.ok = true;
      return out;
    }
    detail::Lu lu;
    try {
      lu = detail::lu_factor(jac);
    } catch (const SingularMatrixError&) {
      return out;
    }
    std::vector<double> step = r.data;
    lu.solve(step);
    for (std::int64_t i = 0; i < z.size(); ++i) z[i] -= step[static_cast<std::size_t>(i)];
    if (!z.finite()) return out;
  }
  return out;
}

struct OuterOutcome {
  double log_qhat = 0;
  Tensor zK;
};

OuterOutcome eval_outer(const TraceMap& map, const Tensor& z0, int outer,
                        const EntropyOptions& opts, int inner_count) {
  OuterOutcome out;
  ad::Tape t;
  MapGraph mg = map(t, z0, outer, -1);
  out.zK = mg.out.value();
  if (opts.mode == EntropyMode::SingleTrace) {
    Tensor jac = jacobian_values(t, mg.out, mg.z0);
    out.log_qhat = std_normal_log_density(z0) - ad::log_abs_det_value(jac);
    return out;
  }
  std::vector<double> dens;
  int failures = 0;
  for (int j = 0; j < inner_count; ++j) {
    InvertOutcome inv = invert_map(map, out.zK, z0, outer, j, opts);
    if (!inv.ok) {
      if (opts.strict_inversion)
        throw Error("entropy mixture: trace inversion failed (outer " + std::to_string(outer) +
                    ", inner " + std::to_string(j) + ")");
      ++failures;
      continue;
    }
    dens.push_back(std_normal_log_density(inv.z0) - ad::log_abs_det_value(inv.jac));
  }
  if (dens.empty())
    throw Error("entropy mixture: all " + std::to_string(inner_count) +
                " inner inversions failed for outer trace " + std::to_string(outer));
  out.log_qhat = log_sum_exp(dens) - std::log(static_cast<double>(dens.size()));
  (void)failures;
  return out;
}

TraceMap generator_trace_map(const Generator& gen, const ParamSet& theta, const Tensor& x,
                             const ShortRunConfig& cfg, ObsModel obs, std::uint64_t seed,
                             std::uint64_t example) {
  return [&gen, &theta, x, cfg, obs, seed, example](ad::Tape& t, const Tensor& z0, int outer,
                                                    int inner) -> MapGraph {
    NoiseTrace tr;
    tr.z0 = LatentStack::from_flat(z0, gen.spec());
    if (inner < 0) {
      CounterRng noise(seed, RngStream::ChainNoise, trace_key(example, static_cast<std::uint64_t>(outer)));
      tr.eps = draw_noise_stack(gen.spec(), cfg.steps, noise);
    } else {
      CounterRng noise(seed, RngStream::TuneInner, trace_key(example, static_cast<std::uint64_t>(outer)),
                       static_cast<std::uint64_t>(inner));
      tr.eps = draw_noise_stack(gen.spec(), cfg.steps, noise);
    }
    ChainGraph cg = build_chain_graph(t, gen, theta, x, cfg, tr, obs);
    return {cg.z0, cg.zK};
  };
}

Tensor draw_outer_z0(const LayerSpec& spec, std::uint64_t seed, std::uint64_t example, int outer) {
  CounterRng init(seed, RngStream::ChainInit, trace_key(example, static_cast<std::uint64_t>(outer)));
  LatentStack z = draw_latent_normal(spec, init);
  return z.flat();
}

}  // namespace

double entropy_core(const TraceMap& map, int dim, int samples, std::uint64_t seed,
                    const EntropyOptions& opts) {
  if (samples < 1) throw Error("entropy_core: sample count must be >= 1");
  int inner = opts.inner_samples > 0 ? opts.inner_samples : samples;
  std::vector<double> log_q(static_cast<std::size_t>(samples));
  std::exception_ptr err;
  parallel_for(samples, [&](int m) {
    CounterRng init(seed, RngStream::ChainInit, trace_key(0, static_cast<std::uint64_t>(m)));
    Tensor z0({dim});
    init.fill_normal(z0);
    log_q[static_cast<std::size_t>(m)] = eval_outer(map, z0, m, opts, inner).log_qhat;
  });
  double s = 0;
  for (double v : log_q) s += v;
  return -s / static_cast<double>(samples);
}

double entropy_estimate(const Generator& gen, const ParamSet& theta, const Tensor& x,
                        const ShortRunConfig& cfg, int samples, std::uint64_t seed, ObsModel obs,
                        const EntropyOptions& opts) {
  if (samples < 1) throw Error("entropy_estimate: sample count must be >= 1");
  TraceMap map = generator_trace_map(gen, theta, x, cfg, obs, seed, 0);
  return entropy_core(map, gen.spec().total_latent_dim(), samples, seed, opts);
}

SurrogateStats kl_surrogate(const Generator& gen, const ParamSet& theta,
                            std::span<const Tensor> batch, const ShortRunConfig& cfg, int samples,
                            std::uint64_t seed, ObsModel obs, const EntropyOptions& opts) {
  if (samples < 1) throw Error("kl_surrogate: sample count must be >= 1");
  if (batch.empty()) throw Error("kl_surrogate: empty batch");
  int inner = opts.inner_samples > 0 ? opts.inner_samples : samples;
  int n = static_cast<int>(batch.size());
  long total = static_cast<long>(n) * samples;
  std::vector<double> terms(static_cast<std::size_t>(total));
  parallel_for(static_cast<int>(total), [&](int idx) {
    int i = idx / samples;
    int m = idx % samples;
    const Tensor& x = batch[static_cast<std::size_t>(i)];
    TraceMap map = generator_trace_map(gen, theta, x, cfg, obs, seed, static_cast<std::uint64_t>(i));
    Tensor z0 = draw_outer_z0(gen.spec(), seed, static_cast<std::uint64_t>(i), m);
    OuterOutcome ev = eval_outer(map, z0, m, opts, inner);
    double lj = gen.log_joint_value(theta, x, LatentStack::from_flat(ev.zK, gen.spec()), obs);
    terms[static_cast<std::size_t>(idx)] = ev.log_qhat - lj;
  });
  SurrogateStats st;
  st.evaluations = total;
  double mean = 0;
  for (double v : terms) mean += v;
  mean /= static_cast<double>(total);
  double var = 0;
  for (double v : terms) var += (v - mean) * (v - mean);
  var = total > 1 ? var / static_cast<double>(total - 1) : 0.0;
  st.value = mean;
  st.std_error = std::sqrt(var / static_cast<double>(total));
  return st;
}

SurrogateGrad kl_surrogate_with_sgrad(const Generator& gen, const ParamSet& theta,
                                      std::span<const Tensor> batch, const ShortRunConfig& cfg,
                                      int samples, std::uint64_t seed, ObsModel obs,
                                      const EntropyOptions& opts) {
  if (samples < 1) throw Error("kl_surrogate_with_sgrad: sample count must be >= 1");
  if (batch.empty()) throw Error("kl_surrogate_with_sgrad: empty batch");
  int inner = opts.inner_samples > 0 ? opts.inner_samples : samples;
  int n = static_cast<int>(batch.size());
  long total = static_cast<long>(n) * samples;
  std::vector<double> vals(static_cast<std::size_t>(total));
  std::vector<double> grads(static_cast<std::size_t>(total));

  parallel_for(static_cast<int>(total), [&](int idx) {
    int i = idx / samples;
    int m = idx % samples;
    const Tensor& x = batch[static_cast<std::size_t>(i)];
    Tensor z0 = draw_outer_z0(gen.spec(), seed, static_cast<std::uint64_t>(i), m);

    NoiseTrace tr;
    tr.z0 = LatentStack::from_flat(z0, gen.spec());
    CounterRng noise(seed, RngStream::ChainNoise, trace_key(static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(m)));
    tr.eps = draw_noise_stack(gen.spec(), cfg.steps, noise);

    ad::Tape t;
    ChainGraph cg = build_chain_graph(t, gen, theta, x, cfg, tr, obs, /*s_as_leaf=*/true);
    ad::Var lj = gen.log_joint(t, cg.theta, cg.x, cg.zK, obs.sigma);

    double log_qhat = 0, dlog_qhat = 0;
    if (opts.mode == EntropyMode::SingleTrace) {
      ad::Var jac = jacobian_graph(t, cg.zK, cg.z0);
      ad::Var ld = t.log_abs_det(jac);
      t.set_tangent(cg.s, Tensor::scalar(1.0));
      t.forward_tangents();
      const Tensor* dld = t.tangent(ld);
      log_qhat = std_normal_log_density(z0) - ld.value().item();
      dlog_qhat = -(dld ? dld->item() : 0.0);
      const Tensor* dlj = t.tangent(lj);
      vals[static_cast<std::size_t>(idx)] = log_qhat - lj.value().item();
      grads[static_cast<std::size_t>(idx)] = dlog_qhat - (dlj ? dlj->item() : 0.0);
      return;
    }

    // Mixture mode: forward tangents through the outer chain, then correct
    // each inverted inner trace through the implicit function theorem.
    t.set_tangent(cg.s, Tensor::scalar(1.0));
    t.forward_tangents();
    Tensor zK_val = cg.zK.value();
    const Tensor* zt = t.tangent(cg.zK);
    Tensor zK_dot = zt ? *zt : Tensor::zeros(zK_val.shape);
    const Tensor* dlj_p = t.tangent(lj);
    double dlj = dlj_p ? dlj_p->item() : 0.0;
    double lj_val = lj.value().item();

    TraceMap map = generator_trace_map(gen, theta, x, cfg, obs, seed, static_cast<std::uint64_t>(i));
    std::vector<double> dens, ddens;
    for (int j = 0; j < inner; ++j) {
      InvertOutcome inv = invert_map(map, zK_val, z0, m, j, opts);
      if (!inv.ok) {
        if (opts.strict_inversion)
          throw Error("kl_surrogate_with_sgrad: inner inversion failed");
        continue;
      }
      NoiseTrace itr;
      itr.z0 = LatentStack::from_flat(inv.z0, gen.spec());
      CounterRng inoise(seed, RngStream::TuneInner, trace_key(static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(m)),
                        static_cast<std::uint64_t>(j));
      itr.eps = draw_noise_stack(gen.spec(), cfg.steps, inoise);

      ad::Tape t2;
      ChainGraph icg = build_chain_graph(t2, gen, theta, x, cfg, itr, obs, /*s_as_leaf=*/true);
      ad::Var jac = jacobian_graph(t2, icg.zK, icg.z0);
      ad::Var ld = t2.log_abs_det(jac);

      // dF/ds at the inverted point, holding z0' fixed
      t2.set_tangent(icg.s, Tensor::scalar(1.0));
      t2.forward_tangents();
      const Tensor* u_p = t2.tangent(icg.zK);
      Tensor u = u_p ? *u_p : Tensor::zeros(zK_val.shape);

      // dz0'/ds = J'^{-1} (dzK/ds - dF/ds)
      detail::Lu lu = detail::lu_factor(jac.value());
      std::vector<double> rhs(zK_dot.data);
      for (std::size_t q = 0; q < rhs.size(); ++q) rhs[q] -= u[static_cast<std::int64_t>(q)];
      lu.solve(rhs);
      Tensor tprime({static_cast<int>(rhs.size())}, rhs);

      t2.clear_tangents();
      t2.set_tangent(icg.s, Tensor::scalar(1.0));
      t2.set_tangent(icg.z0, tprime);
      t2.forward_tangents();
      const Tensor* dld_p = t2.tangent(ld);
      double dld = dld_p ? dld_p->item() : 0.0;

      dens.push_back(std_normal_log_density(inv.z0) - ld.value().item());
      ddens.push_back(-dot(inv.z0, tprime) - dld);
    }
    if (dens.empty()) throw Error("kl_surrogate_with_sgrad: all inner inversions failed");
    log_qhat = log_sum_exp(dens) - std::log(static_cast<double>(dens.size()));
    double dsum = 0;
    for (std::size_t j = 0; j < dens.size(); ++j) dsum += std::exp(dens[j] - log_qhat) * ddens[j] / static_cast<double>(dens.size());
    dlog_qhat = dsum;
    vals[static_cast<std::size_t>(idx)] = log_qhat - lj_val;
    grads[static_cast<std::size_t>(idx)] = dlog_qhat - dlj;
  });

  SurrogateGrad sg;
  double mean = 0, gmean = 0;
  for (double v : vals) mean += v;
  for (double g : grads) gmean += g;
  mean /= static_cast<double>(total);
  gmean /= static_cast<double>(total);
  double var = 0;
  for (double v : vals) var += (v - mean) * (v - mean);
  var = total > 1 ? var / static_cast<double>(total - 1) : 0.0;
  sg.value = mean;
  sg.grad = gmean;
  sg.std_error = std::sqrt(var / static_cast<double>(total));
  return sg;
}

}  // namespace sri
