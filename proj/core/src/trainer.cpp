#include "sri/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "sri/checkpoint.hpp"
#include "sri/error.hpp"
#include "sri/parallel.hpp"

namespace sri {

namespace {

double now_ms() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double mean_sq_err(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

}  // namespace

double LrSchedule::at(std::int64_t t) const {
  std::size_t i = 0;
  while (i < boundaries.size() && t >= boundaries[i]) ++i;
  return values[i];
}

void LrSchedule::validate() const {
  if (values.empty()) throw ConfigError("learning-rate schedule needs at least one value");
  for (double v : values)
    if (v <= 0) throw ConfigError("learning rates must be positive");
  if (boundaries.size() + 1 != values.size())
    throw ConfigError("learning-rate schedule needs one boundary between consecutive values");
  std::int64_t prev = -1;
  for (std::int64_t b : boundaries) {
    if (b <= prev) throw ConfigError("learning-rate boundaries must increase");
    prev = b;
  }
}

void TrainConfig::validate() const {
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (batch < 1) throw ConfigError("batch size must be >= 1");
  lr.validate();
  if (sigma.start <= 0 || sigma.end <= 0) throw ConfigError("sigma schedule must be positive");
  if (sigma.anneal_frac < 0 || sigma.anneal_frac > 1)
    throw ConfigError("sigma anneal fraction must lie in [0, 1]");
  if (steps < 0) throw ConfigError("Langevin steps must be >= 0");
  if (s_init <= 0) throw ConfigError("initial step size must be positive");
  if (posterior_samples < 1) throw ConfigError("posterior samples must be >= 1");
  if (tune.method != TuneMethod::Off) {
    if (tune.interval < 1) throw ConfigError("tuning interval must be >= 1");
    if (tune.batch < 1 || tune.samples < 1) throw ConfigError("tuning batch and samples must be >= 1");
    tune.grid.validate();
  }
}

double anneal_sigma(std::int64_t t, const TrainConfig& cfg) {
  if (t < 0 || t > cfg.iterations) throw Error("anneal_sigma: iteration out of range");
  std::int64_t span = static_cast<std::int64_t>(cfg.sigma.anneal_frac * static_cast<double>(cfg.iterations));
  if (span <= 0 || t >= span) return cfg.sigma.end;
  double f = static_cast<double>(t) / static_cast<double>(span);
  return cfg.sigma.start + f * (cfg.sigma.end - cfg.sigma.start);
}

std::string metrics_header() {
  return "iteration,wall_ms,sigma,s,recon_mse,surrogate_kl,grad_norm,min_abs_eigenvalue";
}

std::string metrics_csv_row(const MetricsRow& r) {
  std::ostringstream os;
  os << r.iteration << ',' << fmt(r.wall_ms) << ',' << fmt(r.sigma) << ',' << fmt(r.s) << ','
     << fmt(r.recon_mse) << ',' << fmt(r.surrogate_kl) << ',' << fmt(r.grad_norm) << ','
     << fmt(r.min_abs_eigenvalue);
  return os.str();
}

TrainState init_train_state(const LayerSpec& spec, const TrainConfig& cfg) {
  TrainState st;
  st.spec = spec;
  Generator gen(spec);
  st.theta = gen.init_params(cfg.seed);
  st.m1.assign(st.theta.flat.size(), 0.0);
  st.m2.assign(st.theta.flat.size(), 0.0);
  st.s = cfg.s_init;
  st.seed = cfg.seed;
  return st;
}

bool update_theta(TrainState& state, const TrainConfig& cfg, const Generator& gen,
                  std::span<const Tensor> xs, std::span<const LatentStack> zs, double lr,
                  double sigma_now, double* grad_norm_out) {
  if (xs.size() != zs.size() || xs.empty())
    throw Error("update_theta: need one inferred latent stack per example");
  const std::size_t n = xs.size();
  const std::size_t p = state.theta.flat.size();
  std::vector<std::vector<double>> grads(n);
  parallel_for(static_cast<int>(n), [&](int i) {
    grads[static_cast<std::size_t>(i)] = gen.grad_theta_log_joint(
        state.theta, xs[static_cast<std::size_t>(i)], zs[static_cast<std::size_t>(i)], ObsModel{sigma_now});
  });
  std::vector<double> g(p, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) g[j] += grads[i][j];
  double inv = 1.0 / static_cast<double>(n);
  double norm_sq = 0;
  bool finite = true;
  for (auto& v : g) {
    v *= inv;
    if (!std::isfinite(v)) finite = false;
    norm_sq += v * v;
  }
  if (grad_norm_out) *grad_norm_out = std::sqrt(norm_sq);
  if (!finite) return false;

  if (cfg.optimizer == OptMode::Sgd) {
    for (std::size_t j = 0; j < p; ++j) state.theta.flat[j] += lr * g[j];
    return true;
  }
  state.opt_steps += 1;
  double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  double c1 = 1.0 - std::pow(b1, static_cast<double>(state.opt_steps));
  double c2 = 1.0 - std::pow(b2, static_cast<double>(state.opt_steps));
  for (std::size_t j = 0; j < p; ++j) {
    state.m1[j] = b1 * state.m1[j] + (1.0 - b1) * g[j];
    state.m2[j] = b2 * state.m2[j] + (1.0 - b2) * g[j] * g[j];
    double mhat = state.m1[j] / c1;
    double vhat = state.m2[j] / c2;
    state.theta.flat[j] += lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
  }
  return true;
}

TrainState train(const LayerSpec& spec, const TrainConfig& cfg, const Dataset& dataset,
                 const TrainCallbacks& callbacks, const TrainState* resume) {
  cfg.validate();
  spec.validate();
  dataset.validate();
  if (dataset.channels() != spec.image_c || dataset.height() != spec.image_h ||
      dataset.width() != spec.image_w)
    throw ConfigError("dataset dims " + std::to_string(dataset.channels()) + "x" +
                      std::to_string(dataset.height()) + "x" + std::to_string(dataset.width()) +
                      " do not match the model spec");
  Generator gen(spec);
  TrainState state = resume ? *resume : init_train_state(spec, cfg);
  if (resume && !(state.spec == spec)) throw ConfigError("resume state spec mismatch");

  const bool writes = !cfg.out_dir.empty();
  std::ostringstream metrics;
  if (writes) {
    std::filesystem::create_directories(cfg.out_dir);
    metrics << metrics_header() << '\n';
  }

  // Fixed tuning batch for every tuning event of the run.
  std::vector<Tensor> tune_batch;
  if (cfg.tune.method != TuneMethod::Off) {
    CounterRng pick(cfg.seed, RngStream::TuneOuter, 0);
    int nb = std::min(cfg.tune.batch, dataset.count());
    for (int i = 0; i < nb; ++i)
      tune_batch.push_back(dataset.example(static_cast<int>(pick.below(static_cast<std::uint64_t>(dataset.count()))))
                               .reshaped({spec.data_dim()}));
  }

  int nan_streak = 0;
  const int S = cfg.posterior_samples;
  for (std::int64_t t = state.iter; t < cfg.iterations; ++t) {
    double t0 = now_ms();
    double sigma_now = anneal_sigma(t, cfg);
    double lr_now = cfg.lr.at(t);
    ObsModel obs{sigma_now};

    if (cfg.tune.method != TuneMethod::Off && t > 0 && t % cfg.tune.interval == 0) {
      ShortRunConfig sc{cfg.steps, state.s};
      TuneOptions topt;
      topt.samples = cfg.tune.samples;
      topt.entropy.inner_samples = cfg.tune.inner_samples;
      topt.lr = cfg.tune.lr;
      topt.iterations = cfg.tune.iterations;
      std::uint64_t tune_seed = cfg.seed ^ (0x9e3779b9ull + static_cast<std::uint64_t>(t));
      try {
        TuneReport rep = cfg.tune.method == TuneMethod::Grid
                             ? grid_search(gen, state.theta, tune_batch, sc, cfg.tune.grid,
                                           tune_seed, obs, topt)
                             : gradient_descent_s(gen, state.theta, tune_batch, sc, tune_seed, obs,
                                                  topt);
        state.s = rep.chosen;
        if (callbacks.on_tune) callbacks.on_tune(t, rep);
      } catch (const Error&) {
        // keep the current step size when every candidate failed
      }
    }

    // Draw the batch and run fresh, noise-initialized inference per example.
    CounterRng draw(cfg.seed, RngStream::BatchDraw, static_cast<std::uint64_t>(t));
    std::vector<Tensor> xs;
    for (int b = 0; b < cfg.batch; ++b)
      xs.push_back(dataset.example(static_cast<int>(draw.below(static_cast<std::uint64_t>(dataset.count())))));

    ShortRunConfig sc{cfg.steps, state.s};
    std::vector<Tensor> grad_xs;
    std::vector<LatentStack> grad_zs;
    grad_xs.resize(static_cast<std::size_t>(cfg.batch) * S);
    grad_zs.resize(static_cast<std::size_t>(cfg.batch) * S);
    std::vector<double> recs(static_cast<std::size_t>(cfg.batch) * S, 0.0);
    parallel_for(cfg.batch * S, [&](int idx) {
      int b = idx / S;
      int s_idx = idx % S;
      const Tensor& x = xs[static_cast<std::size_t>(b)];
      NoiseTrace trace = make_noise_trace(spec, cfg.steps, cfg.seed, static_cast<std::uint64_t>(t),
                                          static_cast<std::uint64_t>(b) * static_cast<std::uint64_t>(S) + static_cast<std::uint64_t>(s_idx));
      InferenceResult res = infer(gen, state.theta, x, sc, trace, obs);
      Tensor xhat = gen.generate(state.theta, res.zK);
      recs[static_cast<std::size_t>(idx)] = mean_sq_err(x, xhat);
      grad_xs[static_cast<std::size_t>(idx)] = x;
      grad_zs[static_cast<std::size_t>(idx)] = std::move(res.zK);
    });
    double recon = 0;
    for (double v : recs) recon += v;
    recon /= static_cast<double>(recs.size());
    state.ema_recon = t == 0 ? recon : 0.99 * state.ema_recon + 0.01 * recon;

    double grad_norm = 0;
    bool applied = update_theta(state, cfg, gen, grad_xs, grad_zs, lr_now, sigma_now, &grad_norm);
    if (!applied) {
      if (++nan_streak > 100)
        throw Error("training aborted: " + std::to_string(nan_streak) +
                    " consecutive non-finite gradient batches");
    } else {
      nan_streak = 0;
    }

    if (cfg.monitor_interval > 0 && t % cfg.monitor_interval == 0) {
      NoiseTrace trace = make_noise_trace(spec, cfg.steps, cfg.seed ^ 0x5eedull,
                                          static_cast<std::uint64_t>(t), 0);
      ad::Tape tp;
      ChainGraph cgr = build_chain_graph(tp, gen, state.theta, xs[0], sc, trace, obs);
      Tensor jac = jacobian_values(tp, cgr.zK, cgr.z0);
      state.last_min_eig = ad::min_abs_eigenvalue(jac);
      double ld = ad::log_abs_det_value(jac);
      double lq = std_normal_log_density(trace.z0.flat()) - ld;
      double lj = gen.log_joint_value(state.theta, xs[0],
                                      LatentStack::from_flat(cgr.zK.value(), spec), obs);
      state.last_surrogate = lq - lj;
    }

    MetricsRow row;
    row.iteration = t;
    row.wall_ms = cfg.timing ? now_ms() - t0 : 0.0;
    row.sigma = sigma_now;
    row.s = state.s;
    row.recon_mse = recon;
    row.surrogate_kl = state.last_surrogate;
    row.grad_norm = grad_norm;
    row.min_abs_eigenvalue = state.last_min_eig;
    state.iter = t + 1;
    if (writes) metrics << metrics_csv_row(row) << '\n';
    if (callbacks.on_iteration) callbacks.on_iteration(state, row);

    if (writes && cfg.checkpoint_interval > 0 && (t + 1) % cfg.checkpoint_interval == 0)
      checkpoint_save(cfg.out_dir + "/ckpt_" + std::to_string(t + 1) + ".ckpt", state);
  }

  if (writes) {
    write_file_atomic(cfg.out_dir + "/metrics.csv", metrics.str());
    checkpoint_save(cfg.out_dir + "/final.ckpt", state);
  }
  return state;
}

}  // namespace sri
