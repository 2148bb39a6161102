#include "sri/stepsize.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "sri/error.hpp"

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

}  // namespace

StepGrid StepGrid::range(double lo, double hi, double step) {
  if (step <= 0) throw ConfigError("step grid: step must be positive");
  StepGrid g;
  // integer stepping avoids accumulation drift across the grid
  long n = std::lround((hi - lo) / step);
  for (long i = 0; i <= n; ++i) {
    double v = lo + static_cast<double>(i) * step;
    if (v > hi + 1e-12) break;
    g.values.push_back(v);
  }
  g.validate();
  return g;
}

void StepGrid::validate() const {
  if (values.empty()) throw ConfigError("step grid is empty");
  double prev = 0;
  for (double v : values) {
    if (v <= 0) throw ConfigError("step grid values must be positive");
    if (v <= prev) throw ConfigError("step grid values must be strictly increasing");
    prev = v;
  }
}

TuneReport grid_search(const Generator& gen, const ParamSet& theta, std::span<const Tensor> batch,
                       ShortRunConfig cfg, const StepGrid& grid, std::uint64_t seed, ObsModel obs,
                       const TuneOptions& opts) {
  grid.validate();
  if (batch.empty()) throw Error("grid_search: empty batch");
  TuneReport rep;
  rep.method = "grid";
  bool any_ok = false;
  double best = 0, best_val = 0;
  for (double s : grid.values) {
    TuneCandidate cand;
    cand.s = s;
    ShortRunConfig c = cfg;
    c.step_size = s;
    double t0 = now_ms();
    try {
      SurrogateStats st = kl_surrogate(gen, theta, batch, c, opts.samples, seed, obs, opts.entropy);
      cand.surrogate = st.value;
      cand.std_error = st.std_error;
    } catch (const ChainDivergedError&) {
      cand.diverged = true;
    }
    cand.wall_ms = now_ms() - t0;
    if (!cand.diverged && (!any_ok || cand.surrogate < best_val)) {
      any_ok = true;
      best = s;
      best_val = cand.surrogate;
    }
    rep.rows.push_back(cand);
  }
  if (!any_ok) {
    std::ostringstream os;
    os << "grid_search: every candidate diverged:";
    for (const auto& r : rep.rows) os << ' ' << r.s;
    throw Error(os.str());
  }
  rep.chosen = best;
  return rep;
}

TuneReport gradient_descent_s(const Generator& gen, const ParamSet& theta,
                              std::span<const Tensor> batch, ShortRunConfig cfg,
                              std::uint64_t seed, ObsModel obs, const TuneOptions& opts) {
  if (batch.empty()) throw Error("gradient_descent_s: empty batch");
  if (opts.lr <= 0) throw Error("gradient_descent_s: learning rate must be positive");
  TuneReport rep;
  rep.method = "gradient";
  double s = cfg.step_size;
  double last_valid = s;
  for (int it = 0; it < opts.iterations; ++it) {
    ShortRunConfig c = cfg;
    c.step_size = s;
    TuneCandidate cand;
    cand.s = s;
    double t0 = now_ms();
    SurrogateGrad sg;
    try {
      sg = kl_surrogate_with_sgrad(gen, theta, batch, c, opts.samples, seed, obs, opts.entropy);
    } catch (const ChainDivergedError&) {
      cand.diverged = true;
      cand.wall_ms = now_ms() - t0;
      rep.rows.push_back(cand);
      break;
    }
    cand.surrogate = sg.value;
    cand.std_error = sg.std_error;
    cand.wall_ms = now_ms() - t0;
    rep.rows.push_back(cand);
    if (!std::isfinite(sg.grad)) break;  // abort with last valid s
    last_valid = s;
    s = std::max(opts.s_floor, s - opts.lr * sg.grad);
  }
  rep.chosen = std::isfinite(s) && s > 0 ? s : last_valid;
  return rep;
}

std::string tune_report_csv(const TuneReport& report, bool include_timing) {
  std::ostringstream os;
  os << "method,s,surrogate,stderr,wall_ms\n";
  for (const auto& r : report.rows) {
    os << report.method << ',' << fmt(r.s) << ',';
    if (r.diverged)
      os << "diverged,,";
    else
      os << fmt(r.surrogate) << ',' << fmt(r.std_error) << ',';
    os << fmt(include_timing ? r.wall_ms : 0.0) << '\n';
  }
  os << report.method << "_chosen," << fmt(report.chosen) << ",,,\n";
  return os.str();
}

}  // namespace sri
