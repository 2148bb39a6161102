#include "sri/generator.hpp"

#include <cmath>
#include <functional>
#include <numbers>

#include "sri/error.hpp"

namespace sri {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kSigmaFloor = 1e-3;
}  // namespace

int LayerSpec::total_latent_dim() const {
  int d = 0;
  for (int v : latent_dims) d += v;
  return d;
}

void LayerSpec::validate() const {
  if (layers < 1) throw ConfigError("layers must be >= 1");
  if (static_cast<int>(latent_dims.size()) != layers)
    throw ConfigError("latent_dims must list one dimension per layer (top-down)");
  for (int d : latent_dims)
    if (d < 1) throw ConfigError("latent dimensions must be >= 1");
  if (width < 1) throw ConfigError("width must be >= 1");
  if (image_h < 1 || image_w < 1 || image_c < 1) throw ConfigError("image dims must be >= 1");
  if (mode == GenMode::Linear && layers != 1)
    throw ConfigError("linear generator supports a single latent layer");
  if (total_latent_dim() > 128)
    throw ConfigError("total latent dimension " + std::to_string(total_latent_dim()) +
                      " exceeds the 128 cap (dense Jacobians would be impractical)");
}

Tensor LatentStack::flat() const {
  int total = total_dim();
  Tensor out({total});
  std::int64_t off = 0;
  for (const Tensor& b : blocks) {
    for (std::int64_t i = 0; i < b.size(); ++i) out[off + i] = b[i];
    off += b.size();
  }
  return out;
}

LatentStack LatentStack::from_flat(const Tensor& flat, const LayerSpec& spec) {
  if (flat.size() != spec.total_latent_dim())
    throw ShapeError("latent flat size " + std::to_string(flat.size()) + " vs spec total " +
                     std::to_string(spec.total_latent_dim()));
  LatentStack z;
  std::int64_t off = 0;
  for (int d : spec.latent_dims) {
    Tensor b({d});
    for (int i = 0; i < d; ++i) b[i] = flat[off + i];
    off += d;
    z.blocks.push_back(std::move(b));
  }
  return z;
}

LatentStack LatentStack::zeros(const LayerSpec& spec) {
  LatentStack z;
  for (int d : spec.latent_dims) z.blocks.push_back(Tensor({d}));
  return z;
}

int LatentStack::total_dim() const {
  int t = 0;
  for (const Tensor& b : blocks) t += static_cast<int>(b.size());
  return t;
}

const ParamSet::Entry& ParamSet::find(const std::string& name) const {
  for (const Entry& e : entries)
    if (e.name == name) return e;
  throw Error("unknown parameter '" + name + "'");
}

Tensor ParamSet::get(const std::string& name) const {
  const Entry& e = find(name);
  Tensor t(e.shape);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = flat[static_cast<std::size_t>(e.offset + i)];
  return t;
}

void ParamSet::set(const std::string& name, const Tensor& value) {
  const Entry& e = find(name);
  if (!shapes_equal(e.shape, value.shape))
    throw ShapeError("parameter '" + name + "' shape mismatch");
  for (std::int64_t i = 0; i < value.size(); ++i) flat[static_cast<std::size_t>(e.offset + i)] = value[i];
}

Generator::Generator(LayerSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  auto add = [this](const std::string& name, Shape shape, std::int64_t fan_in) {
    ParamSet::Entry e;
    e.name = name;
    e.shape = std::move(shape);
    e.fan_in = fan_in;
    e.offset = layout_.entries.empty()
                   ? 0
                   : layout_.entries.back().offset + numel(layout_.entries.back().shape);
    layout_.entries.push_back(std::move(e));
  };

  const int L = spec_.layers;
  const int D = spec_.data_dim();
  const int hw = spec_.image_h * spec_.image_w;
  const int nf = spec_.width;

  if (spec_.mode == GenMode::Linear) {
    add("out.w", {D, spec_.latent_dims[0]}, spec_.latent_dims[0]);
    add("out.b", {D}, 1);
    return;
  }

  // Stage s consumes z_{s+1} and produces z_s (or x at stage 0).
  for (int s = L - 1; s >= 0; --s) {
    std::string p = "s" + std::to_string(s) + ".";
    int in_dim = spec_.latent_dims[static_cast<std::size_t>(L - s - 1)];
    int out_dim = s >= 1 ? spec_.latent_dims[static_cast<std::size_t>(L - s)] : D;
    if (spec_.mode == GenMode::Mlp) {
      int nh = spec_.width;
      add(p + "p.w", {nh, in_dim}, in_dim);
      add(p + "p.b", {nh}, 1);
      add(p + "d.w1", {nh, nh}, nh);
      add(p + "d.b1", {nh}, 1);
      add(p + "d.w2", {nh, nh}, nh);
      add(p + "d.b2", {nh}, 1);
      if (s >= 1) {
        add(p + "mu.w", {out_dim, nh}, nh);
        add(p + "mu.b", {out_dim}, 1);
        add(p + "sg.w", {out_dim, nh}, nh);
        add(p + "sg.b", {out_dim}, 1);
      } else {
        add(p + "out.w", {D, nh}, nh);
        add(p + "out.b", {D}, 1);
      }
    } else {  // Conv
      add(p + "p.w", {nf * hw, in_dim}, in_dim);
      add(p + "p.b", {nf * hw}, 1);
      add(p + "pt.k", {nf, nf, 3, 3}, static_cast<std::int64_t>(nf) * 9);
      add(p + "pt.b", {nf}, 1);
      add(p + "d.k1", {nf, nf, 3, 3}, static_cast<std::int64_t>(nf) * 9);
      add(p + "d.b1", {nf}, 1);
      add(p + "d.k2", {nf, nf, 3, 3}, static_cast<std::int64_t>(nf) * 9);
      add(p + "d.b2", {nf}, 1);
      if (s >= 1) {
        add(p + "mu.k", {1, nf, 3, 3}, static_cast<std::int64_t>(nf) * 9);
        add(p + "mu.kb", {1}, 1);
        add(p + "mu.w", {out_dim, hw}, hw);
        add(p + "mu.b", {out_dim}, 1);
        add(p + "sg.k", {1, nf, 3, 3}, static_cast<std::int64_t>(nf) * 9);
        add(p + "sg.kb", {1}, 1);
        add(p + "sg.w", {out_dim, hw}, hw);
        add(p + "sg.b", {out_dim}, 1);
      } else {
        add(p + "out.k", {nf, spec_.image_c, 3, 3}, static_cast<std::int64_t>(nf) * 9);
        add(p + "out.b", {spec_.image_c}, 1);
      }
    }
  }
}

ParamSet Generator::init_params(std::uint64_t seed) const {
  ParamSet p = layout_;
  std::int64_t total = 0;
  for (const auto& e : p.entries) total += numel(e.shape);
  p.flat.assign(static_cast<std::size_t>(total), 0.0);
  for (std::size_t k = 0; k < p.entries.size(); ++k) {
    const auto& e = p.entries[k];
    bool is_bias = e.shape.size() == 1 && e.fan_in == 1;
    if (is_bias) continue;  // biases start at zero
    CounterRng rng(seed, RngStream::ParamInit, k);
    double std_dev = 1.0 / std::sqrt(static_cast<double>(e.fan_in));
    for (std::int64_t i = 0; i < numel(e.shape); ++i)
      p.flat[static_cast<std::size_t>(e.offset + i)] = std_dev * rng.normal();
  }
  return p;
}

ParamSet build_params(const LayerSpec& spec, std::uint64_t seed) {
  return Generator(spec).init_params(seed);
}

Generator::ThetaVars Generator::theta_consts(ad::Tape& t, const ParamSet& p) const {
  ThetaVars tv;
  for (const auto& e : layout_.entries) tv.vars.push_back(t.constant(p.get(e.name)));
  return tv;
}

Generator::ThetaVars Generator::theta_leaves(ad::Tape& t, const ParamSet& p) const {
  ThetaVars tv;
  for (const auto& e : layout_.entries) tv.vars.push_back(t.leaf(p.get(e.name)));
  return tv;
}

ad::Var Generator::theta_var(const ThetaVars& theta, const std::string& name) const {
  for (std::size_t i = 0; i < layout_.entries.size(); ++i)
    if (layout_.entries[i].name == name) return theta.vars[i];
  throw Error("unknown parameter '" + name + "'");
}

ad::Var Generator::act(ad::Tape& t, ad::Var v) const {
  return spec_.activation == Activation::Gelu ? t.gelu(v) : t.tanh(v);
}

ad::Var Generator::trunk_stage(ad::Tape& t, const ThetaVars& theta, int stage, ad::Var input,
                               ad::Var prev_trunk) const {
  std::string p = "s" + std::to_string(stage) + ".";
  ad::Var h;
  if (spec_.mode == GenMode::Mlp) {
    h = t.add(t.matvec(theta_var(theta, p + "p.w"), input), theta_var(theta, p + "p.b"));
    ad::Var u = act(t, t.add(t.matvec(theta_var(theta, p + "d.w1"), h), theta_var(theta, p + "d.b1")));
    h = t.add(h, t.add(t.matvec(theta_var(theta, p + "d.w2"), u), theta_var(theta, p + "d.b2")));
  } else {
    ad::Var hf = t.add(t.matvec(theta_var(theta, p + "p.w"), input), theta_var(theta, p + "p.b"));
    h = t.reshape(hf, {spec_.width, spec_.image_h, spec_.image_w});
    h = t.ch_bias(t.conv2d_t(h, theta_var(theta, p + "pt.k")), theta_var(theta, p + "pt.b"));
    ad::Var u = act(t, t.ch_bias(t.conv2d(h, theta_var(theta, p + "d.k1")), theta_var(theta, p + "d.b1")));
    h = t.add(h, t.ch_bias(t.conv2d(u, theta_var(theta, p + "d.k2")), theta_var(theta, p + "d.b2")));
  }
  if (spec_.skip_connections && prev_trunk.valid()) h = t.add(h, prev_trunk);
  return h;
}

ad::Var Generator::output_head(ad::Tape& t, const ThetaVars& theta, ad::Var trunk) const {
  ad::Var o;
  if (spec_.mode == GenMode::Mlp) {
    o = t.add(t.matvec(theta_var(theta, "s0.out.w"), trunk), theta_var(theta, "s0.out.b"));
  } else {
    ad::Var img = t.ch_bias(t.conv2d_t(trunk, theta_var(theta, "s0.out.k")), theta_var(theta, "s0.out.b"));
    o = t.reshape(img, {spec_.data_dim()});
  }
  return spec_.tanh_output ? t.tanh(o) : o;
}

namespace {

// mu / sigma heads for one stage; sigma is strictly positive.
struct HeadVars {
  ad::Var mu, sigma;
};

HeadVars make_heads(ad::Tape& t, const LayerSpec& spec, int stage, ad::Var trunk,
                    const std::function<ad::Var(const std::string&)>& param) {
  std::string p = "s" + std::to_string(stage) + ".";
  ad::Var mu_pre, sg_pre;
  if (spec.mode == GenMode::Mlp) {
    mu_pre = t.add(t.matvec(param(p + "mu.w"), trunk), param(p + "mu.b"));
    sg_pre = t.add(t.matvec(param(p + "sg.w"), trunk), param(p + "sg.b"));
  } else {
    int hw = spec.image_h * spec.image_w;
    ad::Var mu_map = t.reshape(t.ch_bias(t.conv2d(trunk, param(p + "mu.k")), param(p + "mu.kb")), {hw});
    ad::Var sg_map = t.reshape(t.ch_bias(t.conv2d(trunk, param(p + "sg.k")), param(p + "sg.kb")), {hw});
    mu_pre = t.add(t.matvec(param(p + "mu.w"), mu_map), param(p + "mu.b"));
    sg_pre = t.add(t.matvec(param(p + "sg.w"), sg_map), param(p + "sg.b"));
  }
  HeadVars h;
  h.mu = mu_pre;
  h.sigma = t.add(t.softplus(sg_pre), t.constant(Tensor::full(sg_pre.shape(), kSigmaFloor)));
  return h;
}

std::vector<ad::Var> split_blocks(ad::Tape& t, ad::Var z_flat, const LayerSpec& spec) {
  std::vector<ad::Var> zb;
  int off = 0;
  for (int d : spec.latent_dims) {
    zb.push_back(t.slice(z_flat, off, d));
    off += d;
  }
  return zb;
}

ad::Var gaussian_block_term(ad::Tape& t, ad::Var z, ad::Var mu, ad::Var sigma) {
  ad::Var r = t.mul(t.sub(z, mu), t.recip(sigma));
  int d = static_cast<int>(z.value().size());
  ad::Var quad = t.scale(t.sum(t.mul(r, r)), -0.5);
  ad::Var logdet = t.neg(t.sum(t.log(sigma)));
  return t.add(t.add(quad, logdet), t.constant_scalar(-0.5 * d * kLog2Pi));
}

}  // namespace

ad::Var Generator::decode(ad::Tape& t, const ThetaVars& theta, ad::Var z_flat) const {
  if (z_flat.value().size() != spec_.total_latent_dim())
    throw ShapeError("decode: latent dim " + std::to_string(z_flat.value().size()) +
                     " does not match spec total " + std::to_string(spec_.total_latent_dim()));
  if (spec_.mode == GenMode::Linear) {
    ad::Var o = t.add(t.matvec(theta_var(theta, "out.w"), z_flat), theta_var(theta, "out.b"));
    return spec_.tanh_output ? t.tanh(o) : o;
  }
  auto zb = split_blocks(t, z_flat, spec_);
  const int L = spec_.layers;
  ad::Var prev;
  for (int s = L - 1; s >= 1; --s) prev = trunk_stage(t, theta, s, zb[static_cast<std::size_t>(L - s - 1)], prev);
  ad::Var trunk0 = trunk_stage(t, theta, 0, zb[static_cast<std::size_t>(L - 1)], prev);
  return output_head(t, theta, trunk0);
}

std::vector<ad::Var> Generator::log_joint_terms(ad::Tape& t, const ThetaVars& theta, ad::Var x,
                                                ad::Var z_flat, double sigma, ad::Var mask) const {
  if (sigma <= 0) throw Error("log_joint: sigma must be positive");
  const int D = spec_.data_dim();
  if (x.value().size() != D) throw ShapeError("log_joint: x has wrong size");
  if (z_flat.value().size() != spec_.total_latent_dim())
    throw ShapeError("log_joint: latent dim mismatch");
  const int L = spec_.layers;
  std::vector<ad::Var> terms;
  auto param = [&](const std::string& n) { return theta_var(theta, n); };

  auto guarded = [&](int layer, auto&& fn) -> ad::Var {
    try {
      return fn();
    } catch (const NonFiniteError& e) {
      throw Error("log_joint: non-finite value in factor for layer " + std::to_string(layer) +
                  " (" + e.what() + ")");
    }
  };

  std::vector<ad::Var> zb =
      spec_.mode == GenMode::Linear ? std::vector<ad::Var>{z_flat} : split_blocks(t, z_flat, spec_);

  // Top prior z_L ~ N(0, I).
  terms.push_back(guarded(L, [&] {
    ad::Var zl = zb[0];
    int d = static_cast<int>(zl.value().size());
    return t.add(t.scale(t.sum(t.mul(zl, zl)), -0.5), t.constant_scalar(-0.5 * d * kLog2Pi));
  }));

  ad::Var trunk0;
  if (spec_.mode == GenMode::Linear) {
    // no intermediate factors
  } else {
    ad::Var prev;
    for (int s = L - 1; s >= 1; --s) {
      int si = s;
      ad::Var input = zb[static_cast<std::size_t>(L - s - 1)];
      ad::Var z_s = zb[static_cast<std::size_t>(L - s)];
      terms.push_back(guarded(s, [&] {
        ad::Var trunk = trunk_stage(t, theta, si, input, prev);
        HeadVars h = make_heads(t, spec_, si, trunk, param);
        prev = trunk;
        return gaussian_block_term(t, z_s, h.mu, h.sigma);
      }));
    }
    trunk0 = guarded(0, [&] { return trunk_stage(t, theta, 0, zb[static_cast<std::size_t>(L - 1)], prev); });
  }

  terms.push_back(guarded(0, [&] {
    ad::Var xhat = spec_.mode == GenMode::Linear
                       ? decode(t, theta, z_flat)
                       : output_head(t, theta, trunk0);
    ad::Var resid = t.sub(x, xhat);
    ad::Var sq = t.mul(resid, resid);
    double d_obs = static_cast<double>(D);
    if (mask.valid()) {
      sq = t.mul(mask, sq);
      d_obs = 0;
      for (double v : mask.value().data) d_obs += v;
      if (d_obs < 1.0) throw Error("log_joint: mask observes no pixels");
    }
    ad::Var quad = t.scale(t.sum(sq), -0.5 / (sigma * sigma));
    return t.add(quad, t.constant_scalar(-0.5 * d_obs * std::log(2.0 * std::numbers::pi_v<double> * sigma * sigma)));
  }));
  return terms;
}

ad::Var Generator::log_joint(ad::Tape& t, const ThetaVars& theta, ad::Var x, ad::Var z_flat,
                             double sigma, ad::Var mask) const {
  auto terms = log_joint_terms(t, theta, x, z_flat, sigma, mask);
  ad::Var s = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) s = t.add(s, terms[i]);
  return s;
}

Tensor Generator::generate(const ParamSet& p, const LatentStack& z) const {
  ad::Tape t;
  ThetaVars theta = theta_consts(t, p);
  ad::Var zc = t.constant(z.flat());
  Tensor out = decode(t, theta, zc).value();
  return out.reshaped({spec_.image_c, spec_.image_h, spec_.image_w});
}

double Generator::log_joint_value(const ParamSet& p, const Tensor& x, const LatentStack& z,
                                  ObsModel obs) const {
  ad::Tape t;
  ThetaVars theta = theta_consts(t, p);
  ad::Var xc = t.constant(x.reshaped({spec_.data_dim()}));
  ad::Var zc = t.constant(z.flat());
  return log_joint(t, theta, xc, zc, obs.sigma).value().item();
}

LatentStack Generator::grad_z_log_posterior(const ParamSet& p, const Tensor& x,
                                            const LatentStack& z, ObsModel obs) const {
  ad::Tape t;
  ThetaVars theta = theta_consts(t, p);
  ad::Var xc = t.constant(x.reshaped({spec_.data_dim()}));
  ad::Var zl = t.leaf(z.flat());
  ad::Var lj = log_joint(t, theta, xc, zl, obs.sigma);
  auto g = t.backward_values(lj, std::vector<ad::Var>{zl});
  Tensor flat = g.count(zl.id) ? g.at(zl.id) : Tensor::zeros(zl.shape());
  return LatentStack::from_flat(flat, spec_);
}

std::vector<double> Generator::grad_theta_log_joint(const ParamSet& p, const Tensor& x,
                                                    const LatentStack& z, ObsModel obs) const {
  ad::Tape t;
  ThetaVars theta = theta_leaves(t, p);
  ad::Var xc = t.constant(x.reshaped({spec_.data_dim()}));
  ad::Var zc = t.constant(z.flat());
  ad::Var lj = log_joint(t, theta, xc, zc, obs.sigma);
  auto g = t.backward_values(lj, theta.vars);
  std::vector<double> out(static_cast<std::size_t>(p.size()), 0.0);
  for (std::size_t k = 0; k < layout_.entries.size(); ++k) {
    auto it = g.find(theta.vars[k].id);
    if (it == g.end()) continue;
    const auto& e = layout_.entries[k];
    for (std::int64_t i = 0; i < it->second.size(); ++i)
      out[static_cast<std::size_t>(e.offset + i)] = it->second[i];
  }
  return out;
}

std::pair<LatentStack, Tensor> Generator::sample_prior(const ParamSet& p, CounterRng& rng,
                                                       bool zero_layer_noise) const {
  const int L = spec_.layers;
  LatentStack z;
  z.blocks.resize(static_cast<std::size_t>(L));
  z.blocks[0] = rng.normal_tensor({spec_.latent_dims[0]});

  ad::Tape t;
  ThetaVars theta = theta_consts(t, p);
  auto param = [&](const std::string& n) { return theta_var(theta, n); };

  if (spec_.mode != GenMode::Linear) {
    ad::Var prev;
    for (int s = L - 1; s >= 1; --s) {
      ad::Var input = t.constant(z.blocks[static_cast<std::size_t>(L - s - 1)]);
      ad::Var trunk = trunk_stage(t, theta, s, input, prev);
      HeadVars h = make_heads(t, spec_, s, trunk, param);
      prev = trunk;
      Tensor mu = h.mu.value();
      Tensor sg = h.sigma.value();
      Tensor zs = mu;
      if (!zero_layer_noise) {
        for (std::int64_t i = 0; i < zs.size(); ++i) zs[i] += sg[i] * rng.normal();
      }
      z.blocks[static_cast<std::size_t>(L - s)] = std::move(zs);
    }
  }
  Tensor x = generate(p, z);
  return {std::move(z), std::move(x)};
}

}  // namespace sri
