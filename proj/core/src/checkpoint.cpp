#include "sri/checkpoint.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "sri/error.hpp"

namespace sri {

namespace {

constexpr std::uint32_t kVersion = 1;

std::array<std::uint32_t, 256> make_crc_table() {
  std::array<std::uint32_t, 256> t{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
    t[i] = c;
  }
  return t;
}

std::uint32_t crc32(const std::string& bytes) {
  static const auto table = make_crc_table();
  std::uint32_t c = 0xffffffffu;
  for (char ch : bytes) c = table[(c ^ static_cast<unsigned char>(ch)) & 0xffu] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

struct Writer {
  std::string out;
  void u8(std::uint8_t v) { out.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    u64(u);
  }
};

struct Reader {
  const std::string& b;
  std::size_t off = 0;
  void need(std::size_t n) const {
    if (off + n > b.size())
      throw IoError("corrupt checkpoint: truncated at offset " + std::to_string(off));
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(b[off++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + static_cast<std::size_t>(k)])) << (8 * k);
    off += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[off + static_cast<std::size_t>(k)])) << (8 * k);
    off += 8;
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() {
    std::uint64_t u = u64();
    double v;
    std::memcpy(&v, &u, 8);
    return v;
  }
};

void write_spec(Writer& w, const LayerSpec& spec) {
  w.u32(static_cast<std::uint32_t>(spec.layers));
  for (int d : spec.latent_dims) w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(spec.width));
  w.u32(static_cast<std::uint32_t>(spec.image_h));
  w.u32(static_cast<std::uint32_t>(spec.image_w));
  w.u32(static_cast<std::uint32_t>(spec.image_c));
  w.u8(static_cast<std::uint8_t>(spec.mode));
  w.u8(static_cast<std::uint8_t>(spec.activation));
  w.u8(spec.skip_connections ? 1 : 0);
  w.u8(spec.tanh_output ? 1 : 0);
}

LayerSpec read_spec(Reader& r) {
  LayerSpec spec;
  spec.layers = static_cast<int>(r.u32());
  if (spec.layers < 1 || spec.layers > 64) throw IoError("corrupt checkpoint: bad layer count");
  spec.latent_dims.clear();
  for (int i = 0; i < spec.layers; ++i) spec.latent_dims.push_back(static_cast<int>(r.u32()));
  spec.width = static_cast<int>(r.u32());
  spec.image_h = static_cast<int>(r.u32());
  spec.image_w = static_cast<int>(r.u32());
  spec.image_c = static_cast<int>(r.u32());
  spec.mode = static_cast<GenMode>(r.u8());
  spec.activation = static_cast<Activation>(r.u8());
  spec.skip_connections = r.u8() != 0;
  spec.tanh_output = r.u8() != 0;
  spec.validate();
  return spec;
}

}  // namespace

void write_file_atomic(const std::string& path, const std::string& bytes) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write '" + tmp + "'");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("cannot rename '" + tmp + "' into place");
}

void checkpoint_save(const std::string& path, const TrainState& state, bool include_trainer) {
  Writer w;
  w.out.append("SRIG", 4);
  w.u32(kVersion);
  w.u8(include_trainer ? 1 : 0);
  write_spec(w, state.spec);
  w.u64(static_cast<std::uint64_t>(state.theta.flat.size()));
  for (double v : state.theta.flat) w.f64(v);
  if (include_trainer) {
    w.u64(state.seed);
    w.i64(state.iter);
    w.f64(state.s);
    w.i64(state.opt_steps);
    w.f64(state.ema_recon);
    w.f64(state.last_surrogate);
    w.f64(state.last_min_eig);
    w.u64(static_cast<std::uint64_t>(state.m1.size()));
    for (double v : state.m1) w.f64(v);
    for (double v : state.m2) w.f64(v);
  }
  w.u32(crc32(w.out));
  write_file_atomic(path, w.out);
}

void checkpoint_save_params(const std::string& path, const LayerSpec& spec, const ParamSet& params) {
  TrainState st;
  st.spec = spec;
  st.theta = params;
  checkpoint_save(path, st, /*include_trainer_section=*/false);
}

TrainState checkpoint_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw IoError("corrupt checkpoint: too short");
  std::string payload = bytes.substr(0, bytes.size() - 4);
  Reader tail{bytes, bytes.size() - 4};
  std::uint32_t stored = tail.u32();
  if (crc32(payload) != stored)
    throw IoError("corrupt checkpoint '" + path + "': checksum mismatch");

  Reader r{payload, 0};
  r.need(4);
  if (std::memcmp(payload.data(), "SRIG", 4) != 0)
    throw IoError("bad checkpoint magic (expected SRIG)");
  r.off = 4;
  std::uint32_t version = r.u32();
  if (version != kVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  bool has_trainer = r.u8() != 0;

  TrainState st;
  st.spec = read_spec(r);
  std::uint64_t n = r.u64();
  Generator gen(st.spec);
  st.theta = gen.init_params(0);
  if (n != st.theta.flat.size())
    throw IoError("checkpoint parameter count " + std::to_string(n) +
                  " does not match the architecture (" + std::to_string(st.theta.flat.size()) + ")");
  for (auto& v : st.theta.flat) v = r.f64();
  if (has_trainer) {
    st.seed = r.u64();
    st.iter = r.i64();
    st.s = r.f64();
    st.opt_steps = r.i64();
    st.ema_recon = r.f64();
    st.last_surrogate = r.f64();
    st.last_min_eig = r.f64();
    std::uint64_t mn = r.u64();
    if (mn != n) throw IoError("checkpoint moment count mismatch");
    st.m1.resize(mn);
    st.m2.resize(mn);
    for (auto& v : st.m1) v = r.f64();
    for (auto& v : st.m2) v = r.f64();
  } else {
    st.m1.assign(st.theta.flat.size(), 0.0);
    st.m2.assign(st.theta.flat.size(), 0.0);
  }
  return st;
}

}  // namespace sri
