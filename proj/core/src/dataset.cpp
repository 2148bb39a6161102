#include "sri/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "sri/error.hpp"
#include "sri/rng.hpp"

namespace sri {

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

std::uint32_t read_u32_be(const std::string& b, std::size_t off) {
  if (off + 4 > b.size())
    throw IoError("truncated file: needed 4 bytes at offset " + std::to_string(off) + ", have " +
                  std::to_string(b.size()));
  auto u = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])); };
  return (u(off) << 24) | (u(off + 1) << 16) | (u(off + 2) << 8) | u(off + 3);
}

std::uint32_t read_u32_le(const std::string& b, std::size_t off) {
  if (off + 4 > b.size())
    throw IoError("truncated file: needed 4 bytes at offset " + std::to_string(off));
  auto u = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])); };
  return u(off) | (u(off + 1) << 8) | (u(off + 2) << 16) | (u(off + 3) << 24);
}

double clamp_unit(double v) { return std::clamp(v, -1.0, 1.0); }

}  // namespace

Tensor Dataset::example(int i) const {
  if (i < 0 || i >= count()) throw Error("dataset example index out of range");
  int c = channels(), h = height(), w = width();
  std::int64_t sz = static_cast<std::int64_t>(c) * h * w;
  Tensor out({c, h, w});
  std::memcpy(out.data.data(), data.data.data() + static_cast<std::int64_t>(i) * sz,
              sizeof(double) * static_cast<std::size_t>(sz));
  return out;
}

void Dataset::validate() const {
  if (data.shape.size() != 4) throw ConfigError("dataset must be [N,C,H,W]");
  if (count() < 1) throw ConfigError("dataset must contain at least one example");
  for (double v : data.data)
    if (!(v >= -1.0 - 1e-9 && v <= 1.0 + 1e-9))
      throw ConfigError("dataset values must lie in [-1, 1]");
}

Dataset load_idx(const std::string& path) {
  std::string b = read_file(path);
  std::uint32_t magic = read_u32_be(b, 0);
  if (magic != 0x00000803u)
    throw IoError("bad IDX magic 0x" + std::to_string(magic) + " (expected 0x00000803 image file)");
  std::uint32_t n = read_u32_be(b, 4);
  std::uint32_t rows = read_u32_be(b, 8);
  std::uint32_t cols = read_u32_be(b, 12);
  if (n == 0 || rows == 0 || cols == 0) throw IoError("IDX header has zero dimension");
  std::uint64_t need = 16ull + static_cast<std::uint64_t>(n) * rows * cols;
  if (need > (1ull << 33)) throw IoError("IDX dimensions overflow sane limits");
  if (b.size() < need)
    throw IoError("truncated IDX payload: need " + std::to_string(need) + " bytes, have " +
                  std::to_string(b.size()) + " (payload starts at offset 16)");
  Dataset ds;
  ds.provenance = "idx:" + path;
  ds.data = Tensor({static_cast<int>(n), 1, static_cast<int>(rows), static_cast<int>(cols)});
  for (std::uint64_t i = 0; i < static_cast<std::uint64_t>(n) * rows * cols; ++i) {
    unsigned char byte = static_cast<unsigned char>(b[16 + i]);
    ds.data[static_cast<std::int64_t>(i)] = 2.0 * static_cast<double>(byte) / 255.0 - 1.0;
  }
  ds.validate();
  return ds;
}

Dataset load_raw(const std::string& path) {
  std::string b = read_file(path);
  if (b.size() < 4 || std::memcmp(b.data(), "SRIR", 4) != 0)
    throw IoError("bad raw dataset magic (expected SRIR)");
  std::uint32_t version = read_u32_le(b, 4);
  if (version != 1) throw IoError("unsupported raw dataset version " + std::to_string(version));
  std::uint32_t n = read_u32_le(b, 8), c = read_u32_le(b, 12), h = read_u32_le(b, 16),
                w = read_u32_le(b, 20);
  std::uint64_t count = static_cast<std::uint64_t>(n) * c * h * w;
  std::uint64_t need = 24 + count * 8;
  if (b.size() < need) throw IoError("truncated raw dataset: need " + std::to_string(need) + " bytes");
  Dataset ds;
  ds.provenance = "raw:" + path;
  ds.data = Tensor({static_cast<int>(n), static_cast<int>(c), static_cast<int>(h), static_cast<int>(w)});
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t u = 0;
    for (int k = 0; k < 8; ++k)
      u |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[24 + i * 8 + static_cast<std::uint64_t>(k)])) << (8 * k);
    double v;
    std::memcpy(&v, &u, 8);
    ds.data[static_cast<std::int64_t>(i)] = v;
  }
  ds.validate();
  return ds;
}

void save_raw(const std::string& path, const Dataset& ds) {
  ds.validate();
  std::string out;
  out.reserve(24 + static_cast<std::size_t>(ds.data.size()) * 8);
  out.append("SRIR", 4);
  auto put_u32 = [&](std::uint32_t v) {
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
  };
  put_u32(1);
  put_u32(static_cast<std::uint32_t>(ds.count()));
  put_u32(static_cast<std::uint32_t>(ds.channels()));
  put_u32(static_cast<std::uint32_t>(ds.height()));
  put_u32(static_cast<std::uint32_t>(ds.width()));
  for (double v : ds.data.data) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((u >> (8 * k)) & 0xff));
  }
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write '" + tmp + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot rename into '" + path + "'");
}

SynthKind parse_synth_kind(const std::string& name) {
  if (name == "gaussians2d") return SynthKind::Gaussians2d;
  if (name == "bars") return SynthKind::Bars;
  if (name == "teacher") return SynthKind::Teacher;
  throw ConfigError("unknown synthetic dataset kind '" + name +
                    "' (expected gaussians2d, bars or teacher)");
}

Dataset synth_dataset(SynthKind kind, int n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("synthetic dataset size must be >= 1");
  CounterRng rng(seed, RngStream::DataSynth);
  Dataset ds;
  switch (kind) {
    case SynthKind::Gaussians2d: {
      ds.provenance = "synth:gaussians2d";
      ds.data = Tensor({n, 1, 1, 2});
      const double cx[4] = {-0.5, -0.5, 0.5, 0.5};
      const double cy[4] = {-0.5, 0.5, -0.5, 0.5};
      for (int i = 0; i < n; ++i) {
        int comp = static_cast<int>(rng.below(4));
        double x = cx[comp] + 0.15 * rng.normal();
        double y = cy[comp] + 0.15 * rng.normal();
        ds.data[static_cast<std::int64_t>(i) * 2] = clamp_unit(x);
        ds.data[static_cast<std::int64_t>(i) * 2 + 1] = clamp_unit(y);
      }
      break;
    }
    case SynthKind::Bars: {
      ds.provenance = "synth:bars";
      const int hw = 16;
      ds.data = Tensor::full({n, 1, hw, hw}, -1.0);
      for (int i = 0; i < n; ++i) {
        int bars = 1 + static_cast<int>(rng.below(2));
        for (int b = 0; b < bars; ++b) {
          bool horizontal = rng.below(2) == 0;
          int pos = static_cast<int>(rng.below(hw));
          double intensity = 0.2 + 0.8 * rng.uniform();
          for (int k = 0; k < hw; ++k) {
            std::int64_t idx = horizontal
                                   ? (static_cast<std::int64_t>(i) * hw + pos) * hw + k
                                   : (static_cast<std::int64_t>(i) * hw + k) * hw + pos;
            ds.data[idx] = std::max(ds.data[idx], intensity);
          }
        }
      }
      break;
    }
    case SynthKind::Teacher:
      return teacher_dataset(TeacherParams{}, n, seed);
  }
  ds.validate();
  return ds;
}

Dataset teacher_dataset(const TeacherParams& teacher, int n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("synthetic dataset size must be >= 1");
  CounterRng rng(seed, RngStream::DataSynth);
  Dataset ds;
  ds.provenance = "synth:teacher";
  ds.data = Tensor({n, 1, 1, 1});
  for (int i = 0; i < n; ++i) {
    double z = rng.normal();
    double x = teacher.w * z + teacher.bias + teacher.sigma * rng.normal();
    ds.data[i] = clamp_unit(x);
  }
  ds.validate();
  return ds;
}

Dataset load_dataset(const std::string& uri, std::uint64_t seed) {
  auto colon = uri.find(':');
  if (colon == std::string::npos)
    throw ConfigError("dataset must be idx:PATH, raw:PATH or synth:KIND[:N], got '" + uri + "'");
  std::string scheme = uri.substr(0, colon);
  std::string rest = uri.substr(colon + 1);
  if (scheme == "idx") return load_idx(rest);
  if (scheme == "raw") return load_raw(rest);
  if (scheme == "synth") {
    int n = 1024;
    std::string kind = rest;
    if (auto c2 = rest.find(':'); c2 != std::string::npos) {
      kind = rest.substr(0, c2);
      n = std::stoi(rest.substr(c2 + 1));
    }
    return synth_dataset(parse_synth_kind(kind), n, seed);
  }
  throw ConfigError("unknown dataset scheme '" + scheme + "'");
}

}  // namespace sri
