#include "sri/rng.hpp"

#include <cmath>
#include <numbers>

namespace sri {

namespace {

inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

CounterRng::CounterRng(std::uint64_t seed, RngStream stream, std::uint64_t a, std::uint64_t b) {
  std::uint64_t k = mix64(seed);
  k = mix64(k ^ static_cast<std::uint64_t>(stream));
  k = mix64(k ^ a);
  k = mix64(k ^ b);
  key_ = k;
}

std::uint64_t CounterRng::next_u64() { return mix64(key_ ^ mix64(++ctr_)); }

double CounterRng::uniform() {
  // 53-bit mantissa, offset by half an ulp so the result is never exactly 0.
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double CounterRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double t = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(t);
  has_spare_ = true;
  return r * std::cos(t);
}

std::uint64_t CounterRng::below(std::uint64_t n) {
  // Modulo bias is negligible for the desk-scale ranges used here.
  return n ? next_u64() % n : 0;
}

Tensor CounterRng::normal_tensor(Shape s) {
  Tensor t(std::move(s));
  fill_normal(t);
  return t;
}

void CounterRng::fill_normal(Tensor& t) {
  for (auto& v : t.data) v = normal();
}

}  // namespace sri
