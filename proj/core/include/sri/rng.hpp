#pragma once

#include <cstdint>

#include "sri/tensor.hpp"

namespace sri {

// Independent random streams. Every consumer of randomness names its stream,
// so parallel evaluation order can never change the numbers drawn.
enum class RngStream : std::uint64_t {
  ParamInit = 1,
  BatchDraw = 2,
  ChainInit = 3,
  ChainNoise = 4,
  TuneOuter = 5,
  TuneInner = 6,
  DataSynth = 7,
  Task = 8,
  PriorSample = 9,
  Test = 10,
};

// Counter-based generator: the key is a hash of (seed, stream, a, b) and each
// draw hashes (key, counter). Stateless across uses with the same key.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, RngStream stream, std::uint64_t a = 0, std::uint64_t b = 0);

  std::uint64_t next_u64();
  double uniform();  // (0, 1)
  double normal();   // standard normal, Box-Muller
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  Tensor normal_tensor(Shape s);
  void fill_normal(Tensor& t);

 private:
  std::uint64_t key_;
  std::uint64_t ctr_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace sri
