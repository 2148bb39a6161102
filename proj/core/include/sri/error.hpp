#pragma once

#include <stdexcept>
#include <string>

namespace sri {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// Non-finite value produced by a tape operation; carries the node index.
struct NonFiniteError : Error {
  int node_index;
  NonFiniteError(const std::string& msg, int node) : Error(msg), node_index(node) {}
};

// |eigenvalue| below the invertibility threshold in a log-determinant.
struct SingularMatrixError : Error {
  using Error::Error;
};

// Langevin chain state norm exceeded the stability guard.
struct ChainDivergedError : Error {
  int step;
  ChainDivergedError(const std::string& msg, int step_index) : Error(msg), step(step_index) {}
};

}  // namespace sri
