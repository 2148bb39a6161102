#pragma once

#include <complex>
#include <vector>

#include "sri/tensor.hpp"

// Dense helpers for the differentiation core. The oracle module deliberately
// does not use anything in this header.
namespace sri::detail {

// Row-major LU factorization with partial pivoting.
struct Lu {
  int n = 0;
  std::vector<double> lu;   // combined L\U factors
  std::vector<int> piv;     // row permutation
  int sign = 1;
  double min_pivot = 0.0;   // smallest |pivot| encountered

  // Solve A x = b in place.
  void solve(std::vector<double>& b) const;
  // Solve A^T x = b in place.
  void solve_transposed(std::vector<double>& b) const;
  double log_abs_det() const;
};

Lu lu_factor(const Tensor& square);  // throws SingularMatrixError on zero pivot

Tensor inverse_transpose(const Tensor& square);

// Eigenvalues of a general real square matrix via the real Schur form.
std::vector<std::complex<double>> eigenvalues(const Tensor& square);

}  // namespace sri::detail
