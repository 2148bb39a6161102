#include "linalg.hpp"

#include <cmath>

#include "sri/error.hpp"

namespace sri::detail {

namespace {

int square_dim(const Tensor& m) {
  if (m.shape.size() != 2 || m.shape[0] != m.shape[1])
    throw ShapeError("expected square matrix, got " + shape_str(m.shape));
  return m.shape[0];
}

}  // namespace

Lu lu_factor(const Tensor& m) {
  int n = square_dim(m);
  Lu f;
  f.n = n;
  f.lu = m.data;
  f.piv.resize(static_cast<std::size_t>(n));
  f.min_pivot = std::numeric_limits<double>::infinity();
  auto at = [&](int i, int j) -> double& { return f.lu[static_cast<std::size_t>(i) * n + j]; };
  for (int k = 0; k < n; ++k) {
    int p = k;
    double best = std::fabs(at(k, k));
    for (int i = k + 1; i < n; ++i) {
      double v = std::fabs(at(i, k));
      if (v > best) {
        best = v;
        p = i;
      }
    }
    f.piv[static_cast<std::size_t>(k)] = p;
    if (p != k) {
      for (int j = 0; j < n; ++j) std::swap(at(k, j), at(p, j));
      f.sign = -f.sign;
    }
    double pivot = at(k, k);
    if (pivot == 0.0) throw SingularMatrixError("singular matrix in LU factorization");
    f.min_pivot = std::min(f.min_pivot, std::fabs(pivot));
    for (int i = k + 1; i < n; ++i) {
      at(i, k) /= pivot;
      double lik = at(i, k);
      if (lik != 0.0)
        for (int j = k + 1; j < n; ++j) at(i, j) -= lik * at(k, j);
    }
  }
  return f;
}

void Lu::solve(std::vector<double>& b) const {
  auto at = [&](int i, int j) { return lu[static_cast<std::size_t>(i) * n + j]; };
  for (int k = 0; k < n; ++k) {
    int p = piv[static_cast<std::size_t>(k)];
    if (p != k) std::swap(b[static_cast<std::size_t>(k)], b[static_cast<std::size_t>(p)]);
    for (int i = k + 1; i < n; ++i) b[static_cast<std::size_t>(i)] -= at(i, k) * b[static_cast<std::size_t>(k)];
  }
  for (int i = n - 1; i >= 0; --i) {
    for (int j = i + 1; j < n; ++j) b[static_cast<std::size_t>(i)] -= at(i, j) * b[static_cast<std::size_t>(j)];
    b[static_cast<std::size_t>(i)] /= at(i, i);
  }
}

void Lu::solve_transposed(std::vector<double>& b) const {
  auto at = [&](int i, int j) { return lu[static_cast<std::size_t>(i) * n + j]; };
  // A^T = (P^T L U)^T = U^T L^T P, so solve U^T y = b, L^T z = y, then unpermute.
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < i; ++j) b[static_cast<std::size_t>(i)] -= at(j, i) * b[static_cast<std::size_t>(j)];
    b[static_cast<std::size_t>(i)] /= at(i, i);
  }
  for (int i = n - 1; i >= 0; --i)
    for (int j = i + 1; j < n; ++j) b[static_cast<std::size_t>(i)] -= at(j, i) * b[static_cast<std::size_t>(j)];
  for (int k = n - 1; k >= 0; --k) {
    int p = piv[static_cast<std::size_t>(k)];
    if (p != k) std::swap(b[static_cast<std::size_t>(k)], b[static_cast<std::size_t>(p)]);
  }
}

double Lu::log_abs_det() const {
  double s = 0;
  for (int i = 0; i < n; ++i) s += std::log(std::fabs(lu[static_cast<std::size_t>(i) * n + i]));
  return s;
}

Tensor inverse_transpose(const Tensor& m) {
  int n = square_dim(m);
  Lu f = lu_factor(m);
  Tensor out({n, n});
  std::vector<double> col(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    std::fill(col.begin(), col.end(), 0.0);
    col[static_cast<std::size_t>(j)] = 1.0;
    f.solve(col);
    // column j of A^{-1} is row j of A^{-T}
    for (int i = 0; i < n; ++i) out[static_cast<std::int64_t>(j) * n + i] = col[static_cast<std::size_t>(i)];
  }
  return out;
}

}  // namespace sri::detail
