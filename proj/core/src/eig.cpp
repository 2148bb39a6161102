#include <Eigen/Eigenvalues>

#include "linalg.hpp"
#include "sri/error.hpp"

namespace sri::detail {

std::vector<std::complex<double>> eigenvalues(const Tensor& m) {
  if (m.shape.size() != 2 || m.shape[0] != m.shape[1])
    throw ShapeError("eigenvalues: expected square matrix, got " + shape_str(m.shape));
  const int n = m.shape[0];
  Eigen::MatrixXd a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = m[static_cast<std::int64_t>(i) * n + j];
  Eigen::EigenSolver<Eigen::MatrixXd> solver(a, /*computeEigenvectors=*/false);
  if (solver.info() != Eigen::Success)
    throw Error("eigenvalue iteration failed to converge");
  std::vector<std::complex<double>> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = solver.eigenvalues()(i);
  return out;
}

}  // namespace sri::detail
