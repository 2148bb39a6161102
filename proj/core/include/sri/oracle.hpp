#pragma once

#include <functional>
#include <span>
#include <vector>

namespace sri::oracle {

// Minimal dense matrix used only by the oracle. The oracle keeps its own
// numerics (Cholesky, solves, log-determinants) so that agreement with the
// differentiation core is evidence rather than tautology.
struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}
  double& operator()(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return a[static_cast<std::size_t>(i) * cols + j]; }

  static Mat identity(int n);
  Mat t() const;
};

Mat operator*(const Mat& x, const Mat& y);
Mat operator+(const Mat& x, const Mat& y);
Mat operator-(const Mat& x, const Mat& y);
Mat scaled(const Mat& x, double c);
std::vector<double> matvec(const Mat& m, std::span<const double> v);

// Cholesky factor (lower) of a symmetric positive-definite matrix.
struct Chol {
  int n = 0;
  std::vector<double> l;
  std::vector<double> solve(std::span<const double> b) const;  // A x = b
  Mat solve_mat(const Mat& b) const;
  double log_det() const;  // of the factored matrix
};
Chol cholesky(const Mat& spd);  // throws on non-positive-definite input

struct GaussianDist {
  std::vector<double> mean;
  Mat cov;

  int dim() const { return static_cast<int>(mean.size()); }
  double entropy() const;                               // (1/2) log((2 pi e)^d det cov)
  double log_density(std::span<const double> x) const;  // full normalized log pdf
};

// One affine stochastic step z' = A z + b + B eps with eps ~ N(0, I).
struct AffineMap {
  Mat A;
  std::vector<double> b;
  Mat B;
};

// Posterior of z for x = W z + noise, noise ~ N(0, sigma^2 I), prior N(0, I):
// cov = (I + W^T W / sigma^2)^{-1}, mean = cov W^T x / sigma^2.
GaussianDist linear_posterior(const Mat& w, double sigma, std::span<const double> x);

// Exact image of a Gaussian under a sequence of affine stochastic steps.
GaussianDist affine_pushforward(const GaussianDist& q0, std::span<const AffineMap> steps);

double gaussian_kl(const GaussianDist& p, const GaussianDist& q);

// Central finite differences of a scalar function.
std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> x, double h);

// The single Langevin step on the linear-Gaussian model, as an affine map:
// A = I - s (I + W^T W / sigma^2), b = s W^T x / sigma^2, B = sqrt(2 s) I.
AffineMap langevin_affine_step(const Mat& w, double sigma, std::span<const double> x, double s);

// Marginal log-likelihood log N(x; 0, W W^T + sigma^2 I) of the linear model.
double linear_log_marginal(const Mat& w, double sigma, std::span<const double> x);

}  // namespace sri::oracle
