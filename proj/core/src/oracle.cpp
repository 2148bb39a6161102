#include "sri/oracle.hpp"

#include <cmath>
#include <numbers>

#include "sri/error.hpp"

namespace sri::oracle {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

Mat Mat::identity(int n) {
  Mat m(n, n);
  for (int i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Mat Mat::t() const {
  Mat out(cols, rows);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out(j, i) = (*this)(i, j);
  return out;
}

Mat operator*(const Mat& x, const Mat& y) {
  if (x.cols != y.rows) throw ShapeError("oracle Mat multiply dims");
  Mat out(x.rows, y.cols);
  for (int i = 0; i < x.rows; ++i)
    for (int k = 0; k < x.cols; ++k) {
      double v = x(i, k);
      if (v == 0.0) continue;
      for (int j = 0; j < y.cols; ++j) out(i, j) += v * y(k, j);
    }
  return out;
}

Mat operator+(const Mat& x, const Mat& y) {
  if (x.rows != y.rows || x.cols != y.cols) throw ShapeError("oracle Mat add dims");
  Mat out = x;
  for (std::size_t i = 0; i < out.a.size(); ++i) out.a[i] += y.a[i];
  return out;
}

Mat operator-(const Mat& x, const Mat& y) {
  if (x.rows != y.rows || x.cols != y.cols) throw ShapeError("oracle Mat sub dims");
  Mat out = x;
  for (std::size_t i = 0; i < out.a.size(); ++i) out.a[i] -= y.a[i];
  return out;
}

Mat scaled(const Mat& x, double c) {
  Mat out = x;
  for (auto& v : out.a) v *= c;
  return out;
}

std::vector<double> matvec(const Mat& m, std::span<const double> v) {
  if (m.cols != static_cast<int>(v.size())) throw ShapeError("oracle matvec dims");
  std::vector<double> out(static_cast<std::size_t>(m.rows), 0.0);
  for (int i = 0; i < m.rows; ++i) {
    double s = 0;
    for (int j = 0; j < m.cols; ++j) s += m(i, j) * v[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = s;
  }
  return out;
}

Chol cholesky(const Mat& spd) {
  if (spd.rows != spd.cols) throw ShapeError("cholesky: not square");
  int n = spd.rows;
  Chol c;
  c.n = n;
  c.l.assign(static_cast<std::size_t>(n) * n, 0.0);
  auto l = [&](int i, int j) -> double& { return c.l[static_cast<std::size_t>(i) * n + j]; };
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = spd(i, j);
      for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      if (i == j) {
        if (s <= 0.0) throw SingularMatrixError("cholesky: matrix not positive definite");
        l(i, i) = std::sqrt(s);
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }
  return c;
}

std::vector<double> Chol::solve(std::span<const double> b) const {
  std::vector<double> y(b.begin(), b.end());
  auto lv = [&](int i, int j) { return l[static_cast<std::size_t>(i) * n + j]; };
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < i; ++k) y[static_cast<std::size_t>(i)] -= lv(i, k) * y[static_cast<std::size_t>(k)];
    y[static_cast<std::size_t>(i)] /= lv(i, i);
  }
  for (int i = n - 1; i >= 0; --i) {
    for (int k = i + 1; k < n; ++k) y[static_cast<std::size_t>(i)] -= lv(k, i) * y[static_cast<std::size_t>(k)];
    y[static_cast<std::size_t>(i)] /= lv(i, i);
  }
  return y;
}

Mat Chol::solve_mat(const Mat& b) const {
  Mat out(b.rows, b.cols);
  std::vector<double> col(static_cast<std::size_t>(b.rows));
  for (int j = 0; j < b.cols; ++j) {
    for (int i = 0; i < b.rows; ++i) col[static_cast<std::size_t>(i)] = b(i, j);
    auto sol = solve(col);
    for (int i = 0; i < b.rows; ++i) out(i, j) = sol[static_cast<std::size_t>(i)];
  }
  return out;
}

double Chol::log_det() const {
  double s = 0;
  for (int i = 0; i < n; ++i) s += std::log(l[static_cast<std::size_t>(i) * n + i]);
  return 2.0 * s;
}

double GaussianDist::entropy() const {
  Chol c = cholesky(cov);
  return 0.5 * (dim() * (kLog2Pi + 1.0) + c.log_det());
}

double GaussianDist::log_density(std::span<const double> x) const {
  if (static_cast<int>(x.size()) != dim()) throw ShapeError("log_density dims");
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) r[i] = x[i] - mean[i];
  Chol c = cholesky(cov);
  auto sol = c.solve(r);
  double quad = 0;
  for (std::size_t i = 0; i < r.size(); ++i) quad += r[i] * sol[i];
  return -0.5 * (dim() * kLog2Pi + c.log_det() + quad);
}

GaussianDist linear_posterior(const Mat& w, double sigma, std::span<const double> x) {
  if (sigma <= 0) throw Error("linear_posterior: sigma must be positive");
  if (w.rows != static_cast<int>(x.size())) throw ShapeError("linear_posterior dims");
  int d = w.cols;
  Mat prec = Mat::identity(d) + scaled(w.t() * w, 1.0 / (sigma * sigma));
  Chol c = cholesky(prec);
  GaussianDist out;
  out.cov = c.solve_mat(Mat::identity(d));
  auto wtx = matvec(w.t(), x);
  for (auto& v : wtx) v /= sigma * sigma;
  out.mean = c.solve(wtx);
  return out;
}

GaussianDist affine_pushforward(const GaussianDist& q0, std::span<const AffineMap> steps) {
  GaussianDist q = q0;
  for (const AffineMap& st : steps) {
    if (st.A.cols != q.dim()) throw ShapeError("affine_pushforward dims");
    std::vector<double> mean = matvec(st.A, q.mean);
    if (!st.b.empty()) {
      if (st.b.size() != mean.size()) throw ShapeError("affine_pushforward offset dims");
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += st.b[i];
    }
    Mat cov = st.A * q.cov * st.A.t();
    if (st.B.rows > 0) cov = cov + st.B * st.B.t();
    q.mean = std::move(mean);
    q.cov = std::move(cov);
  }
  return q;
}

double gaussian_kl(const GaussianDist& p, const GaussianDist& q) {
  if (p.dim() != q.dim()) throw ShapeError("gaussian_kl dims");
  int d = p.dim();
  Chol cq = cholesky(q.cov);
  Chol cp = cholesky(p.cov);
  Mat ratio = cq.solve_mat(p.cov);
  double trace = 0;
  for (int i = 0; i < d; ++i) trace += ratio(i, i);
  std::vector<double> dm(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) dm[static_cast<std::size_t>(i)] = q.mean[static_cast<std::size_t>(i)] - p.mean[static_cast<std::size_t>(i)];
  auto sol = cq.solve(dm);
  double quad = 0;
  for (int i = 0; i < d; ++i) quad += dm[static_cast<std::size_t>(i)] * sol[static_cast<std::size_t>(i)];
  return 0.5 * (trace + quad - d + cq.log_det() - cp.log_det());
}

std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> x, double h) {
  if (h <= 0) throw Error("fd_gradient: h must be positive");
  std::vector<double> g(x.size());
  std::vector<double> p(x.begin(), x.end());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double orig = p[i];
    p[i] = orig + h;
    double fp = f(p);
    p[i] = orig - h;
    double fm = f(p);
    p[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

AffineMap langevin_affine_step(const Mat& w, double sigma, std::span<const double> x, double s) {
  int d = w.cols;
  AffineMap m;
  Mat prec = Mat::identity(d) + scaled(w.t() * w, 1.0 / (sigma * sigma));
  m.A = Mat::identity(d) - scaled(prec, s);
  m.b = matvec(w.t(), x);
  for (auto& v : m.b) v *= s / (sigma * sigma);
  m.B = scaled(Mat::identity(d), std::sqrt(2.0 * s));
  return m;
}

double linear_log_marginal(const Mat& w, double sigma, std::span<const double> x) {
  int dd = w.rows;
  Mat cov = w * w.t() + scaled(Mat::identity(dd), sigma * sigma);
  GaussianDist marg;
  marg.mean.assign(static_cast<std::size_t>(dd), 0.0);
  marg.cov = std::move(cov);
  return marg.log_density(x);
}

}  // namespace sri::oracle
