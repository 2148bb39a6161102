#include "sri/tensor.hpp"

#include <cmath>
#include <sstream>

#include "sri/error.hpp"

namespace sri {

std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

bool shapes_equal(const Shape& a, const Shape& b) { return a == b; }

Tensor::Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape)), 0.0) {}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (static_cast<std::int64_t>(data.size()) != numel(shape))
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::zeros(Shape s) { return Tensor(std::move(s)); }

Tensor Tensor::full(Shape s, double v) {
  Tensor t(std::move(s));
  for (auto& x : t.data) x = v;
  return t;
}

double Tensor::item() const {
  if (data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape));
  return data[0];
}

bool Tensor::finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor Tensor::reshaped(Shape s) const {
  if (numel(s) != size())
    throw ShapeError("reshape " + shape_str(shape) + " -> " + shape_str(s));
  return Tensor(std::move(s), data);
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

void axpy(double c, const Tensor& x, Tensor& y) {
  if (!same_shape(x, y)) throw ShapeError("axpy shape mismatch");
  for (std::int64_t i = 0; i < x.size(); ++i) y[i] += c * x[i];
}

double dot(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw ShapeError("dot shape mismatch");
  double s = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

double max_abs(const Tensor& a) {
  double m = 0;
  for (double v : a.data) m = std::max(m, std::fabs(v));
  return m;
}

}  // namespace sri
