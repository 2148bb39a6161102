#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sri {

// Dimension list; empty shape is a scalar with one element.
using Shape = std::vector<int>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);
bool shapes_equal(const Shape& a, const Shape& b);

// Dense tensor of 64-bit reals.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s);
  Tensor(Shape s, std::vector<double> d);

  static Tensor scalar(double v);
  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double v);

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  // Value of a one-element tensor; throws ShapeError otherwise.
  double item() const;
  bool finite() const;
  Tensor reshaped(Shape s) const;
};

bool same_shape(const Tensor& a, const Tensor& b);

// In-place y += c * x.
void axpy(double c, const Tensor& x, Tensor& y);
double dot(const Tensor& a, const Tensor& b);
double norm2(const Tensor& a);
double max_abs(const Tensor& a);

}  // namespace sri
