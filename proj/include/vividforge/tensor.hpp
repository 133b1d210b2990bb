#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vividforge {

// Dense row-major tensor of doubles. Small and boring on purpose: all the
// interesting behaviour lives in the ops that consume it.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }
  int ndim() const { return int(shape.size()); }
  int64_t dim(int i) const { return shape[size_t(i)]; }

  double& operator[](int64_t i) { return data[size_t(i)]; }
  double operator[](int64_t i) const { return data[size_t(i)]; }

  double& at2(int64_t r, int64_t c) { return data[size_t(r * shape[1] + c)]; }
  double at2(int64_t r, int64_t c) const {
    return data[size_t(r * shape[1] + c)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  std::string shape_str() const;

  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, double v);
  static Tensor scalar(double v);
  static Tensor from(std::vector<int64_t> shape, std::vector<double> values);
};

}  // namespace vividforge
