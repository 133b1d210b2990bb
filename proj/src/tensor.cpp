#include "vividforge/tensor.hpp"

#include <cmath>
#include <stdexcept>

#include "vividforge/error.hpp"

namespace vividforge {

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  s += "]";
  return s;
}

Tensor Tensor::zeros(std::vector<int64_t> shape) {
  Tensor t;
  t.shape = std::move(shape);
  for (int64_t d : t.shape) {
    if (d <= 0) throw DataError("tensor dims must be positive, got " + t.shape_str());
  }
  t.data.assign(size_t(t.numel()), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
  Tensor t = zeros(std::move(shape));
  for (double& x : t.data) x = v;
  return t;
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.shape = {1};
  t.data = {v};
  return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<double> values) {
  Tensor t;
  t.shape = std::move(shape);
  if (int64_t(values.size()) != t.numel()) {
    throw DataError("tensor data size " + std::to_string(values.size()) +
                    " does not match shape " + t.shape_str());
  }
  t.data = std::move(values);
  return t;
}

}  // namespace vividforge
