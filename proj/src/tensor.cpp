// SPDX-License-Identifier: Apache-2.0
#include "asrcl/tensor.hpp"

#include <cmath>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "asrcl/errors.hpp"

namespace asrcl {

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

std::size_t shape_size(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(std::vector<std::size_t> dims, double fill)
    : shape(std::move(dims)), values(shape_size(shape), fill) {}

Tensor::Tensor(std::vector<std::size_t> dims, std::vector<double> data)
    : shape(std::move(dims)), values(std::move(data)) {
  if (values.size() != shape_size(shape)) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
}

Tensor Tensor::vector(std::vector<double> data) {
  const std::size_t n = data.size();
  return Tensor({n}, std::move(data));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

std::size_t Tensor::rows() const { return rank() == 2 ? shape[0] : 1; }

std::size_t Tensor::cols() const {
  if (rank() == 2) return shape[1];
  if (rank() == 1) return shape[0];
  return 1;
}

double Tensor::item() const {
  if (values.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape));
  return values[0];
}

bool Tensor::all_finite() const {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

Parameter::Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
  grad = Tensor(value.shape, 0.0);
}

void Parameter::zero_grad() {
  if (!grad.same_shape(value)) grad = Tensor(value.shape, 0.0);
  std::fill(grad.values.begin(), grad.values.end(), 0.0);
}

}  // namespace asrcl
