#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "segaware/errors.hpp"
#include "segaware/rng.hpp"

namespace segaware {

// Dense row-major double tensor, rank 1..4. Spatial maps use H x W x C order.
// No strides, no views: every tensor owns contiguous storage.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0);

  static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<std::size_t> s, double v) { return Tensor(std::move(s), v); }
  // Row-major values; size must match the shape product.
  static Tensor from(std::vector<std::size_t> s, std::vector<double> values);

  std::size_t rank() const { return shape.size(); }
  std::size_t numel() const { return data.size(); }
  std::size_t extent(std::size_t d) const { return shape.at(d); }

  double& operator()(std::size_t i) { return data[i]; }
  double operator()(std::size_t i) const { return data[i]; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * shape[1] + j) * shape[2] + k];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const;

  // Same data, new shape (product must match).
  Tensor reshaped(std::vector<std::size_t> s) const;
};

enum class EwOp { Add, Sub, Mul, Div, Exp, Scale };

// Pointwise binary application; shapes must match exactly (no broadcasting).
Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b);
// b used as scalar operand; Exp ignores it.
Tensor elementwise(EwOp op, const Tensor& a, double b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor exp_map(const Tensor& a);
Tensor scale(const Tensor& a, double s);

// c[m,n] = sum_k a[m,k] * b[k,n], accumulated in ascending k so independent
// oracle comparisons can use tight tolerances.
Tensor matmul(const Tensor& a, const Tensor& b);
// c[k,n] = sum_m a[m,k] * b[m,n] (a transposed), m ascending.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
// c[m,k] = sum_n a[m,n] * b[k,n] (b transposed), n ascending.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// Nearest-neighbour upsampling of an H x W x C map by an integer factor.
Tensor upsample_nearest(const Tensor& t, std::size_t factor);
// Adjoint of upsample_nearest: sums each factor x factor block.
Tensor upsample_nearest_backward(const Tensor& grad, std::size_t factor);

// I.i.d. samples in [-bound, +bound). Callers wanting fan-in scaling pass
// bound = sqrt(3 / fan_in).
Tensor init_uniform(std::vector<std::size_t> shape, Rng& rng, double bound);

}  // namespace segaware
