#include "segaware/tensor.hpp"

#include <cmath>
#include <sstream>

#include "segaware/parallel.hpp"

namespace segaware {

namespace {

std::size_t checked_product(const std::vector<std::size_t>& shape) {
  if (shape.empty() || shape.size() > 4) {
    throw DimensionError("tensor rank must be 1..4, got " + std::to_string(shape.size()));
  }
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be >= 1");
    n *= e;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> s, double fill) {
  std::size_t n = checked_product(s);
  shape = std::move(s);
  data.assign(n, fill);
}

Tensor Tensor::from(std::vector<std::size_t> s, std::vector<double> values) {
  std::size_t n = checked_product(s);
  if (n != values.size()) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape product " + std::to_string(n));
  }
  Tensor t;
  t.shape = std::move(s);
  t.data = std::move(values);
  return t;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (d) os << "x";
    os << shape[d];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::reshaped(std::vector<std::size_t> s) const {
  if (checked_product(s) != numel()) {
    throw DimensionError("reshape " + shape_str() + " to incompatible shape");
  }
  Tensor t;
  t.shape = std::move(s);
  t.data = data;
  return t;
}

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw DimensionError("elementwise operands differ in shape: " + a.shape_str() + " vs " +
                         b.shape_str());
  }
  Tensor out(a.shape);
  const std::size_t n = a.numel();
  switch (op) {
    case EwOp::Add:
      for (std::size_t i = 0; i < n; ++i) out.data[i] = a.data[i] + b.data[i];
      break;
    case EwOp::Sub:
      for (std::size_t i = 0; i < n; ++i) out.data[i] = a.data[i] - b.data[i];
      break;
    case EwOp::Mul:
      for (std::size_t i = 0; i < n; ++i) out.data[i] = a.data[i] * b.data[i];
      break;
    case EwOp::Div:
      for (std::size_t i = 0; i < n; ++i) {
        if (b.data[i] == 0.0) throw DimensionError("elementwise division by zero");
        out.data[i] = a.data[i] / b.data[i];
      }
      break;
    case EwOp::Exp:
      for (std::size_t i = 0; i < n; ++i) out.data[i] = std::exp(a.data[i]);
      break;
    case EwOp::Scale:
      throw DimensionError("scale requires a scalar operand");
  }
  return out;
}

Tensor elementwise(EwOp op, const Tensor& a, double b) {
  Tensor out(a.shape);
  const std::size_t n = a.numel();
  switch (op) {
    case EwOp::Add:
      for (std::size_t i = 0; i < n; ++i) out.data[i] = a.data[i] + b;
      break;
    case EwOp::Sub:
      for (std::size_t i = 0; i < n; ++i) out.data[i] = a.data[i] - b;
      break;
    case EwOp::Mul:
    case EwOp::Scale:
      for (std::size_t i = 0; i < n; ++i) out.data[i] = a.data[i] * b;
      break;
    case EwOp::Div:
      if (b == 0.0) throw DimensionError("elementwise division by zero");
      for (std::size_t i = 0; i < n; ++i) out.data[i] = a.data[i] / b;
      break;
    case EwOp::Exp:
      for (std::size_t i = 0; i < n; ++i) out.data[i] = std::exp(a.data[i]);
      break;
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwOp::Add, a, b); }
Tensor add(const Tensor& a, double b) { return elementwise(EwOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwOp::Mul, a, b); }
Tensor divide(const Tensor& a, const Tensor& b) { return elementwise(EwOp::Div, a, b); }
Tensor exp_map(const Tensor& a) { return elementwise(EwOp::Exp, a, 0.0); }
Tensor scale(const Tensor& a, double s) { return elementwise(EwOp::Scale, a, s); }

namespace {

void require_matrix(const Tensor& t, const char* name) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(name) + " must be rank 2, got shape " + t.shape_str());
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  const std::size_t m = a.shape[0], k = a.shape[1], k2 = b.shape[0], n = b.shape[1];
  if (k != k2) {
    throw DimensionError("matmul inner extents differ: " + a.shape_str() + " x " + b.shape_str());
  }
  Tensor c({m, n});
  const double* pa = a.data.data();
  const double* pb = b.data.data();
  double* pc = c.data.data();
  // i-k-j order: unit stride on b and c, and each c[m,n] still accumulates in
  // ascending k, so results are identical to the textbook triple loop.
  parallel_for_rows(m, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      double* crow = pc + i * n;
      const double* arow = pa + i * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double av = arow[kk];
        const double* brow = pb + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn lhs");
  require_matrix(b, "matmul_tn rhs");
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  if (m != b.shape[0]) {
    throw DimensionError("matmul_tn row extents differ: " + a.shape_str() + " x " + b.shape_str());
  }
  Tensor c({k, n});
  const double* pa = a.data.data();
  const double* pb = b.data.data();
  double* pc = c.data.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = pa + i * k;
    const double* brow = pb + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      double* crow = pc + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt lhs");
  require_matrix(b, "matmul_nt rhs");
  const std::size_t m = a.shape[0], n = a.shape[1], k = b.shape[0];
  if (n != b.shape[1]) {
    throw DimensionError("matmul_nt column extents differ: " + a.shape_str() + " x " +
                         b.shape_str());
  }
  Tensor c({m, k});
  const double* pa = a.data.data();
  const double* pb = b.data.data();
  double* pc = c.data.data();
  parallel_for_rows(m, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      const double* arow = pa + i * n;
      double* crow = pc + i * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double* brow = pb + kk * n;
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
        crow[kk] = acc;
      }
    }
  });
  return c;
}

Tensor upsample_nearest(const Tensor& t, std::size_t factor) {
  if (t.rank() != 3) {
    throw DimensionError("upsample_nearest expects H x W x C, got " + t.shape_str());
  }
  if (factor == 0) throw DimensionError("upsample factor must be >= 1");
  const std::size_t h = t.shape[0], w = t.shape[1], c = t.shape[2];
  Tensor out({h * factor, w * factor, c});
  for (std::size_t y = 0; y < h * factor; ++y) {
    const std::size_t sy = y / factor;
    for (std::size_t x = 0; x < w * factor; ++x) {
      const std::size_t sx = x / factor;
      const double* src = &t.data[(sy * w + sx) * c];
      double* dst = &out.data[(y * w * factor + x) * c];
      for (std::size_t ch = 0; ch < c; ++ch) dst[ch] = src[ch];
    }
  }
  return out;
}

Tensor upsample_nearest_backward(const Tensor& grad, std::size_t factor) {
  if (grad.rank() != 3) {
    throw DimensionError("upsample_nearest_backward expects H x W x C, got " + grad.shape_str());
  }
  if (factor == 0) throw DimensionError("upsample factor must be >= 1");
  const std::size_t hf = grad.shape[0], wf = grad.shape[1], c = grad.shape[2];
  if (hf % factor != 0 || wf % factor != 0) {
    throw DimensionError("gradient extents not divisible by upsample factor");
  }
  Tensor out({hf / factor, wf / factor, c});
  for (std::size_t y = 0; y < hf; ++y) {
    const std::size_t sy = y / factor;
    for (std::size_t x = 0; x < wf; ++x) {
      const std::size_t sx = x / factor;
      const double* src = &grad.data[(y * wf + x) * c];
      double* dst = &out.data[(sy * (wf / factor) + sx) * c];
      for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
    }
  }
  return out;
}

Tensor init_uniform(std::vector<std::size_t> shape, Rng& rng, double bound) {
  if (!(bound > 0.0)) throw DimensionError("init_uniform bound must be > 0");
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform_pm(bound);
  return t;
}

}  // namespace segaware
