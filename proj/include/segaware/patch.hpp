#pragma once

#include <cstddef>
#include <vector>

#include "segaware/tensor.hpp"

namespace segaware {

// Patch geometry shared by im2col/im2dist and all consumers. Kernel extents
// must be odd so every patch has a unique center; `atrous` dilates the
// neighbor grid without changing K. Out-of-bounds neighbors are excluded
// (flagged invalid), never zero-padded into existence.
struct PatchSpec {
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t atrous = 1;

  std::size_t patch() const { return kernel_h * kernel_w; }
  std::size_t center() const { return patch() / 2; }
  void validate() const;

  // Row/col displacement of neighbor k relative to the center pixel.
  std::ptrdiff_t row_offset(std::size_t k) const {
    return (static_cast<std::ptrdiff_t>(k / kernel_w) -
            static_cast<std::ptrdiff_t>(kernel_h / 2)) *
           static_cast<std::ptrdiff_t>(atrous);
  }
  std::ptrdiff_t col_offset(std::size_t k) const {
    return (static_cast<std::ptrdiff_t>(k % kernel_w) -
            static_cast<std::ptrdiff_t>(kernel_w / 2)) *
           static_cast<std::ptrdiff_t>(atrous);
  }
};

enum class Norm { L1, L2 };

// Patch matrix over an H x W image: one row per pixel, K neighbors per row,
// `channels` values per neighbor (1 for distance matrices). `values` is the
// rank-2 tensor [H*W x K*channels]; `valid[i*K + k]` marks in-bounds
// neighbors. Invalid slots hold 0 in value matrices and +infinity in
// distance matrices.
struct ColMatrix {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t patch = 0;
  std::size_t channels = 1;
  Tensor values;
  std::vector<unsigned char> valid;

  bool is_valid(std::size_t pixel, std::size_t k) const {
    return valid[pixel * patch + k] != 0;
  }
};

// Gather the K dilated neighbors of every pixel into rows: entry
// (i, k*E + c) = input(i + offset_k, c), 0 when out of bounds.
ColMatrix im2col(const Tensor& input, const PatchSpec& spec);

// Distance from each pixel's embedding to its K neighbors under `norm`.
// Center entry is exactly 0; out-of-bounds entries are +infinity.
ColMatrix im2dist(const Tensor& emb, const PatchSpec& spec, Norm norm);

// Adjoint of im2col: scatter-add each column entry back to its source
// pixel. Implemented as a per-destination gather so the accumulation order
// is fixed regardless of threading.
Tensor col2im(const ColMatrix& grad, const PatchSpec& spec);

// Adjoint of im2dist: chain grad through d(i,k) = ||e_i - e_j||. L1 uses
// sign(e_i - e_j) with sign(0) = 0; L2 uses (e_i - e_j)/d with the d = 0
// case contributing 0. Invalid entries contribute nothing.
Tensor dist2im(const ColMatrix& grad, const Tensor& emb, const PatchSpec& spec,
               Norm norm);

}  // namespace segaware
