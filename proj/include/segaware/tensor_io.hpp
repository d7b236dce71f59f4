#pragma once

#include <string>

#include "segaware/tensor.hpp"

namespace segaware {

// Binary tensor container: 4-byte magic "TNSR", 1-byte dtype tag
// (0x01 = float64 little-endian), 1-byte rank, then rank uint32 extents
// (little-endian) followed by the row-major payload.
void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

}  // namespace segaware
