#pragma once

#include <string>

#include "segaware/labels.hpp"
#include "segaware/tensor.hpp"

namespace segaware {

// Binary PPM (P6, maxval 255) for RGB images in [0,1]; values are clamped
// and rounded on write. Binary PGM (P5, maxval 255) for label maps.
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);

void write_pgm(const std::string& path, const LabelMap& labels);
LabelMap read_pgm(const std::string& path);

}  // namespace segaware
