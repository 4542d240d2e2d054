#pragma once

#include <string>

#include "cmlp/tensor.hpp"

namespace cmlp {
namespace image {

// Binary netpbm only (P5 greyscale, P6 color), 8-bit maxval. Chosen so test
// fixtures can be written down byte by byte.

// Reads a raster into [1,3,H,W] with values scaled to [0,1]; greyscale input
// is replicated across the three channels. Malformed headers and short pixel
// payloads raise DataError carrying a byte offset.
template <typename T>
Tensor<T> read_image(const std::string& path);

// Writes a rank-2 map whose values lie in [0,1] as an 8-bit P5 raster.
// Values are clamped, then rounded to the nearest of 256 levels.
template <typename T>
void write_pgm(const std::string& path, const Tensor<T>& map);

} // namespace image
} // namespace cmlp
