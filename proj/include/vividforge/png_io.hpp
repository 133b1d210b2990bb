#pragma once

#include <string>

#include "vividforge/tensor.hpp"

namespace vividforge {

// Writes 8-bit PNG. Accepts [H,W,3] (RGB) or [H,W] (grayscale); values are
// clamped to [0,1] and quantized with round(v*255).
void write_png(const std::string& path, const Tensor& img);

// Reads an 8-bit non-interlaced gray or RGB PNG back to [H,W] / [H,W,3]
// doubles in [0,1].
Tensor read_png(const std::string& path);

}  // namespace vividforge
