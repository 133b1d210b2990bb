#pragma once

#include <string>

#include "vividforge/tensor.hpp"

namespace vividforge {

// .tnsr layout, all little-endian:
//   bytes 0..3   magic "TNSR"
//   bytes 4..5   version (u16) == 1
//   byte  6      dtype (u8): 0 = f32, 1 = f64
//   byte  7      ndim (u8), 1..8
//   then ndim * u64 dims, then the row-major payload.
// In memory everything is double; dtype only controls the on-disk width.
void save_tensor(const std::string& path, const Tensor& t, bool as_f32 = false);

// Throws DataError on bad magic/version/dtype, dim overflow, or a payload
// whose byte count does not match the header exactly.
Tensor load_tensor(const std::string& path);

}  // namespace vividforge
