// Binary weights file, little-endian. Header: magic "EASW", version u32,
// tensor count u32. Per tensor: name (u16 length + bytes), dtype u8
// (0=f32, 1=f64), rank u8, dims u32 each, raw data. Bit-exact round trip.
#pragma once

#include <string>

#include "eas/net.hpp"

namespace eas {

inline constexpr uint32_t kWeightsVersion = 1;

template <typename Real>
void save_weights(const ArchitectureSpec& spec,
                  const NetworkParams<Real>& params, const std::string& path);

// Throws std::runtime_error on format violations or shape mismatches.
template <typename Real>
NetworkParams<Real> load_weights(const ArchitectureSpec& spec,
                                 const std::string& path);

// Dtype code stored in `path` (0=f32, 1=f64); lets callers pick the template.
int weights_dtype(const std::string& path);

}  // namespace eas
