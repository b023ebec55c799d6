#pragma once

#include <string>

#include "labelreg/optim.hpp"

namespace labelreg {

// Binary parameter snapshot: magic "LSRG0001", u32 little-endian array count,
// then per array u32 name length, UTF-8 name, u32 ndim, u32 dims..., raw
// 32-bit little-endian floats. Save -> load -> save is byte-identical.
void save_checkpoint(const ParamStore<float>& params, const std::string& path);
ParamStore<float> load_checkpoint(const std::string& path);

// Overwrites values of an existing (already built) store; every checkpoint
// array must match a known parameter's name and shape.
void load_params_into(ParamStore<float>& dst, const std::string& path);

}  // namespace labelreg
