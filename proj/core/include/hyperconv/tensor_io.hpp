#pragma once

#include <iosfwd>
#include <string>

#include "hyperconv/tensor.hpp"

namespace hyperconv {

/// TNSR container: magic "TNSR", u8 version=1, u8 dtype (0=f64, 1=f32),
/// u8 ndim, ndim little-endian u64 extents, then the row-major payload in
/// little-endian order. f32 files are promoted to f64 on load.
enum class TnsrDtype : unsigned char { F64 = 0, F32 = 1 };

void write_tnsr(std::ostream& os, const Tensor& t, TnsrDtype dtype = TnsrDtype::F64);
void write_tnsr_file(const std::string& path, const Tensor& t, TnsrDtype dtype = TnsrDtype::F64);

Tensor read_tnsr(std::istream& is);
Tensor read_tnsr_file(const std::string& path);

}  // namespace hyperconv
