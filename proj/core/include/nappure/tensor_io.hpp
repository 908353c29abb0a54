#pragma once

#include <string>

#include "nappure/tensor.hpp"

namespace nappure {

// NAPT v1 container: magic "NAPT", u32 little-endian header length, JSON
// header {"dtype":"f32le","shape":[C,H,W]}, then C*H*W little-endian f32
// payload in (channel, row, column) order. Values are narrowed to f32 on
// write; a file read back and rewritten is byte-identical.
void write_tensor(const std::string& path, const ImageTensor& t);
ImageTensor read_tensor(const std::string& path);

// Binary PGM (P5) for 1-channel or PPM (P6) for 3-channel tensors. Values are
// clamped to [0,1], scaled to 0..255 and rounded half up.
void export_ppm(const std::string& path, const ImageTensor& t);

}  // namespace nappure
