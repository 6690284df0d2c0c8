#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "texbridge/tensor.hpp"

namespace texbridge {

/// images on disk are (3, H, W) float tensors in [0,1]

// lossless 16-bit binary PPM (P6, maxval 65535, big-endian samples)
void write_ppm16(const std::string& path, const TensorF& img);
TensorF read_ppm16(const std::string& path);

// 1-bit binary PBM (P4); mask entries are 0/1, 1 = visible
void write_pbm(const std::string& path, const std::vector<uint8_t>& mask, int64_t h, int64_t w);
std::vector<uint8_t> read_pbm(const std::string& path, int64_t* h, int64_t* w);

// 8-bit RGB PNG, for figures
void write_png8(const std::string& path, const TensorF& img);

}  // namespace texbridge
