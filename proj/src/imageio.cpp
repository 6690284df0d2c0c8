#include "texbridge/imageio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>

#include <png.h>

namespace texbridge {

namespace {

uint16_t quantize16(float v) {
  float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<uint16_t>(std::lround(c * 65535.0));
}

void skip_ppm_whitespace(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      in.get();
    } else {
      return;
    }
  }
}

}  // namespace

void write_ppm16(const std::string& path, const TensorF& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw std::invalid_argument("write_ppm16 expects (3,H,W)");
  const int64_t H = img.dim(1), W = img.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << "P6\n" << W << " " << H << "\n65535\n";
  std::vector<uint8_t> row(static_cast<size_t>(W) * 6);
  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        uint16_t v = quantize16(img.at(c, y, x));
        row[static_cast<size_t>(x * 6 + c * 2)] = static_cast<uint8_t>(v >> 8);
        row[static_cast<size_t>(x * 6 + c * 2 + 1)] = static_cast<uint8_t>(v & 0xff);
      }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

TensorF read_ppm16(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw std::runtime_error("not a P6 ppm: " + path);
  skip_ppm_whitespace(in);
  int64_t w, h, maxval;
  in >> w;
  skip_ppm_whitespace(in);
  in >> h;
  skip_ppm_whitespace(in);
  in >> maxval;
  in.get();  // single whitespace after header
  if (maxval != 65535) throw std::runtime_error("expected 16-bit ppm: " + path);
  TensorF img({3, h, w});
  std::vector<uint8_t> row(static_cast<size_t>(w) * 6);
  for (int64_t y = 0; y < h; ++y) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!in) throw std::runtime_error("truncated ppm: " + path);
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        uint16_t v = static_cast<uint16_t>((row[static_cast<size_t>(x * 6 + c * 2)] << 8) |
                                           row[static_cast<size_t>(x * 6 + c * 2 + 1)]);
        img.at(c, y, x) = static_cast<float>(v) / 65535.0f;
      }
  }
  return img;
}

void write_pbm(const std::string& path, const std::vector<uint8_t>& mask, int64_t h, int64_t w) {
  if (static_cast<int64_t>(mask.size()) != h * w) throw std::invalid_argument("mask size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << "P4\n" << w << " " << h << "\n";
  const int64_t row_bytes = (w + 7) / 8;
  std::vector<uint8_t> row(static_cast<size_t>(row_bytes));
  for (int64_t y = 0; y < h; ++y) {
    std::fill(row.begin(), row.end(), 0);
    for (int64_t x = 0; x < w; ++x)
      // PBM: 1 = black; we store visibility, so visible pixels are white (0)
      if (!mask[static_cast<size_t>(y * w + x)]) row[static_cast<size_t>(x / 8)] |= uint8_t(0x80 >> (x % 8));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<uint8_t> read_pbm(const std::string& path, int64_t* h, int64_t* w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P4") throw std::runtime_error("not a P4 pbm: " + path);
  skip_ppm_whitespace(in);
  in >> *w;
  skip_ppm_whitespace(in);
  in >> *h;
  in.get();
  const int64_t row_bytes = (*w + 7) / 8;
  std::vector<uint8_t> mask(static_cast<size_t>(*h * *w));
  std::vector<uint8_t> row(static_cast<size_t>(row_bytes));
  for (int64_t y = 0; y < *h; ++y) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!in) throw std::runtime_error("truncated pbm: " + path);
    for (int64_t x = 0; x < *w; ++x) {
      bool black = row[static_cast<size_t>(x / 8)] & (0x80 >> (x % 8));
      mask[static_cast<size_t>(y * *w + x)] = black ? 0 : 1;
    }
  }
  return mask;
}

void write_png8(const std::string& path, const TensorF& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw std::invalid_argument("write_png8 expects (3,H,W)");
  const int64_t H = img.dim(1), W = img.dim(2);
  std::unique_ptr<FILE, decltype(&std::fclose)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw std::runtime_error("cannot open for write: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png write failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<uint8_t> row(static_cast<size_t>(W) * 3);
  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W; ++x)
      for (int64_t c = 0; c < 3; ++c)
        row[static_cast<size_t>(x * 3 + c)] =
            static_cast<uint8_t>(std::lround(std::clamp(img.at(c, y, x), 0.0f, 1.0f) * 255.0));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace texbridge
