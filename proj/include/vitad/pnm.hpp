#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "vitad/tensor.hpp"

namespace vitad {

namespace fs = std::filesystem;

inline std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

/// Decodes binary PGM (P5) / PPM (P6) with maxval 255 into a [C, H, W] tensor
/// scaled to [0, 1]. Header comments and arbitrary whitespace are accepted.
inline Tensor<float> decode_pnm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& m) -> void {
    throw FormatError("pnm: " + m + " (byte " + std::to_string(pos) + ")");
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    fail("bad magic, expected P5 or P6");
  }
  const std::size_t channels = bytes[1] == '6' ? 3 : 1;
  pos = 2;
  auto skip_space_and_comments = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&]() -> std::size_t {
    skip_space_and_comments();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) fail("expected an unsigned integer");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) fail("header value too large");
      ++pos;
    }
    return v;
  };
  const std::size_t w = read_uint();
  const std::size_t h = read_uint();
  const std::size_t maxval = read_uint();
  if (w == 0 || h == 0) fail("zero image extent");
  if (maxval != 255) fail("maxval must be 255, got " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) fail("missing whitespace after header");
  ++pos;
  const std::size_t need = w * h * channels;
  if (bytes.size() - pos < need) fail("truncated payload: need " + std::to_string(need) + " bytes");
  Tensor<float> out({channels, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        out[(c * h + y) * w + x] = static_cast<float>(bytes[pos + (y * w + x) * channels + c]) / 255.0f;
  return out;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

/// [1|3, H, W] tensor in [0, 1] -> P5 or P6 bytes (values rounded to nearest).
inline std::vector<std::uint8_t> encode_pnm(const Tensor<float>& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    throw DimensionError("encode_pnm expects [1,H,W] or [3,H,W], got " + shape_str(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::string header =
      (c == 3 ? "P6\n" : "P5\n") + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) out.push_back(to_byte(image[(ch * h + y) * w + x]));
  return out;
}

/// Raw 8-bit [H, W] buffer -> P5 bytes.
inline std::vector<std::uint8_t> encode_pgm_bytes(std::span<const std::uint8_t> pixels,
                                                  std::size_t h, std::size_t w) {
  const std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

inline Tensor<float> read_pnm(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_pnm(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace vitad
