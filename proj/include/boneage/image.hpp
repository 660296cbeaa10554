#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "boneage/errors.hpp"

namespace boneage {

/// Row-major 8-bit grayscale raster.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return pixels.size(); }
};

/// Row-major boolean raster; nonzero means foreground.
struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), bits(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int x, int y) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : bits) n += b ? 1 : 0;
    return n;
  }
};

/// Interleaved RGB raster (heatmap output).
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}
};

// Binary PGM (P5) and PPM (P6) round trips. Masks serialize as {0,255}.
GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
void write_pgm(const std::filesystem::path& path, const BinaryMask& mask);
BinaryMask read_mask_pgm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RgbImage& img);

}  // namespace boneage
