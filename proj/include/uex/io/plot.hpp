#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "uex/generator/bank.hpp"

namespace uex {

/// 8-bit RGB raster, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h, std::array<std::uint8_t, 3> fill = {255, 255, 255});
  void set(int x, int y, std::array<std::uint8_t, 3> c);
  std::array<std::uint8_t, 3> at(int x, int y) const;
};

void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

struct Series {
  std::vector<double> y;  // x is the index
  std::array<std::uint8_t, 3> color{0, 0, 0};
};

/// Polylines over a framed plot area with horizontal grid lines at quarter
/// steps of [y_lo, y_hi]. Values outside the range are clipped.
Image render_line_plot(const std::vector<Series>& series, double y_lo, double y_hi, int width = 640, int height = 400);

/// One tile per class, left to right, each delta mapped from [-eps, eps] to
/// [0, 255] and upscaled by `scale` with nearest-neighbour sampling.
Image render_bank_grid(const PerturbationBank& bank, int scale = 16);

/// Distinguishable colours for series index i.
std::array<std::uint8_t, 3> palette(std::size_t i);

}  // namespace uex
