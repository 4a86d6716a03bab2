#include "uex/io/plot.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>

#include "uex/core/error.hpp"

namespace uex {

Image::Image(int w, int h, std::array<std::uint8_t, 3> fill) : width(w), height(h) {
  require(w > 0 && h > 0, "image dimensions must be positive");
  rgb.resize(static_cast<std::size_t>(w) * h * 3);
  for (std::size_t i = 0; i < rgb.size(); i += 3) std::copy(fill.begin(), fill.end(), rgb.begin() + static_cast<long>(i));
}

void Image::set(int x, int y, std::array<std::uint8_t, 3> c) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  std::copy(c.begin(), c.end(), rgb.begin() + (static_cast<long>(y) * width + x) * 3);
}

std::array<std::uint8_t, 3> Image::at(int x, int y) const {
  const auto* p = rgb.data() + (static_cast<long>(y) * width + x) * 3;
  return {p[0], p[1], p[2]};
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

void on_png_warning(png_structp, png_const_charp) {}

void line(Image& img, int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    img.set(x0, y0, c);
    img.set(x0, y0 + 1, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& img) {
  require(img.width > 0 && img.height > 0, "cannot write an empty image");
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, on_png_warning);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed for " + path.string());
  }
  {
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y)
      png_write_row(png, const_cast<png_bytep>(img.rgb.data() + static_cast<std::size_t>(y) * img.width * 3));
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, on_png_warning);
  png_infop info = png_create_info_struct(png);
  Image img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("PNG decoding failed for " + path.string());
  }
  {
    png_init_io(png, f.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_palette_to_rgb(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    img = Image(static_cast<int>(png_get_image_width(png, info)), static_cast<int>(png_get_image_height(png, info)));
    for (int y = 0; y < img.height; ++y) png_read_row(png, img.rgb.data() + static_cast<std::size_t>(y) * img.width * 3, nullptr);
    png_read_end(png, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

std::array<std::uint8_t, 3> palette(std::size_t i) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 8> kColors{{{31, 119, 180},
                                                                       {214, 39, 40},
                                                                       {44, 160, 44},
                                                                       {255, 127, 14},
                                                                       {148, 103, 189},
                                                                       {140, 86, 75},
                                                                       {227, 119, 194},
                                                                       {127, 127, 127}}};
  return kColors[i % kColors.size()];
}

Image render_line_plot(const std::vector<Series>& series, double y_lo, double y_hi, int width, int height) {
  require(!series.empty(), "nothing to plot");
  require(y_hi > y_lo, "empty plot range");
  Image img(width, height);
  const int left = 40, right = width - 20, top = 20, bottom = height - 30;
  const std::array<std::uint8_t, 3> grid{220, 220, 220}, frame{0, 0, 0};
  for (int q = 1; q < 4; ++q) {
    const int y = bottom - (bottom - top) * q / 4;
    for (int x = left; x <= right; ++x) img.set(x, y, grid);
  }
  for (int x = left; x <= right; ++x) {
    img.set(x, top, frame);
    img.set(x, bottom, frame);
  }
  for (int y = top; y <= bottom; ++y) {
    img.set(left, y, frame);
    img.set(right, y, frame);
  }
  std::size_t longest = 0;
  for (const auto& s : series) longest = std::max(longest, s.y.size());
  const double span = longest > 1 ? static_cast<double>(longest - 1) : 1.0;
  auto px = [&](std::size_t i) { return left + static_cast<int>(std::lround((right - left) * static_cast<double>(i) / span)); };
  auto py = [&](double v) {
    const double t = std::clamp((v - y_lo) / (y_hi - y_lo), 0.0, 1.0);
    return bottom - static_cast<int>(std::lround((bottom - top) * t));
  };
  for (const auto& s : series) {
    if (s.y.size() == 1) line(img, px(0) - 2, py(s.y[0]), px(0) + 2, py(s.y[0]), s.color);
    for (std::size_t i = 1; i < s.y.size(); ++i) line(img, px(i - 1), py(s.y[i - 1]), px(i), py(s.y[i]), s.color);
  }
  return img;
}

Image render_bank_grid(const PerturbationBank& bank, int scale) {
  require(scale >= 1, "scale must be positive");
  const int k = bank.class_count(), c = bank.channels(), h = bank.height(), w = bank.width();
  require(c == 1 || c == 3, "bank grid needs 1 or 3 channels");
  const double eps = bank.epsilon.value();
  require(eps > 0.0, "bank budget must be positive");
  const int gap = 2;
  Image img(k * w * scale + (k - 1) * gap, h * scale);
  const long plane = static_cast<long>(h) * w;
  for (int cls = 0; cls < k; ++cls) {
    const auto d = bank.delta(cls);
    const int x0 = cls * (w * scale + gap);
    for (int y = 0; y < h * scale; ++y)
      for (int x = 0; x < w * scale; ++x) {
        const long p = static_cast<long>(y / scale) * w + x / scale;
        std::array<std::uint8_t, 3> px{};
        for (int ch = 0; ch < 3; ++ch) {
          const float v = d[static_cast<std::size_t>((c == 3 ? ch : 0) * plane + p)];
          px[static_cast<std::size_t>(ch)] = static_cast<std::uint8_t>(std::lround(std::clamp((v / eps + 1.0) * 0.5, 0.0, 1.0) * 255.0));
        }
        img.set(x0 + x, y, px);
      }
  }
  return img;
}

}  // namespace uex
