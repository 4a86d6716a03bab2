#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "uex/core/rng.hpp"
#include "uex/data/dataset.hpp"

namespace uex {

namespace {

constexpr int kShapes = 10;

// Signed coverage test in glyph-local coordinates (p, q), size s.
bool inside(int shape, double p, double q, double s) {
  const double ap = std::abs(p), aq = std::abs(q), r = std::hypot(p, q);
  switch (shape) {
    case 0:  // disk
      return r < s;
    case 1:  // square
      return std::max(ap, aq) < 0.8 * s;
    case 2:  // triangle
      return q > -0.55 * s && ap * std::numbers::sqrt3 + q < s;
    case 3:  // ring
      return r < s && r > 0.55 * s;
    case 4:  // plus
      return (ap < 0.3 * s && aq < s) || (aq < 0.3 * s && ap < s);
    case 5: {  // saltire
      const double u = std::abs((p + q) * std::numbers::sqrt2 / 2), v = std::abs((p - q) * std::numbers::sqrt2 / 2);
      return (u < 0.25 * s && v < s) || (v < 0.25 * s && u < s);
    }
    case 6:  // diamond
      return ap + aq < s;
    case 7:  // twin bars
      return ap < s && aq > 0.2 * s && aq < 0.65 * s;
    case 8:  // crescent
      return r < s && std::hypot(p - 0.45 * s, q) > 0.8 * s;
    default:  // hexagon-ish
      return std::max(aq, ap * 0.866 + aq * 0.5) < 0.85 * s;
  }
}

struct Texture {
  double angle;
  double freq;
};

Texture class_texture(int c) {
  static constexpr std::array<double, 4> kAngles = {0.0, 45.0, 90.0, 135.0};
  return {kAngles[static_cast<std::size_t>((c * 3 + c / kShapes) % 4)] * std::numbers::pi / 180.0,
          2.5 + 1.5 * ((c / kShapes + c) % 3)};
}

void render(int cls, int height, int width, Rng& rng, float* out) {
  const int shape = cls % kShapes;
  const Texture tex = class_texture(cls);
  const double rot = rng.uniform(-0.35, 0.35);
  const double scale = rng.uniform(0.45, 0.75);
  const double cx = rng.uniform(-0.2, 0.2), cy = rng.uniform(-0.2, 0.2);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  std::array<double, 3> fg{}, bg{};
  // Keep fg/bg luminance apart so glyphs stay visible.
  const bool dark_bg = rng.uniform() < 0.5;
  for (int ch = 0; ch < 3; ++ch) {
    fg[ch] = dark_bg ? rng.uniform(0.55, 1.0) : rng.uniform(0.0, 0.45);
    bg[ch] = dark_bg ? rng.uniform(0.0, 0.35) : rng.uniform(0.65, 1.0);
  }
  const double cr = std::cos(rot), sr = std::sin(rot);
  const double ct = std::cos(tex.angle), st = std::sin(tex.angle);
  const long plane = static_cast<long>(height) * width;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double u = 2.0 * (x + 0.5) / width - 1.0 - cx;
      const double v = 2.0 * (y + 0.5) / height - 1.0 - cy;
      const double p = cr * u + sr * v, q = -sr * u + cr * v;
      const bool in = inside(shape, p, q, scale);
      const double stripe = 0.5 + 0.5 * std::sin(tex.freq * std::numbers::pi * (p * ct + q * st) / scale + phase);
      const double mix = in ? 0.35 + 0.65 * stripe : 0.0;
      for (int ch = 0; ch < 3; ++ch) {
        const double val = bg[ch] + mix * (fg[ch] - bg[ch]) + rng.normal(0.0, 0.04);
        out[ch * plane + static_cast<long>(y) * width + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
}

ImageBatch render_split(int classes, int per_class, int height, int width, Rng rng) {
  ImageBatch b;
  const int n = classes * per_class;
  b.pixels = Tensor<float>(Shape{n, 3, height, width});
  b.labels.resize(static_cast<std::size_t>(n));
  // Interleaved class order so any prefix is roughly balanced.
  for (int i = 0; i < n; ++i) {
    const int cls = i % classes;
    b.labels[static_cast<std::size_t>(i)] = cls;
    render(cls, height, width, rng, b.pixels.row(i).data());
  }
  return b;
}

}  // namespace

SplitDataset make_glyph_dataset(const LoadOptions& opts) {
  require(opts.class_count >= 2, "synthetic-glyphs needs at least 2 classes");
  require(opts.height >= 8 && opts.width >= 8, "synthetic-glyphs needs images of at least 8x8");
  require(opts.train_per_class >= 1 && opts.test_per_class >= 1, "synthetic-glyphs needs samples per class");
  SplitDataset ds;
  ds.id = "synthetic-glyphs:s" + std::to_string(opts.seed);
  ds.class_count = opts.class_count;
  const Rng root(opts.seed);
  ds.train = render_split(opts.class_count, opts.train_per_class, opts.height, opts.width, root.fork(1));
  ds.test = render_split(opts.class_count, opts.test_per_class, opts.height, opts.width, root.fork(2));
  ds.source_classes.resize(static_cast<std::size_t>(opts.class_count));
  for (int k = 0; k < opts.class_count; ++k) ds.source_classes[static_cast<std::size_t>(k)] = k;
  index_classes(ds);
  return ds;
}

}  // namespace uex
