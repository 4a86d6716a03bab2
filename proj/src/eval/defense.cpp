#include "uex/eval/defense.hpp"

#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <vector>

namespace uex {

void DefenseSpec::validate(int height, int width) const {
  switch (kind) {
    case DefenseKind::cutout:
      require(mask_size >= 1 && mask_size <= height && mask_size <= width,
              "cutout mask " + std::to_string(mask_size) + " does not fit a " + std::to_string(height) + "x" +
                  std::to_string(width) + " image");
      break;
    case DefenseKind::mixup:
    case DefenseKind::cutmix:
      require(beta_param > 0.0, "Beta parameter must be positive");
      break;
    case DefenseKind::jpeg:
      require(quality >= 1 && quality <= 100, "JPEG quality must lie in [1, 100]");
      break;
    case DefenseKind::none:
      break;
  }
}

std::string DefenseSpec::str() const {
  auto num = [](double v) {
    std::string s = std::to_string(v);
    s.erase(s.find_last_not_of('0') + 1);
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s;
  };
  switch (kind) {
    case DefenseKind::none: return "none";
    case DefenseKind::cutout: return "cutout:" + std::to_string(mask_size);
    case DefenseKind::mixup: return "mixup:" + num(beta_param);
    case DefenseKind::cutmix: return "cutmix:" + num(beta_param);
    case DefenseKind::jpeg: return "jpeg:" + std::to_string(quality);
  }
  return "?";
}

DefenseSpec DefenseSpec::parse(const std::string& s) {
  DefenseSpec d;
  const auto colon = s.find(':');
  const std::string name = s.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : s.substr(colon + 1);
  try {
    if (name == "none") {
      d.kind = DefenseKind::none;
    } else if (name == "cutout") {
      d.kind = DefenseKind::cutout;
      if (!arg.empty()) d.mask_size = std::stoi(arg);
    } else if (name == "mixup" || name == "cutmix") {
      d.kind = name == "mixup" ? DefenseKind::mixup : DefenseKind::cutmix;
      if (!arg.empty()) d.beta_param = std::stod(arg);
    } else if (name == "jpeg") {
      d.kind = DefenseKind::jpeg;
      if (!arg.empty()) d.quality = std::stoi(arg);
    } else {
      throw InvalidArgument("unknown defense '" + s + "'");
    }
  } catch (const std::logic_error&) {
    throw InvalidArgument("bad defense parameter in '" + s + "'");
  }
  return d;
}

nlohmann::json DefenseSpec::to_json() const {
  const std::string name = str();
  return {{"kind", name.substr(0, name.find(':'))},
          {"mask_size", mask_size},
          {"beta_param", beta_param},
          {"quality", quality},
          {"seed", seed}};
}

DefenseSpec DefenseSpec::from_json(const nlohmann::json& j) {
  DefenseSpec d = parse(j.value("kind", std::string("none")));
  d.mask_size = j.value("mask_size", d.mask_size);
  d.beta_param = j.value("beta_param", d.beta_param);
  d.quality = j.value("quality", d.quality);
  d.seed = j.value("seed", d.seed);
  return d;
}

void cutout_image(std::span<float> image, int channels, int height, int width, int top, int left, int size) {
  require(top >= 0 && left >= 0 && top + size <= height && left + size <= width, "cutout square outside the image");
  for (int c = 0; c < channels; ++c)
    for (int y = top; y < top + size; ++y)
      std::fill_n(image.begin() + (static_cast<long>(c) * height + y) * width + left, size, 0.0f);
}

void mixup_images(std::span<float> out, std::span<const float> a, std::span<const float> b, double lambda) {
  require(lambda >= 0.0 && lambda <= 1.0, "mixup weight must lie in [0, 1]");
  const float l = static_cast<float>(lambda);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = l * a[i] + (1.0f - l) * b[i];
}

double cutmix_images(std::span<float> dst, std::span<const float> src, int channels, int height, int width, int top,
                     int left, int bh, int bw) {
  require(top >= 0 && left >= 0 && top + bh <= height && left + bw <= width, "cutmix box outside the image");
  for (int c = 0; c < channels; ++c)
    for (int y = top; y < top + bh; ++y) {
      const long off = (static_cast<long>(c) * height + y) * width + left;
      std::copy_n(src.begin() + off, bw, dst.begin() + off);
    }
  return 1.0 - static_cast<double>(bh) * bw / (static_cast<double>(height) * width);
}

namespace {

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void on_jpeg_error(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

std::vector<unsigned char> encode_jpeg(const std::vector<unsigned char>& pixels, int channels, int height, int width,
                                       int quality) {
  jpeg_compress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = on_jpeg_error;
  unsigned char* buf = nullptr;
  unsigned long size = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(buf);
    throw Error("JPEG encoding failed");
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buf, &size);
  cinfo.image_width = static_cast<JDIMENSION>(width);
  cinfo.image_height = static_cast<JDIMENSION>(height);
  cinfo.input_components = channels;
  cinfo.in_color_space = channels == 3 ? JCS_RGB : JCS_GRAYSCALE;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  for (int c = 0; c < cinfo.num_components; ++c) {
    cinfo.comp_info[c].h_samp_factor = 1;
    cinfo.comp_info[c].v_samp_factor = 1;
  }
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<unsigned char*>(pixels.data()) + static_cast<std::size_t>(cinfo.next_scanline) * width * channels;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::vector<unsigned char> out(buf, buf + size);
  std::free(buf);
  return out;
}

std::vector<unsigned char> decode_jpeg(const std::vector<unsigned char>& data, int channels, int height, int width) {
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = on_jpeg_error;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw Error("JPEG decoding failed");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, data.data(), static_cast<unsigned long>(data.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = channels == 3 ? JCS_RGB : JCS_GRAYSCALE;
  jpeg_start_decompress(&cinfo);
  std::vector<unsigned char> out(static_cast<std::size_t>(height) * width * channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.data() + static_cast<std::size_t>(cinfo.output_scanline) * width * channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

}  // namespace

Tensor<float> jpeg_roundtrip(const Tensor<float>& pixels, int quality) {
  require(quality >= 1 && quality <= 100, "JPEG quality must lie in [1, 100]");
  require(pixels.shape().rank() == 4, "expected NCHW images");
  const int n = pixels.dim(0), c = pixels.dim(1), h = pixels.dim(2), w = pixels.dim(3);
  require(c == 1 || c == 3, "JPEG supports 1 or 3 channels");
  Tensor<float> out(pixels.shape());
  std::vector<unsigned char> hwc(static_cast<std::size_t>(h) * w * c);
  const long plane = static_cast<long>(h) * w;
  for (int i = 0; i < n; ++i) {
    const auto src = pixels.row(i);
    for (int ch = 0; ch < c; ++ch)
      for (long p = 0; p < plane; ++p)
        hwc[static_cast<std::size_t>(p * c + ch)] =
            static_cast<unsigned char>(std::lround(std::clamp(src[static_cast<std::size_t>(ch * plane + p)], 0.0f, 1.0f) * 255.0f));
    const auto dec = decode_jpeg(encode_jpeg(hwc, c, h, w, quality), c, h, w);
    auto dst = out.row(i);
    for (int ch = 0; ch < c; ++ch)
      for (long p = 0; p < plane; ++p)
        dst[static_cast<std::size_t>(ch * plane + p)] = static_cast<float>(dec[static_cast<std::size_t>(p * c + ch)]) / 255.0f;
  }
  return out;
}

void apply_defense(Tensor<float>& pixels, Tensor<float>& targets, const DefenseSpec& spec, Rng& rng) {
  const int n = pixels.dim(0), c = pixels.dim(1), h = pixels.dim(2), w = pixels.dim(3);
  spec.validate(h, w);
  require(targets.dim(0) == n, "one target row per image required");
  switch (spec.kind) {
    case DefenseKind::none:
      return;
    case DefenseKind::cutout:
      for (int i = 0; i < n; ++i) {
        const int top = rng.below(h - spec.mask_size + 1), left = rng.below(w - spec.mask_size + 1);
        cutout_image(pixels.row(i), c, h, w, top, left, spec.mask_size);
      }
      return;
    case DefenseKind::jpeg:
      pixels = jpeg_roundtrip(pixels, spec.quality);
      return;
    case DefenseKind::mixup:
    case DefenseKind::cutmix: {
      std::vector<int> perm(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
      rng.shuffle(perm);
      const Tensor<float> src = pixels, tsrc = targets;
      for (int i = 0; i < n; ++i) {
        const int j = perm[static_cast<std::size_t>(i)];
        double lambda = rng.beta(spec.beta_param, spec.beta_param);
        if (spec.kind == DefenseKind::mixup) {
          mixup_images(pixels.row(i), src.row(i), src.row(j), lambda);
        } else {
          const double cut = std::sqrt(1.0 - lambda);
          const int bh = static_cast<int>(std::lround(h * cut)), bw = static_cast<int>(std::lround(w * cut));
          const int top = rng.below(h - bh + 1), left = rng.below(w - bw + 1);
          lambda = cutmix_images(pixels.row(i), src.row(j), c, h, w, top, left, bh, bw);
        }
        auto t = targets.row(i);
        const auto a = tsrc.row(i), b = tsrc.row(j);
        for (std::size_t k = 0; k < t.size(); ++k)
          t[k] = static_cast<float>(lambda) * a[k] + static_cast<float>(1.0 - lambda) * b[k];
      }
      return;
    }
  }
}

BatchTransform make_defense_transform(const DefenseSpec& spec) {
  if (spec.kind == DefenseKind::none) return {};
  auto rng = std::make_shared<Rng>(Rng(spec.seed).fork(fnv1a("defense")));
  return [spec, rng](Tensor<float>& pixels, Tensor<float>& targets, Rng&) { apply_defense(pixels, targets, spec, *rng); };
}

}  // namespace uex
