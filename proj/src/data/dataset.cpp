#include "uex/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "uex/core/archive.hpp"
#include "uex/core/rng.hpp"

namespace uex {

namespace {

constexpr int kCifarSide = 32;
constexpr int kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

// Appends CIFAR-10 records, box-downsampling by an integer factor when asked.
void read_cifar_file(const std::filesystem::path& file, int height, int width, std::vector<float>& pixels,
                     std::vector<int>& labels) {
  if (!std::filesystem::exists(file)) throw IoError("missing CIFAR-10 file " + file.string());
  const std::string bytes = read_file(file);
  if (bytes.empty() || bytes.size() % kCifarRecord != 0)
    throw IoError("corrupt CIFAR-10 file " + file.string() + " (size " + std::to_string(bytes.size()) + ")");
  const int fh = kCifarSide / height, fw = kCifarSide / width;
  for (std::size_t at = 0; at < bytes.size(); at += kCifarRecord) {
    const int label = static_cast<unsigned char>(bytes[at]);
    if (label > 9) throw IoError("corrupt CIFAR-10 record in " + file.string());
    labels.push_back(label);
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          float acc = 0.0f;
          for (int dy = 0; dy < fh; ++dy)
            for (int dx = 0; dx < fw; ++dx) {
              const std::size_t src = at + 1 + static_cast<std::size_t>(ch * 1024 + (y * fh + dy) * 32 + x * fw + dx);
              acc += static_cast<unsigned char>(bytes[src]) / 255.0f;
            }
          pixels.push_back(acc / static_cast<float>(fh * fw));
        }
  }
}

ImageBatch make_batch(std::vector<float> pixels, std::vector<int> labels, int height, int width) {
  ImageBatch b;
  const int n = static_cast<int>(labels.size());
  b.pixels = Tensor<float>(Shape{n, 3, height, width}, std::move(pixels));
  b.labels = std::move(labels);
  return b;
}

}  // namespace

SplitDataset load_cifar10(const std::filesystem::path& root, int height, int width) {
  require(height > 0 && width > 0 && kCifarSide % height == 0 && kCifarSide % width == 0,
          "cifar10 image size must divide 32");
  if (!std::filesystem::is_directory(root)) throw IoError("missing CIFAR-10 root directory " + root.string());
  std::vector<float> px;
  std::vector<int> lb;
  for (int i = 1; i <= 5; ++i)
    read_cifar_file(root / ("data_batch_" + std::to_string(i) + ".bin"), height, width, px, lb);
  SplitDataset ds;
  ds.id = "cifar10";
  ds.class_count = 10;
  ds.train = make_batch(std::move(px), std::move(lb), height, width);
  px.clear();
  lb.clear();
  read_cifar_file(root / "test_batch.bin", height, width, px, lb);
  ds.test = make_batch(std::move(px), std::move(lb), height, width);
  ds.source_classes = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  index_classes(ds);
  return ds;
}

SplitDataset load_dataset(const std::string& name, const std::filesystem::path& root, const LoadOptions& opts) {
  if (name == "synthetic-glyphs" || name == "glyphs") return make_glyph_dataset(opts);
  if (name == "cifar10") return load_cifar10(root, opts.height, opts.width);
  throw InvalidArgument("unknown dataset id '" + name + "'");
}

void index_classes(SplitDataset& ds) {
  ds.per_class_index.assign(static_cast<std::size_t>(ds.class_count), {});
  for (int i = 0; i < ds.train.size(); ++i) {
    const int y = ds.train.labels[static_cast<std::size_t>(i)];
    require(y >= 0 && y < ds.class_count, "label " + std::to_string(y) + " out of range");
    ds.per_class_index[static_cast<std::size_t>(y)].push_back(i);
  }
}

ImageBatch gather(const ImageBatch& from, std::span<const int> indices) {
  ImageBatch b;
  const int n = static_cast<int>(indices.size());
  b.pixels = Tensor<float>(Shape{n, from.channels(), from.height(), from.width()});
  b.labels.resize(indices.size());
  const std::size_t inner = from.pixels.shape().inner();
  for (int i = 0; i < n; ++i) {
    const int src = indices[static_cast<std::size_t>(i)];
    std::copy_n(from.pixels.row(src).data(), inner, b.pixels.row(i).data());
    b.labels[static_cast<std::size_t>(i)] = from.labels[static_cast<std::size_t>(src)];
  }
  return b;
}

std::pair<SplitDataset, SplitDataset> make_disjoint_prior_split(const SplitDataset& dataset, int prior_classes,
                                                                int downstream_classes, std::uint64_t seed) {
  require(prior_classes >= 1 && downstream_classes >= 1, "class budgets must be positive");
  require(prior_classes + downstream_classes <= dataset.class_count,
          "class budget " + std::to_string(prior_classes) + "+" + std::to_string(downstream_classes) +
              " exceeds K=" + std::to_string(dataset.class_count));
  std::vector<int> order(static_cast<std::size_t>(dataset.class_count));
  for (int k = 0; k < dataset.class_count; ++k) order[static_cast<std::size_t>(k)] = k;
  Rng rng(seed);
  rng.shuffle(order);

  auto build = [&](std::vector<int> classes, const std::string& tag) {
    std::sort(classes.begin(), classes.end());
    std::vector<int> remap(static_cast<std::size_t>(dataset.class_count), -1);
    for (std::size_t i = 0; i < classes.size(); ++i) remap[static_cast<std::size_t>(classes[i])] = static_cast<int>(i);
    auto select = [&](const ImageBatch& src) {
      std::vector<int> keep;
      for (int i = 0; i < src.size(); ++i)
        if (remap[static_cast<std::size_t>(src.labels[static_cast<std::size_t>(i)])] >= 0) keep.push_back(i);
      ImageBatch out = gather(src, keep);
      for (auto& y : out.labels) y = remap[static_cast<std::size_t>(y)];
      return out;
    };
    SplitDataset ds;
    ds.id = dataset.id + "/" + tag + ":s" + std::to_string(seed);
    ds.class_count = static_cast<int>(classes.size());
    ds.train = select(dataset.train);
    ds.test = select(dataset.test);
    for (int c : classes) ds.source_classes.push_back(dataset.source_classes.empty() ? c : dataset.source_classes[static_cast<std::size_t>(c)]);
    index_classes(ds);
    return ds;
  };

  std::vector<int> prior(order.begin(), order.begin() + prior_classes);
  std::vector<int> down(order.begin() + prior_classes, order.begin() + prior_classes + downstream_classes);
  return {build(prior, "prior"), build(down, "downstream")};
}

ImageBatch apply_bank(const ImageBatch& batch, const PerturbationBank& bank, std::span<const int> assignment) {
  require(bank.channels() == batch.channels() && bank.height() == batch.height() && bank.width() == batch.width(),
          "bank shape " + bank.deltas.shape().str() + " does not match batch " + batch.pixels.shape().str());
  require(static_cast<int>(assignment.size()) == batch.size(), "assignment length must equal batch size");
  ImageBatch out = batch;
  for (int b = 0; b < batch.size(); ++b) {
    const int k = assignment[static_cast<std::size_t>(b)];
    require(k >= 0 && k < bank.class_count(), "assignment out of range");
    auto d = bank.delta(k);
    auto px = out.pixels.row(b);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::clamp(px[i] + d[i], 0.0f, 1.0f);
  }
  return out;
}

int PoisonMix::perturbed_count() const {
  return static_cast<int>(std::count(perturbed.begin(), perturbed.end(), true));
}

PoisonMix mix_poison(const SplitDataset& clean, const PerturbationSource& source, double ratio, std::uint64_t seed) {
  require(ratio >= 0.0 && ratio <= 1.0, "poison ratio must lie in [0, 1]");
  const int n = clean.train.size();
  if (const auto* d = std::get_if<SampleDeltas>(&source))
    require(d->count() == n, "per-sample delta count does not match the training set");
  PoisonMix mix;
  mix.ratio = ratio;
  mix.samples = clean.train;
  mix.perturbed.assign(static_cast<std::size_t>(n), false);
  const int count = static_cast<int>(std::floor(ratio * n));
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(order);
  for (int j = 0; j < count; ++j) {
    const int i = order[static_cast<std::size_t>(j)];
    mix.perturbed[static_cast<std::size_t>(i)] = true;
    auto d = own_delta(source, i, clean.train.labels[static_cast<std::size_t>(i)]);
    auto px = mix.samples.pixels.row(i);
    require(d.size() == px.size(), "perturbation shape does not match image shape");
    for (std::size_t p = 0; p < px.size(); ++p) px[p] = std::clamp(px[p] + d[p], 0.0f, 1.0f);
  }
  return mix;
}

void write_poison_manifest(const std::filesystem::path& path, const PoisonMix& mix) {
  std::string out = "index,class,perturbed_flag\n";
  for (int i = 0; i < mix.samples.size(); ++i)
    out += std::to_string(i) + "," + std::to_string(mix.samples.labels[static_cast<std::size_t>(i)]) + "," +
           (mix.perturbed[static_cast<std::size_t>(i)] ? "1" : "0") + "\n";
  write_file(path, out);
}

}  // namespace uex
