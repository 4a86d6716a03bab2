#include "doctest.h"

#include <algorithm>
#include <set>

#include "uex/core/error.hpp"
#include "uex/core/rng.hpp"
#include "uex/data/dataset.hpp"

using namespace uex;

namespace {

SplitDataset small_glyphs(std::uint64_t seed = 0) {
  LoadOptions o;
  o.height = o.width = 16;
  o.train_per_class = 12;
  o.test_per_class = 4;
  o.seed = seed;
  return make_glyph_dataset(o);
}

}  // namespace

TEST_CASE("glyph set is balanced, in range and deterministic") {
  const SplitDataset a = small_glyphs(), b = small_glyphs();
  CHECK(a.class_count == 10);
  CHECK(a.train.size() == 120);
  CHECK(a.test.size() == 40);
  CHECK(a.train.pixels.vec() == b.train.pixels.vec());
  CHECK(a.train.labels == b.train.labels);
  for (const auto& idx : a.per_class_index) CHECK(idx.size() == 12);
  for (float v : a.train.pixels.vec()) REQUIRE((v >= 0.0f && v <= 1.0f));
  CHECK(small_glyphs(1).train.pixels.vec() != a.train.pixels.vec());
}

TEST_CASE("disjoint prior split") {
  const SplitDataset d = small_glyphs();
  auto [prior, down] = make_disjoint_prior_split(d, 5, 5, 3);
  CHECK(prior.class_count == 5);
  CHECK(down.class_count == 5);
  std::set<int> p(prior.source_classes.begin(), prior.source_classes.end());
  for (int c : down.source_classes) CHECK(p.count(c) == 0);
  CHECK(prior.train.size() + down.train.size() == d.train.size());
  CHECK_THROWS_AS(make_disjoint_prior_split(d, 8, 3, 0), InvalidArgument);
}

TEST_CASE("cifar10 with a missing root fails") {
  LoadOptions o;
  CHECK_THROWS_AS(load_dataset("cifar10", "/nonexistent/cifar", o), IoError);
  CHECK_THROWS_AS(load_dataset("imagenet", "", o), InvalidArgument);
}

TEST_CASE("apply_bank clips and is the identity for a zero bank") {
  const SplitDataset d = small_glyphs();
  PerturbationBank zero = PerturbationBank::zeros(10, 3, 16, 16, {8, 255});
  const ImageBatch same = apply_bank(d.train, zero, d.train.labels);
  CHECK(same.pixels.vec() == d.train.pixels.vec());

  ImageBatch one;
  one.pixels = Tensor<float>(Shape{1, 3, 16, 16}, 1.0f);
  one.labels = {2};
  PerturbationBank up = zero;
  up.deltas.fill(8.0f / 255.0f);
  const ImageBatch clipped = apply_bank(one, up, one.labels);
  for (float v : clipped.pixels.vec()) CHECK(v == 1.0f);
}

TEST_CASE("mix_poison uses the floor rule") {
  LoadOptions o;
  o.height = o.width = 8;
  o.class_count = 2;
  o.train_per_class = 5;
  o.test_per_class = 1;
  const SplitDataset d = make_glyph_dataset(o);
  PerturbationBank bank = PerturbationBank::zeros(2, 3, 8, 8, {8, 255});
  bank.deltas.fill(0.01f);
  CHECK(mix_poison(d, bank, 0.0, 0).perturbed_count() == 0);
  CHECK(mix_poison(d, bank, 1.0, 0).perturbed_count() == 10);
  CHECK(mix_poison(d, bank, 0.5, 0).perturbed_count() == 5);
  CHECK(mix_poison(d, bank, 0.55, 0).perturbed_count() == 5);
  const PoisonMix m = mix_poison(d, bank, 0.5, 1);
  for (int i = 0; i < 10; ++i) {
    const bool changed = m.samples.pixels.row(i)[0] != d.train.pixels.row(i)[0] ||
                         !std::equal(m.samples.pixels.row(i).begin(), m.samples.pixels.row(i).end(), d.train.pixels.row(i).begin());
    CHECK(changed == m.perturbed[static_cast<std::size_t>(i)]);
  }
  CHECK_THROWS_AS(mix_poison(d, bank, 1.5, 0), InvalidArgument);
}
