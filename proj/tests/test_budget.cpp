#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "uex/core/error.hpp"
#include "uex/core/rng.hpp"
#include "uex/data/dataset.hpp"
#include "uex/generator/generator.hpp"

using namespace uex;

// Randomized property cases: 10^4 per property.
namespace {
constexpr int kCases = 10000;
}

TEST_CASE("project_linf bound and idempotence") {
  Rng rng(11);
  for (int c = 0; c < kCases; ++c) {
    const double eps = rng.uniform(1e-4, 0.5);
    std::vector<float> d(static_cast<std::size_t>(1 + rng.below(16)));
    for (auto& v : d) v = static_cast<float>(rng.uniform(-2.0, 2.0));
    std::vector<float> inside = d;
    project_linf(d, eps);
    for (float v : d) REQUIRE(std::abs(v) <= static_cast<float>(eps));
    std::vector<float> twice = d;
    project_linf(twice, eps);
    REQUIRE(twice == d);
    for (auto& v : inside) v = static_cast<float>(v * eps / 4.0);
    std::vector<float> kept = inside;
    project_linf(kept, eps);
    REQUIRE(kept == inside);
  }
}

TEST_CASE("generator outputs stay inside the budget") {
  Rng rng(12);
  const Rational budgets[] = {{8, 255}, {16, 255}, {1, 255}, {1, 10}};
  int checked = 0;
  for (int gen = 0; checked < kCases; ++gen) {
    Generator g(GeneratorConfig{3, 8, 8, 2, 1}, static_cast<std::uint64_t>(gen));
    for (auto& p : g.params()) p *= static_cast<float>(rng.uniform(0.5, 50.0));  // push tanh into saturation too
    const Rational eps = budgets[gen % 4];
    Tensor<float> x(Shape{50, 3, 8, 8});
    for (auto& v : x.vec()) v = static_cast<float>(rng.uniform());
    const Tensor<float> d = generate(g, x, eps);
    for (int i = 0; i < 50; ++i, ++checked)
      for (float v : d.row(i)) REQUIRE(std::abs(v) <= static_cast<float>(eps.value()));
  }
}

TEST_CASE("bank stays in budget under arbitrary aggregation sequences") {
  Rng rng(13);
  const Rational eps{8, 255};
  PerturbationBank bank = PerturbationBank::zeros(4, 1, 3, 3, eps);
  for (int c = 0; c < kCases; ++c) {
    const int n = 1 + rng.below(6);
    Tensor<float> d(Shape{n, 1, 3, 3});
    for (auto& v : d.vec()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = rng.below(4);
    bank = aggregate_classwise(d, labels, std::move(bank), rng.uniform(0.0, 0.99));
    REQUIRE(bank.within_budget());
  }
}

TEST_CASE("apply_bank preserves the pixel range") {
  Rng rng(14);
  const Rational eps{8, 255};
  PerturbationBank bank = PerturbationBank::zeros(3, 1, 4, 4, eps);
  for (int c = 0; c < kCases; ++c) {
    if (c % 100 == 0)
      for (auto& v : bank.deltas.vec()) v = static_cast<float>(rng.uniform(-eps.value(), eps.value()));
    ImageBatch b;
    b.pixels = Tensor<float>(Shape{1, 1, 4, 4});
    for (auto& v : b.pixels.vec()) v = static_cast<float>(rng.below(3) == 0 ? rng.below(2) : rng.uniform());
    b.labels = {rng.below(3)};
    const ImageBatch out = apply_bank(b, bank, b.labels);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
      REQUIRE((out.pixels[i] >= 0.0f && out.pixels[i] <= 1.0f));
      REQUIRE(std::abs(out.pixels[i] - b.pixels[i]) <= static_cast<float>(eps.value()) + 1e-7f);
    }
  }
}
