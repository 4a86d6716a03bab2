#include "doctest.h"

#include <omp.h>

#include <cmath>
#include <vector>

#include "uex/core/error.hpp"
#include "uex/core/rng.hpp"
#include "uex/core/kernels.hpp"
#include "uex/core/kernels_reference.hpp"
#include "uex/core/rng.hpp"

using namespace uex;
using kernels::ConvGeom;

namespace {

template <class T>
std::vector<T> random_vec(std::size_t n, Rng& rng) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-1.0, 1.0));
  return v;
}

template <class T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <class T>
void check_conv(const ConvGeom& g, Rng& rng, double tol) {
  const auto in = random_vec<T>(static_cast<std::size_t>(g.in_size()), rng);
  const auto w = random_vec<T>(static_cast<std::size_t>(g.weight_size()), rng);
  const auto b = random_vec<T>(static_cast<std::size_t>(g.out_ch), rng);
  const auto go = random_vec<T>(static_cast<std::size_t>(g.out_size()), rng);

  std::vector<T> o1(static_cast<std::size_t>(g.out_size())), o2(o1.size());
  kernels::conv2d_forward<T>(g, in, w, b, o1);
  kernels::reference::conv2d_forward<T>(g, in, w, b, o2);
  CHECK(max_abs_diff(o1, o2) <= tol);

  std::vector<T> gi1(static_cast<std::size_t>(g.in_size())), gi2(gi1.size());
  kernels::conv2d_backward_input<T>(g, go, w, gi1);
  kernels::reference::conv2d_backward_input<T>(g, go, w, gi2);
  CHECK(max_abs_diff(gi1, gi2) <= tol);

  std::vector<T> gw1(w.size(), T(0)), gw2(w.size(), T(0)), gb1(b.size(), T(0)), gb2(b.size(), T(0));
  kernels::conv2d_backward_weight<T>(g, in, go, gw1, gb1);
  kernels::reference::conv2d_backward_weight<T>(g, in, go, gw2, gb2);
  CHECK(max_abs_diff(gw1, gw2) <= tol * 10);
  CHECK(max_abs_diff(gb1, gb2) <= tol * 10);
}

}  // namespace

TEST_CASE("conv kernels agree with the serial reference") {
  Rng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    ConvGeom g;
    g.batch = 1 + rng.below(3);
    g.in_ch = 1 + rng.below(4);
    g.out_ch = 1 + rng.below(5);
    g.kernel = 1 + rng.below(4);
    g.stride = 1 + rng.below(2);
    g.pad = rng.below(g.kernel);
    g.in_h = g.kernel + rng.below(8);
    g.in_w = g.kernel + rng.below(8);
    CAPTURE(trial);
    check_conv<double>(g, rng, 1e-12);
    check_conv<float>(g, rng, 1e-4);
  }
}

TEST_CASE("linear kernels agree with the serial reference") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + rng.below(5), in = 1 + rng.below(30), out = 1 + rng.below(7);
    const auto x = random_vec<double>(static_cast<std::size_t>(n * in), rng);
    const auto w = random_vec<double>(static_cast<std::size_t>(out * in), rng);
    const auto b = random_vec<double>(static_cast<std::size_t>(out), rng);
    const auto gy = random_vec<double>(static_cast<std::size_t>(n * out), rng);
    std::vector<double> y1(static_cast<std::size_t>(n * out)), y2(y1.size());
    kernels::linear_forward<double>(n, in, out, x, w, b, y1);
    kernels::reference::linear_forward<double>(n, in, out, x, w, b, y2);
    CHECK(max_abs_diff(y1, y2) <= 1e-12);
    std::vector<double> gx1(x.size()), gx2(x.size());
    kernels::linear_backward_input<double>(n, in, out, gy, w, gx1);
    kernels::reference::linear_backward_input<double>(n, in, out, gy, w, gx2);
    CHECK(max_abs_diff(gx1, gx2) <= 1e-12);
    std::vector<double> gw1(w.size(), 0.0), gw2(w.size(), 0.0), gb1(b.size(), 0.0), gb2(b.size(), 0.0);
    kernels::linear_backward_weight<double>(n, in, out, x, gy, gw1, gb1);
    kernels::reference::linear_backward_weight<double>(n, in, out, x, gy, gw2, gb2);
    CHECK(max_abs_diff(gw1, gw2) <= 1e-12);
    CHECK(max_abs_diff(gb1, gb2) <= 1e-12);
  }
}

TEST_CASE("parallel conv output does not depend on the thread count") {
  Rng rng(9);
  ConvGeom g{4, 3, 9, 9, 6, 3, 2, 1};
  const auto in = random_vec<float>(static_cast<std::size_t>(g.in_size()), rng);
  const auto w = random_vec<float>(static_cast<std::size_t>(g.weight_size()), rng);
  std::vector<float> a(static_cast<std::size_t>(g.out_size())), b(a.size());
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  kernels::conv2d_forward<float>(g, in, w, {}, a);
  omp_set_num_threads(4);
  kernels::conv2d_forward<float>(g, in, w, {}, b);
  omp_set_num_threads(saved);
  CHECK(a == b);
}
