#include "doctest.h"

#include <array>
#include <cmath>

#include "texbridge/rng.hpp"
#include "texbridge/tensor.hpp"

using namespace texbridge;

namespace {

// reference broadcast binary op: straightforward index arithmetic, no fast paths
template <typename F>
TensorD naive_binary(const TensorD& a, const TensorD& b, F f) {
  Shape os = broadcast_shape(a.shape(), b.shape());
  TensorD out(os);
  size_t r = os.size();
  std::vector<int64_t> sa(r), sb(r);
  detail::aligned_strides(a.shape(), r, sa.data());
  detail::aligned_strides(b.shape(), r, sb.data());
  std::vector<int64_t> idx(r, 0);
  for (int64_t lin = 0; lin < out.size(); ++lin) {
    int64_t ia = 0, ib = 0;
    for (size_t i = 0; i < r; ++i) {
      ia += idx[i] * sa[i];
      ib += idx[i] * sb[i];
    }
    out[lin] = f(a[ia], b[ib]);
    for (size_t i = r; i-- > 0;) {
      if (++idx[i] < os[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

double max_abs_diff(const TensorD& a, const TensorD& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double dot(const TensorD& a, const TensorD& b) {
  double s = 0;
  for (int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("broadcast binary ops match the reference for typical layouts") {
  Rng rng(7);
  auto addf = [](double x, double y) { return x + y; };
  auto mulf = [](double x, double y) { return x * y; };

  std::vector<std::pair<Shape, Shape>> cases = {
      {{2, 3, 4, 5}, {2, 3, 4, 5}},  // same shape
      {{2, 3, 4, 5}, {1, 3, 1, 1}},  // channel bias
      {{2, 3, 4, 5}, {2, 3, 1, 1}},  // per-sample per-channel gain
      {{2, 3, 4, 5}, {}},            // scalar
      {{2, 3}, {3}},                 // trailing vector
      {{3, 1}, {1, 4}},              // outer product style
      {{1, 3, 1, 1}, {2, 3, 4, 5}},  // broadcast on the left
      {{4, 1, 5}, {4, 6, 1}},        // mixed middles
  };
  for (auto& [s1, s2] : cases) {
    TensorD a = rng.normal_tensor<double>(s1);
    TensorD b = rng.normal_tensor<double>(s2);
    CHECK(max_abs_diff(add(a, b), naive_binary(a, b, addf)) == 0.0);
    CHECK(max_abs_diff(mul(a, b), naive_binary(a, b, mulf)) == 0.0);
    CHECK(max_abs_diff(sub(a, b), naive_binary(a, b, [](double x, double y) { return x - y; })) ==
          0.0);
  }
}

TEST_CASE("sum_axes agrees with naive accumulation and keeps dims") {
  Rng rng(8);
  TensorD a = rng.normal_tensor<double>({2, 3, 4, 5});
  TensorD s = sum_axes(a, {0, 2, 3});
  CHECK(s.shape() == Shape{1, 3, 1, 1});
  for (int64_t c = 0; c < 3; ++c) {
    double acc = 0;
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t h = 0; h < 4; ++h)
        for (int64_t w = 0; w < 5; ++w) acc += a.at(n, c, h, w);
    CHECK(s[c] == doctest::Approx(acc).epsilon(1e-12));
  }
  CHECK(sum_all(a) == doctest::Approx(sum_all(sum_axes(a, {0, 1, 2, 3}))).epsilon(1e-12));
}

TEST_CASE("sum_to reverses broadcast_to") {
  Rng rng(9);
  TensorD a = rng.normal_tensor<double>({1, 3, 1, 1});
  TensorD big = broadcast_to(a, {2, 3, 4, 5});
  TensorD back = sum_to(big, {1, 3, 1, 1});
  for (int64_t c = 0; c < 3; ++c) CHECK(back[c] == doctest::Approx(a[c] * 2 * 4 * 5));
  // reducing to a lower-rank target
  TensorD v = sum_to(big, Shape{3, 1, 1});
  CHECK(v.shape() == Shape{3, 1, 1});
  CHECK(v[0] == doctest::Approx(a[0] * 40));
}

TEST_CASE("matmul matches a triple loop") {
  Rng rng(10);
  TensorD a = rng.normal_tensor<double>({4, 6});
  TensorD b = rng.normal_tensor<double>({6, 3});
  TensorD c = matmul(a, b);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 3; ++j) {
      double acc = 0;
      for (int64_t k = 0; k < 6; ++k) acc += a.at(i, k) * b.at(k, j);
      CHECK(c.at(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("conv2d matches direct summation") {
  Rng rng(11);
  TensorD x = rng.normal_tensor<double>({2, 3, 5, 6});
  TensorD w = rng.normal_tensor<double>({4, 3, 3, 3});
  int pad = 1;
  TensorD y = conv2d(x, w, pad);
  REQUIRE(y.shape() == Shape{2, 4, 5, 6});
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t o = 0; o < 4; ++o)
      for (int64_t yy = 0; yy < 5; ++yy)
        for (int64_t xx = 0; xx < 6; ++xx) {
          double acc = 0;
          for (int64_t c = 0; c < 3; ++c)
            for (int i = 0; i < 3; ++i)
              for (int j = 0; j < 3; ++j) {
                int64_t sy = yy + i - pad, sx = xx + j - pad;
                if (sy >= 0 && sy < 5 && sx >= 0 && sx < 6) acc += w.at(o, c, i, j) * x.at(n, c, sy, sx);
              }
          CHECK(y.at(n, o, yy, xx) == doctest::Approx(acc).epsilon(1e-10));
        }
}

TEST_CASE("1x1 conv reduces to per-pixel linear map") {
  Rng rng(12);
  TensorD x = rng.normal_tensor<double>({1, 3, 4, 4});
  TensorD w = rng.normal_tensor<double>({2, 3, 1, 1});
  TensorD y = conv2d(x, w, 0);
  for (int64_t o = 0; o < 2; ++o)
    for (int64_t p = 0; p < 16; ++p) {
      double acc = 0;
      for (int64_t c = 0; c < 3; ++c) acc += w[o * 3 + c] * x[c * 16 + p];
      CHECK(y[o * 16 + p] == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("conv2d transpose identity: <conv(x,w),y> == <x, conv(y, flip_swap(w))>") {
  Rng rng(13);
  TensorD x = rng.normal_tensor<double>({2, 3, 6, 6});
  TensorD w = rng.normal_tensor<double>({4, 3, 3, 3});
  TensorD y = rng.normal_tensor<double>({2, 4, 6, 6});
  double lhs = dot(conv2d(x, w, 1), y);
  double rhs = dot(x, conv2d(y, flip_swap(w), 1));
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("conv2d_wgrad is the gradient pairing: <wgrad(x,g), u> == <conv(x,u), g>") {
  Rng rng(14);
  TensorD x = rng.normal_tensor<double>({2, 3, 5, 5});
  TensorD g = rng.normal_tensor<double>({2, 4, 5, 5});
  TensorD u = rng.normal_tensor<double>({4, 3, 3, 3});
  double lhs = dot(conv2d_wgrad(x, g, 1, 3, 3), u);
  double rhs = dot(conv2d(x, u, 1), g);
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("flip_swap is an involution") {
  Rng rng(15);
  TensorD w = rng.normal_tensor<double>({4, 3, 3, 3});
  CHECK(max_abs_diff(flip_swap(flip_swap(w)), w) == 0.0);
}

TEST_CASE("avgpool2/upsample2 are adjoint up to the factor 4") {
  Rng rng(16);
  TensorD x = rng.normal_tensor<double>({1, 2, 4, 4});
  TensorD y = rng.normal_tensor<double>({1, 2, 8, 8});
  CHECK(dot(upsample2_nearest(x), y) == doctest::Approx(4.0 * dot(x, avgpool2(y))).epsilon(1e-12));
}

TEST_CASE("bilinear resize keeps corners and reproduces linear ramps exactly") {
  TensorD ramp({1, 1, 3, 3});
  for (int64_t y = 0; y < 3; ++y)
    for (int64_t x = 0; x < 3; ++x) ramp.at(0, 0, y, x) = 2.0 * y + 0.5 * x;
  TensorD up = resize_bilinear(ramp, 5, 5);
  // align-corners: corners map to corners
  CHECK(up.at(0, 0, 0, 0) == doctest::Approx(ramp.at(0, 0, 0, 0)));
  CHECK(up.at(0, 0, 4, 4) == doctest::Approx(ramp.at(0, 0, 2, 2)));
  // a plane stays a plane under bilinear interpolation
  for (int64_t y = 0; y < 5; ++y)
    for (int64_t x = 0; x < 5; ++x)
      CHECK(up.at(0, 0, y, x) == doctest::Approx(2.0 * (y * 0.5) + 0.5 * (x * 0.5)).epsilon(1e-12));
  // size-1 output samples the first entry
  TensorD one = resize_bilinear(ramp, 1, 1);
  CHECK(one[0] == doctest::Approx(ramp.at(0, 0, 0, 0)));
}

TEST_CASE("resize_bilinear and its adjoint satisfy the dot-product identity") {
  Rng rng(17);
  const std::array<std::array<int64_t, 4>, 3> cases = {{{4, 5, 9, 7}, {8, 8, 3, 3}, {2, 2, 2, 2}}};
  for (auto [hi, wi, ho, wo] : cases) {
    TensorD x = rng.normal_tensor<double>({2, 3, hi, wi});
    TensorD y = rng.normal_tensor<double>({2, 3, ho, wo});
    double lhs = dot(resize_bilinear(x, ho, wo), y);
    double rhs = dot(x, resize_bilinear_adjoint(y, hi, wi));
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
  }
}

TEST_CASE("narrow/embed round trip and zero padding") {
  Rng rng(18);
  TensorD x = rng.normal_tensor<double>({3, 5, 2});
  TensorD mid = narrow(x, 1, 1, 3);
  CHECK(mid.shape() == Shape{3, 3, 2});
  TensorD back = embed(mid, 1, 1, 5);
  CHECK(back.shape() == x.shape());
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 5; ++j)
      for (int64_t k = 0; k < 2; ++k) {
        if (j >= 1 && j < 4)
          CHECK(back.at(i, j, k) == x.at(i, j, k));
        else
          CHECK(back.at(i, j, k) == 0.0);
      }
}

TEST_CASE("rng streams are deterministic and derivation is order independent") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng base(7);
  Rng c1 = base.derive("alpha");
  (void)base.derive("beta");
  Rng base2(7);
  (void)base2.derive("gamma");
  Rng c2 = base2.derive("alpha");
  for (int i = 0; i < 10; ++i) CHECK(c1.next_u64() == c2.next_u64());

  // normals have roughly the right first two moments
  Rng n(123);
  double s = 0, s2 = 0;
  const int N = 20000;
  for (int i = 0; i < N; ++i) {
    double v = n.normal();
    s += v;
    s2 += v * v;
  }
  CHECK(std::abs(s / N) < 0.03);
  CHECK(std::abs(s2 / N - 1.0) < 0.05);
}
