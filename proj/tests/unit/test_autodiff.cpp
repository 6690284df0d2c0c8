#include "doctest.h"

#include <cmath>
#include <functional>
#include <vector>

#include "texbridge/autodiff.hpp"
#include "texbridge/rng.hpp"

using namespace texbridge;
using ad::Value;

namespace {

using LossFn = std::function<Value<double>(const std::vector<Value<double>>&)>;

// Central-difference check of every coordinate of every parameter.
void fd_check(const LossFn& loss_fn, std::vector<TensorD> params, double h = 1e-5,
              double tol = 2e-6) {
  std::vector<Value<double>> leaves;
  for (auto& p : params) leaves.push_back(ad::leaf(p));
  Value<double> loss = loss_fn(leaves);
  REQUIRE(loss->data.size() == 1);
  auto grads = ad::gradients(loss, leaves);

  auto eval = [&](size_t pi, int64_t i, double delta) {
    std::vector<Value<double>> ls;
    for (size_t q = 0; q < params.size(); ++q) {
      TensorD t = params[q];
      if (q == pi) t[i] += delta;
      ls.push_back(ad::constant(std::move(t)));
    }
    ad::NoGradGuard ng;
    return loss_fn(ls)->data.item();
  };

  for (size_t pi = 0; pi < params.size(); ++pi) {
    for (int64_t i = 0; i < params[pi].size(); ++i) {
      double fd = (eval(pi, i, h) - eval(pi, i, -h)) / (2 * h);
      double an = grads[pi]->data[i];
      double denom = std::max({1.0, std::abs(fd), std::abs(an)});
      INFO("param ", pi, " coord ", i, " fd=", fd, " an=", an);
      CHECK(std::abs(fd - an) / denom < tol);
    }
  }
}

}  // namespace

TEST_CASE("first-order gradients match finite differences: elementwise ops") {
  Rng rng(100);

  fd_check([](const std::vector<Value<double>>& v) { return ad::sum_all(ad::mul(v[0], v[1])); },
           {rng.normal_tensor<double>({3, 4}), rng.normal_tensor<double>({3, 4})});

  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::div(v[0], ad::affine(ad::sigmoid(v[1]), 1.0, 0.5)));
      },
      {rng.normal_tensor<double>({2, 5}), rng.normal_tensor<double>({2, 5})});

  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::exp(ad::scale(v[0], 0.3)));
      },
      {rng.normal_tensor<double>({7})});

  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::log(ad::affine(ad::square(v[0]), 1.0, 0.7)));
      },
      {rng.normal_tensor<double>({6})});

  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::rsqrt_eps(ad::square(v[0]), 1e-2));
      },
      {rng.normal_tensor<double>({5})});

  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::sqrt_eps(ad::square(v[0]), 1e-2));
      },
      {rng.normal_tensor<double>({5})});

  // keep inputs away from the kink
  TensorD biased = rng.normal_tensor<double>({8});
  for (int64_t i = 0; i < biased.size(); ++i)
    biased[i] += biased[i] >= 0 ? 0.5 : -0.5;
  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::leaky_relu(v[0], 0.2));
      },
      {biased});
}

TEST_CASE("first-order gradients match finite differences: broadcasting") {
  Rng rng(101);
  // (N,C,H,W) * (1,C,1,1) + (N,C,1,1): the layouts style/bias paths use
  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::square(ad::add(ad::mul(v[0], v[1]), v[2])));
      },
      {rng.normal_tensor<double>({2, 3, 4, 4}), rng.normal_tensor<double>({1, 3, 1, 1}),
       rng.normal_tensor<double>({2, 3, 1, 1})});

  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::mean_all(ad::square(ad::sum_axes(v[0], {0, 2})));
      },
      {rng.normal_tensor<double>({2, 3, 4})});

  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::square(ad::broadcast_to(v[0], Shape{2, 3, 4})));
      },
      {rng.normal_tensor<double>({3, 1})});
}

TEST_CASE("first-order gradients match finite differences: linear algebra and slicing") {
  Rng rng(102);
  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::square(ad::matmul(v[0], v[1])));
      },
      {rng.normal_tensor<double>({3, 4}), rng.normal_tensor<double>({4, 2})});

  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::mul(ad::transpose2d(v[0]), v[1]));
      },
      {rng.normal_tensor<double>({3, 4}), rng.normal_tensor<double>({4, 3})});

  fd_check(
      [](const std::vector<Value<double>>& v) {
        auto mid = ad::narrow(v[0], 1, 1, 2);
        auto emb = ad::embed(mid, 0, 1, 4);
        return ad::sum_all(ad::square(emb));
      },
      {rng.normal_tensor<double>({2, 4})});

  fd_check(
      [](const std::vector<Value<double>>& v) {
        auto cat = ad::concat<double>({v[0], v[1]}, 1);
        return ad::mean_all(ad::square(cat));
      },
      {rng.normal_tensor<double>({2, 3}), rng.normal_tensor<double>({2, 2})});
}

TEST_CASE("first-order gradients match finite differences: conv and resampling") {
  Rng rng(103);
  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::square(ad::conv2d(v[0], v[1], 1)));
      },
      {rng.normal_tensor<double>({2, 2, 4, 4}), rng.normal_tensor<double>({3, 2, 3, 3})},
      1e-5, 5e-6);

  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::square(ad::conv2d(v[0], v[1], 0)));
      },
      {rng.normal_tensor<double>({1, 3, 3, 3}), rng.normal_tensor<double>({2, 3, 1, 1})});

  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::square(ad::conv2d_wgrad(v[0], v[1], 1, 3, 3)));
      },
      {rng.normal_tensor<double>({1, 2, 4, 4}), rng.normal_tensor<double>({1, 2, 4, 4})},
      1e-5, 5e-6);

  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::square(ad::avgpool2(v[0])));
      },
      {rng.normal_tensor<double>({1, 2, 4, 4})});

  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::square(ad::upsample2_nearest(v[0])));
      },
      {rng.normal_tensor<double>({1, 2, 3, 3})});

  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::square(ad::resize_bilinear(v[0], 7, 5)));
      },
      {rng.normal_tensor<double>({1, 2, 4, 4})});

  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::square(ad::resize_bilinear_adjoint(v[0], 3, 3)));
      },
      {rng.normal_tensor<double>({1, 2, 5, 5})});

  fd_check(
      [](const std::vector<Value<double>>& v) {
        return ad::sum_all(ad::square(ad::flip_swap(ad::mul(v[0], v[0]))));
      },
      {rng.normal_tensor<double>({2, 2, 3, 3})});
}

TEST_CASE("value reuse accumulates gradients; detach and constants stop them") {
  TensorD x0({3}, {1.0, 2.0, 3.0});
  auto x = ad::leaf(x0);
  auto y = ad::add(ad::mul(x, x), x);  // x^2 + x -> grad 2x + 1
  auto g = ad::gradients(ad::sum_all(y), {x})[0];
  for (int64_t i = 0; i < 3; ++i) CHECK(g->data[i] == doctest::Approx(2 * x0[i] + 1));

  auto xd = ad::leaf(x0);
  auto z = ad::mul(ad::detach(xd), xd);  // d/dx (c*x) = c
  auto gd = ad::gradients(ad::sum_all(z), {xd})[0];
  for (int64_t i = 0; i < 3; ++i) CHECK(gd->data[i] == doctest::Approx(x0[i]));

  // unreachable leaf gets zeros
  auto other = ad::leaf(x0);
  auto gz = ad::gradients(ad::sum_all(z), {other})[0];
  for (int64_t i = 0; i < 3; ++i) CHECK(gz->data[i] == 0.0);
}

TEST_CASE("second derivatives: cubic has exact hessian action") {
  TensorD x0({4}, {0.5, -1.0, 2.0, 1.5});
  auto x = ad::leaf(x0);
  auto loss = ad::sum_all(ad::mul(ad::mul(x, x), x));          // sum x^3
  auto g = ad::gradients(loss, {x})[0];                        // 3x^2
  for (int64_t i = 0; i < 4; ++i) CHECK(g->data[i] == doctest::Approx(3 * x0[i] * x0[i]));
  auto s = ad::sum_all(ad::square(g));                         // sum 9x^4
  auto h = ad::gradients(s, {x})[0];                           // 36x^3
  for (int64_t i = 0; i < 4; ++i)
    CHECK(h->data[i] == doctest::Approx(36 * x0[i] * x0[i] * x0[i]).epsilon(1e-12));
}

TEST_CASE("second derivatives: gradient-norm objective vs finite differences") {
  Rng rng(104);
  TensorD x0 = rng.normal_tensor<double>({1, 2, 4, 4});
  TensorD w0 = rng.normal_tensor<double>({1, 2, 3, 3}, 0.5);

  // s(x, w) = || d/dx sum(sigmoid(conv(x, w))^2) ||^2, the gradient-penalty shape
  auto s_of = [](const Value<double>& x, const Value<double>& w) {
    auto L = ad::sum_all(ad::square(ad::sigmoid(ad::conv2d(x, w, 1))));
    auto gx = ad::gradients(L, {x})[0];
    return ad::sum_all(ad::square(gx));
  };

  auto x = ad::leaf(x0);
  auto w = ad::leaf(w0);
  auto s = s_of(x, w);
  auto gs = ad::gradients(s, {x, w});

  auto eval = [&](const TensorD& xt, const TensorD& wt) {
    auto xv = ad::leaf(xt);
    auto wv = ad::leaf(wt);
    return s_of(xv, wv)->data.item();
  };

  const double h = 1e-5;
  for (int64_t i = 0; i < x0.size(); i += 7) {  // probe a spread of coordinates
    TensorD xp = x0, xm = x0;
    xp[i] += h;
    xm[i] -= h;
    double fd = (eval(xp, w0) - eval(xm, w0)) / (2 * h);
    double an = gs[0]->data[i];
    CHECK(std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)}) < 5e-6);
  }
  for (int64_t i = 0; i < w0.size(); i += 3) {
    TensorD wp = w0, wm = w0;
    wp[i] += h;
    wm[i] -= h;
    double fd = (eval(x0, wp) - eval(x0, wm)) / (2 * h);
    double an = gs[1]->data[i];
    CHECK(std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)}) < 5e-6);
  }
}

TEST_CASE("second derivatives: linear scorer makes the penalty independent of its input") {
  // score(x) = <w, x>; || d score/d x ||^2 = ||w||^2, so d/dw = 2w and d/dx = 0
  Rng rng(105);
  TensorD x0 = rng.normal_tensor<double>({6});
  TensorD w0 = rng.normal_tensor<double>({6});
  auto x = ad::leaf(x0);
  auto w = ad::leaf(w0);
  auto score = ad::sum_all(ad::mul(w, x));
  auto gx = ad::gradients(score, {x})[0];
  auto pen = ad::sum_all(ad::square(gx));
  CHECK(pen->data.item() == doctest::Approx(texbridge::sum_all(mul(w0, w0))));
  auto gp = ad::gradients(pen, {w, x});
  for (int64_t i = 0; i < 6; ++i) {
    CHECK(gp[0]->data[i] == doctest::Approx(2 * w0[i]));
    CHECK(gp[1]->data[i] == 0.0);
  }
}

TEST_CASE("gradients with build_graph=false are plain constants") {
  TensorD x0({2}, {1.0, 2.0});
  auto x = ad::leaf(x0);
  auto loss = ad::sum_all(ad::square(x));
  auto g = ad::gradients(loss, {x}, false)[0];
  CHECK_FALSE(g->requires_grad);
  CHECK(g->data[0] == doctest::Approx(2.0));
  CHECK(g->data[1] == doctest::Approx(4.0));
}

TEST_CASE("float instantiation works end to end") {
  Rng rng(106);
  TensorF x0 = rng.normal_tensor<float>({2, 3});
  auto x = ad::leaf(x0);
  auto loss = ad::mean_all(ad::square(ad::sigmoid(x)));
  auto g = ad::gradients(loss, {x}, false)[0];
  CHECK(g->data.shape() == x0.shape());
  CHECK(g->data.all_finite());
}
