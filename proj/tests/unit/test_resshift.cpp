#include <cmath>
#include <map>
#include <numeric>

#include "doctest.h"
#include "texbridge/resshift.hpp"
#include "texbridge/synthtex.hpp"

using namespace texbridge;

namespace {

DiffusionSchedule default_sched(double kappa = 2.0) {
  return make_schedule(15, kappa, 0.0016, 0.9990);
}

Tensor<double> const_image(Shape shape, double v) { return Tensor<double>::full(shape, v); }

}  // namespace

TEST_CASE("schedule: left-fold identity, endpoints, geometry, errors") {
  DiffusionSchedule s = default_sched();
  REQUIRE(s.eta.size() == 16);
  REQUIRE(s.alpha.size() == 16);
  CHECK(s.eta[0] == 0.0);
  CHECK(s.eta[1] == 0.0016);

  // eta[t] is bitwise the running sum of alpha
  double acc = 0;
  for (int t = 1; t <= s.T; ++t) {
    CHECK(s.alpha[t] > 0);
    acc += s.alpha[t];
    CHECK(acc == s.eta[t]);
  }
  CHECK(std::abs(s.eta[15] - 0.9990) <= 1e-15);
  double tail = std::accumulate(s.alpha.begin() + 2, s.alpha.end(), 0.0);
  CHECK(std::abs(tail - 0.9974) <= 1e-9);

  // sqrt(eta) geometric: constant ratio across the whole range
  double r0 = std::sqrt(s.eta[2] / s.eta[1]);
  for (int t = 1; t + 1 <= s.T; ++t)
    CHECK(std::sqrt(s.eta[t + 1] / s.eta[t]) == doctest::Approx(r0).epsilon(1e-9));

  DiffusionSchedule b = make_schedule(2, 1.0, 0.25, 0.75);
  CHECK(b.eta == std::vector<double>{0.0, 0.25, 0.75});

  CHECK_THROWS_AS(make_schedule(1, 2.0, 0.1, 0.9), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(15, 2.0, 0.0, 0.9), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(15, 2.0, 0.1, 1.1), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(15, 2.0, 0.9, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(15, -1.0, 0.1, 0.9), std::invalid_argument);
}

TEST_CASE("schedule json roundtrip is bitwise") {
  DiffusionSchedule s = default_sched();
  DiffusionSchedule r = schedule_from_json(schedule_to_json(s));
  CHECK(r.T == s.T);
  CHECK(r.kappa == s.kappa);
  CHECK(r.eta == s.eta);
  CHECK(r.alpha == s.alpha);
  CHECK_THROWS_AS(schedule_from_json("{\"T\":3,\"kappa\":1.0,\"eta\":[0,1],\"alpha\":[0,1]}"),
                  MissingArtifactError);
}

TEST_CASE("reverse coefficients are convex and sum to one exactly") {
  DiffusionSchedule s = default_sched();
  for (int t = 1; t <= s.T; ++t) {
    auto [cp, c0] = reverse_coeffs(s, t);
    CHECK(cp + c0 == 1.0);
    CHECK(cp >= 0.0);
    CHECK(c0 >= 0.0);
  }
  auto [cp1, c01] = reverse_coeffs(s, 1);
  CHECK(c01 == 1.0);
  CHECK(cp1 == 0.0);
}

TEST_CASE("residual pair recomputes e0 and rejects mismatched shapes") {
  Rng rng(3);
  Tensor<double> hr = rng.uniform_tensor<double>({3, 6, 6}, 0, 1);
  Tensor<double> lr = rng.uniform_tensor<double>({3, 6, 6}, 0, 1);
  ResidualPair<double> p = make_residual_pair(hr, lr);
  for (int64_t i = 0; i < hr.size(); ++i)
    CHECK(std::abs(p.e0.data()[i] - (p.lr_on_hr_grid.data()[i] - p.hr.data()[i])) <= 1e-7);
  CHECK_THROWS_AS(make_residual_pair(hr, Tensor<double>({3, 5, 5})), std::invalid_argument);
}

TEST_CASE("forward step: zero-noise limit exact, monte-carlo mean within 3 se") {
  DiffusionSchedule s0 = default_sched(0.0);
  Rng rng(4);
  Tensor<double> x = rng.uniform_tensor<double>({3, 2, 2}, 0, 1);
  Tensor<double> e0 = rng.uniform_tensor<double>({3, 2, 2}, -0.5, 0.5);
  int t = 3;
  Tensor<double> xt = forward_step(x, e0, t, s0, rng);
  for (int64_t i = 0; i < x.size(); ++i)
    CHECK(xt.data()[i] == x.data()[i] + s0.alpha[t] * e0.data()[i]);

  DiffusionSchedule s = default_sched();
  const int n = 10000;
  Tensor<double> acc({3, 2, 2});
  Rng mc(5);
  for (int k = 0; k < n; ++k) {
    Tensor<double> d = forward_step(x, e0, t, s, mc);
    for (int64_t i = 0; i < d.size(); ++i) acc.data()[i] += d.data()[i];
  }
  double se = s.kappa * std::sqrt(s.alpha[t]) / std::sqrt(double(n));
  for (int64_t i = 0; i < acc.size(); ++i) {
    double emp = acc.data()[i] / n;
    double want = x.data()[i] + s.alpha[t] * e0.data()[i];
    CHECK(std::abs(emp - want) <= 3 * se);
  }

  CHECK_THROWS_AS(forward_step(x, e0, 0, s, rng), std::invalid_argument);
  CHECK_THROWS_AS(forward_step(x, e0, 16, s, rng), std::invalid_argument);
}

TEST_CASE("iterated chain matches the closed-form marginal within 1 percent") {
  DiffusionSchedule s = default_sched();
  Shape shp{3, 4, 4};
  Tensor<double> x0 = const_image(shp, 2.0);
  Tensor<double> e0 = const_image(shp, -0.5);
  const int n_chains = 10000;
  const int64_t px = shape_numel(shp);
  const std::vector<int> probes{7, 15};

  // pooled first/second moments of the chain state at each probe step
  std::map<int, std::pair<double, double>> chain_stats;
  Rng rng(6);
  for (int k = 0; k < n_chains; ++k) {
    Tensor<double> x = x0;
    for (int t = 1; t <= s.T; ++t) {
      x = forward_step(x, e0, t, s, rng);
      if (std::find(probes.begin(), probes.end(), t) != probes.end())
        for (int64_t i = 0; i < px; ++i) {
          chain_stats[t].first += x.data()[i];
          chain_stats[t].second += x.data()[i] * x.data()[i];
        }
    }
  }

  Rng mrng(7);
  for (int t : probes) {
    const double N = double(n_chains) * double(px);
    double mean_c = chain_stats[t].first / N;
    double var_c = chain_stats[t].second / N - mean_c * mean_c;
    double mean_exact = 2.0 + s.eta[t] * (-0.5);
    double var_exact = s.kappa * s.kappa * s.eta[t];
    INFO("t=", t);
    CHECK(std::abs(mean_c - mean_exact) <= 0.01 * std::abs(mean_exact));
    CHECK(std::abs(var_c - var_exact) <= 0.01 * var_exact);

    // and against the marginal sampler's own empirics
    double sm = 0, sq = 0;
    for (int k = 0; k < n_chains; ++k) {
      Tensor<double> x = forward_marginal(x0, e0, t, s, mrng);
      for (int64_t i = 0; i < px; ++i) {
        sm += x.data()[i];
        sq += x.data()[i] * x.data()[i];
      }
    }
    double mean_m = sm / N, var_m = sq / N - mean_m * mean_m;
    CHECK(std::abs(mean_c - mean_m) <= 0.01 * std::abs(mean_exact));
    CHECK(std::abs(var_c - var_m) <= 0.01 * var_exact);
  }

  // t=0 returns x0 without touching the rng
  Rng before(8), after(8);
  Tensor<double> same = forward_marginal(x0, e0, 0, s, before);
  for (int64_t i = 0; i < px; ++i) CHECK(same.data()[i] == x0.data()[i]);
  CHECK(before.next_u64() == after.next_u64());
}

TEST_CASE("reverse step: t=1 deterministic, oracle telescoping exact") {
  DiffusionSchedule s = default_sched();
  Rng rng(9);
  Tensor<double> xt = rng.uniform_tensor<double>({3, 4, 4}, -1, 3);
  Tensor<double> x0h = rng.uniform_tensor<double>({3, 4, 4}, 0, 1);
  Tensor<double> back = reverse_step(xt, x0h, 1, s, rng);
  for (int64_t i = 0; i < back.size(); ++i) CHECK(back.data()[i] == x0h.data()[i]);

  // zero-noise round trip: marginal to t=T, oracle x0 all the way home
  DiffusionSchedule s0 = default_sched(0.0);
  Tensor<double> x0 = rng.uniform_tensor<double>({3, 4, 4}, 0, 1);
  Tensor<double> e0 = rng.uniform_tensor<double>({3, 4, 4}, -0.5, 0.5);
  Tensor<double> x = forward_marginal(x0, e0, s0.T, s0, rng);
  for (int t = s0.T; t >= 1; --t) {
    x = reverse_step(x, x0, t, s0, rng);
    // intermediate states track x0 + eta_{t-1} * e0
    for (int64_t i = 0; i < x.size(); ++i)
      CHECK(x.data()[i] ==
            doctest::Approx(x0.data()[i] + s0.eta[t - 1] * e0.data()[i]).epsilon(1e-12));
  }
  for (int64_t i = 0; i < x.size(); ++i) CHECK(x.data()[i] == x0.data()[i]);
}

TEST_CASE("oracle denoiser round trip through the noisy sampler is exact") {
  DiffusionSchedule s = default_sched();  // kappa = 2: real noise in every step
  Rng rng(11);
  Tensor<float> x0 = rng.uniform_tensor<float>({3, 8, 8}, 0.1f, 0.9f);
  Tensor<float> e0 = rng.uniform_tensor<float>({3, 8, 8}, -0.4f, 0.4f);
  Tensor<float> y(x0.shape());
  for (int64_t i = 0; i < y.size(); ++i) y.data()[i] = x0.data()[i] + e0.data()[i];

  DenoiseFn<float> oracle = [&](const Tensor<float>&, const Tensor<float>&, int) { return x0; };
  Rng srng(12);
  Tensor<float> out = sample_loop(y, oracle, s, srng);
  float worst = 0;
  for (int64_t i = 0; i < out.size(); ++i)
    worst = std::max(worst, std::abs(out.data()[i] - x0.data()[i]));
  CHECK(worst <= 1e-5f);
}

TEST_CASE("gradient conditioning: null case, ramps, scale zero, mismatch") {
  Tensor<double> flat = Tensor<double>::full({3, 8, 8}, 0.4);
  Tensor<double> lr = Tensor<double>::full({3, 8, 8}, 0.7);
  for (GradOp op : {GradOp::sobel_mag, GradOp::central_diff_mag}) {
    Tensor<double> g = gradient_magnitude(flat, op);
    for (int64_t i = 0; i < g.size(); ++i) CHECK(g.data()[i] == 0.0);
    Tensor<double> cond = grad_condition(lr, flat, op, 0.5);
    for (int64_t i = 0; i < cond.size(); ++i) CHECK(cond.data()[i] == lr.data()[i]);
  }

  // vertical ramp of slope s: interior gradient magnitude is |s|
  double slope = 0.3;
  Tensor<double> ramp({3, 8, 8});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < 8; ++y)
      for (int64_t x = 0; x < 8; ++x) ramp.at(c, y, x) = slope * double(y);
  for (GradOp op : {GradOp::central_diff_mag, GradOp::sobel_mag}) {
    Tensor<double> g = gradient_magnitude(ramp, op);
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 1; y < 7; ++y)
        for (int64_t x = 1; x < 7; ++x)
          CHECK(g.at(c, y, x) == doctest::Approx(slope).epsilon(1e-12));
  }

  // oblique plane: magnitude is the euclidean norm of the two slopes
  Tensor<double> plane({1, 8, 8});
  for (int64_t y = 0; y < 8; ++y)
    for (int64_t x = 0; x < 8; ++x) plane.at(0, y, x) = 0.2 * double(x) - 0.15 * double(y);
  Tensor<double> gp = gradient_magnitude(plane, GradOp::central_diff_mag);
  for (int64_t y = 1; y < 7; ++y)
    for (int64_t x = 1; x < 7; ++x)
      CHECK(gp.at(0, y, x) == doctest::Approx(std::hypot(0.2, 0.15)).epsilon(1e-12));

  Tensor<double> scaled = grad_condition(lr, ramp, GradOp::sobel_mag, 0.0);
  for (int64_t i = 0; i < scaled.size(); ++i) CHECK(scaled.data()[i] == lr.data()[i]);
  CHECK_THROWS_AS(grad_condition(lr, Tensor<double>({3, 4, 4}), GradOp::sobel_mag, 0.5),
                  std::invalid_argument);

  CHECK(cond_mode_from_name("vanilla") == CondMode::vanilla);
  CHECK(cond_mode_from_name(cond_mode_name(CondMode::infer_only_cond)) ==
        CondMode::infer_only_cond);
  CHECK_THROWS_AS(cond_mode_from_name("nope"), ConfigError);
}

TEST_CASE("denoising objective matches central finite differences on parameter probes") {
  DenoiserConfig dcfg;
  dcfg.c0 = 8;
  dcfg.c1 = 12;
  dcfg.temb_dim = 8;
  Denoiser<double> net(dcfg, 17);
  DiffusionSchedule s = default_sched();
  Rng rng(18);
  Tensor<double> x0 = rng.uniform_tensor<double>({2, 3, 8, 8}, 0, 1);
  Tensor<double> cond = rng.uniform_tensor<double>({2, 3, 8, 8}, 0, 1);
  Tensor<double> x_t = rng.uniform_tensor<double>({2, 3, 8, 8}, -1, 2);
  std::vector<int> ts{3, 11};

  for (const char* pname : {"den.enc0.conv0.w", "den.enc1.temb.w", "den.out.w"}) {
    ad::Value<double> p = net.params.value(pname);
    ad::Value<double> loss = diffusion_loss(net, x0, cond, x_t, ts);
    Tensor<double> grad = ad::gradients(loss, {p}, false)[0]->data;
    Rng probe(19);
    for (int k = 0; k < 10; ++k) {
      int64_t idx = probe.uniform_int(p->data.size());
      double h = 1e-4, saved = p->data.data()[idx];
      ad::NoGradGuard ng;
      p->data.data()[idx] = saved + h;
      double lp = diffusion_loss(net, x0, cond, x_t, ts)->data.item();
      p->data.data()[idx] = saved - h;
      double lm = diffusion_loss(net, x0, cond, x_t, ts)->data.item();
      p->data.data()[idx] = saved;
      double fd = (lp - lm) / (2 * h), an = grad.data()[idx];
      INFO(std::string(pname), " probe ", k);
      CHECK(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}) <= 1e-4);
    }
  }
}

TEST_CASE("training overfits two tiny images and logs finite losses") {
  DenoiserConfig dcfg;
  dcfg.c0 = 12;
  dcfg.c1 = 16;
  dcfg.temb_dim = 16;
  Denoiser<float> net(dcfg, 21);
  DiffusionSchedule s = default_sched();

  std::vector<DiffusionExample<float>> data;
  for (int i = 0; i < 2; ++i) {
    DiffusionExample<float> ex;
    ex.hr = render_texture(make_identity(40 + i), LightingCondition::studio(), 32).image;
    Tensor<float> lr4 = resize_bilinear(ex.hr.reshaped({1, 3, 32, 32}), 8, 8);
    ex.lr_on_hr_grid = resize_bilinear(lr4, 32, 32).reshaped({3, 32, 32});
    ex.phone_hr = ex.hr;
    data.push_back(std::move(ex));
  }

  DiffusionTrainConfig cfg;
  cfg.steps = 1400;
  cfg.batch = 8;
  cfg.crop = 16;
  cfg.lr = 3e-3;
  cfg.seed = 23;
  std::vector<double> log = train_denoiser(net, data, s, cfg);
  REQUIRE(log.size() == 1400);
  for (double v : log) CHECK(std::isfinite(v));
  double tail = *std::min_element(log.end() - 50, log.end());
  INFO("best tail loss ", tail);
  CHECK(tail < 1e-3);
}

TEST_CASE("training is deterministic and sampling is seed-stable in every mode") {
  DenoiserConfig dcfg;
  dcfg.c0 = 8;
  dcfg.c1 = 8;
  dcfg.temb_dim = 8;
  DiffusionSchedule s = default_sched();
  Rng rng(31);
  std::vector<DiffusionExample<float>> data(1);
  data[0].hr = rng.uniform_tensor<float>({3, 24, 24}, 0, 1);
  data[0].lr_on_hr_grid = data[0].hr;
  data[0].phone_hr = rng.uniform_tensor<float>({3, 24, 24}, 0, 1);

  DiffusionTrainConfig cfg;
  cfg.steps = 5;
  cfg.batch = 2;
  cfg.crop = 12;
  cfg.seed = 32;
  Denoiser<float> a(dcfg, 33), b(dcfg, 33);
  std::vector<double> la = train_denoiser(a, data, s, cfg);
  std::vector<double> lb = train_denoiser(b, data, s, cfg);
  CHECK(la == lb);

  for (CondMode m :
       {CondMode::vanilla, CondMode::infer_only_cond, CondMode::train_and_infer_cond}) {
    SampleOptions<float> opt;
    opt.mode = m;
    opt.seed = 34;
    Tensor<float> o1 = sample(data[0].lr_on_hr_grid, data[0].phone_hr, a, s, opt);
    Tensor<float> o2 = sample(data[0].lr_on_hr_grid, data[0].phone_hr, a, s, opt);
    CHECK(o1.shape() == data[0].hr.shape());
    bool same = true, in01 = true;
    for (int64_t i = 0; i < o1.size(); ++i) {
      if (o1.data()[i] != o2.data()[i]) same = false;
      if (o1.data()[i] < 0 || o1.data()[i] > 1) in01 = false;
    }
    CHECK(same);
    CHECK(in01);
  }
}
