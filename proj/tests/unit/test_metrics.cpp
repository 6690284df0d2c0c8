#include <cmath>

#include "doctest.h"
#include "texbridge/errors.hpp"
#include "texbridge/metrics.hpp"
#include "texbridge/synthtex.hpp"

using namespace texbridge;

namespace {

// smooth low-frequency image with a controllable base level
TensorF smooth_pattern(int R, double base, uint64_t seed) {
  Rng rng(seed);
  double fx = 1.0 + rng.uniform_int(3), fy = 1.0 + rng.uniform_int(3);
  double ph = double(rng.uniform_int(628)) / 100.0;
  TensorF img({3, R, R});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < R; ++y)
      for (int64_t x = 0; x < R; ++x)
        img.at(c, y, x) = float(
            base + 0.15 * std::sin(2 * M_PI * (fx * x + fy * y) / R + ph + c));
  return img;
}

}  // namespace

TEST_CASE("psnr: cap, closed-form shift, monotone in noise, shape guard") {
  TensorF a = TensorF::full({3, 16, 16}, 0.3f);
  CHECK(psnr(a, a) == 99.0);

  TensorF b = TensorF::full({3, 16, 16}, 0.4f);
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-5));

  Rng rng(3);
  TensorF noise = rng.uniform_tensor<float>({3, 16, 16}, -1.0f, 1.0f);
  double prev = 1e9;
  for (double amp : {0.02, 0.05, 0.1, 0.2}) {
    TensorF noisy({3, 16, 16});
    for (int64_t i = 0; i < noisy.size(); ++i)
      noisy.data()[i] = a.data()[i] + float(amp) * noise.data()[i];
    double v = psnr(a, noisy);
    CHECK(v < prev);
    prev = v;
  }

  CHECK_THROWS_AS(psnr(a, TensorF::full({3, 8, 8}, 0.f)), std::invalid_argument);
}

TEST_CASE("ssim: exact 1 at equality, inverse binary image, shift invariance") {
  Rng rng(5);
  TensorF a = rng.uniform_tensor<float>({3, 24, 24}, 0.2f, 0.6f);
  CHECK(ssim(a, a) == 1.0);

  TensorF bin({1, 16, 16}), inv({1, 16, 16});
  for (int64_t y = 0; y < 16; ++y)
    for (int64_t x = 0; x < 16; ++x) {
      float v = float((x + y) % 2);
      bin.at(0, y, x) = v;
      inv.at(0, y, x) = 1.0f - v;
    }
  CHECK(ssim(bin, inv) < 0.5);

  TensorF b = a;
  Rng rng2(7);
  TensorF jit = rng2.uniform_tensor<float>({3, 24, 24}, -0.02f, 0.02f);
  for (int64_t i = 0; i < b.size(); ++i) b.data()[i] += jit.data()[i];
  TensorF a_up = a, b_up = b;
  for (int64_t i = 0; i < a.size(); ++i) {
    a_up.data()[i] += 0.3f;
    b_up.data()[i] += 0.3f;
  }
  CHECK(std::abs(ssim(a, b) - ssim(a_up, b_up)) <= 1e-3);

  CHECK_THROWS_AS(ssim(a, bin), std::invalid_argument);
}

TEST_CASE("faceid distance: zero at equality, bounded, identity-sensitive") {
  IdentityEmbedder<float> emb(8, 99);
  TensorF a = render_texture(make_identity(1), LightingCondition::studio(), 32).image;
  CHECK(faceid_distance(a, a, emb) == 0.0);

  Rng rng(9);
  TensorF r1 = rng.uniform_tensor<float>({3, 32, 32}, 0, 1);
  TensorF r2 = rng.uniform_tensor<float>({3, 32, 32}, 0, 1);
  double d = faceid_distance(r1, r2, emb);
  CHECK(d >= 0.0);
  CHECK(d <= 4.0);

  // nearby renders of one face sit closer than different faces, on average
  std::vector<TensorF> faces, jittered;
  for (uint64_t s = 1; s <= 4; ++s) {
    IdentityParams id = make_identity(s);
    faces.push_back(render_texture(id, LightingCondition::studio(), 32).image);
    jittered.push_back(
        render_expression(id, LightingCondition::studio(), 32, 50 + s).image);
  }
  double same = 0, cross = 0;
  int n_cross = 0;
  for (size_t i = 0; i < faces.size(); ++i) {
    same += faceid_distance(faces[i], jittered[i], emb);
    for (size_t j = 0; j < faces.size(); ++j)
      if (i != j) {
        cross += faceid_distance(faces[i], faces[j], emb);
        ++n_cross;
      }
  }
  CHECK(same / 4.0 < cross / n_cross);
}

TEST_CASE("perceptual distances: zero at equality, positive apart") {
  FeatureExtractor<float> fx;
  TensorF a = smooth_pattern(24, 0.4, 11);
  TensorF b = smooth_pattern(24, 0.6, 13);
  CHECK(percp_distance(a, a, fx) == 0.0);
  CHECK(dists_proxy(a, a, fx) == 0.0);
  CHECK(percp_distance(a, b, fx) > 0.0);
  CHECK(dists_proxy(a, b, fx) > 0.0);
}

TEST_CASE("kid: zero on identical sets, positive apart, split-stable") {
  FeatureExtractor<float> fx;

  std::vector<TensorF> set;
  for (int i = 0; i < 5; ++i) set.push_back(smooth_pattern(16, 0.5, 100 + i));
  CHECK(std::abs(kid(set, set, fx)) <= 1e-6);

  std::vector<TensorF> zeros(3, TensorF({3, 16, 16}));
  std::vector<TensorF> ones(3, TensorF::full({3, 16, 16}, 1.0f));
  CHECK(kid(zeros, ones, fx) > 0.0);

  std::vector<TensorF> xa, xb;
  for (int i = 0; i < 200; ++i) {
    xa.push_back(smooth_pattern(16, 0.3, 1000 + i));
    xb.push_back(smooth_pattern(16, 0.7, 2000 + i));
  }
  auto half = [](const std::vector<TensorF>& v, bool second) {
    return std::vector<TensorF>(v.begin() + (second ? 100 : 0),
                                v.begin() + (second ? 200 : 100));
  };
  double k1 = kid(half(xa, false), half(xb, false), fx);
  double k2 = kid(half(xa, true), half(xb, true), fx);
  CHECK(k1 > 0.0);
  CHECK(std::abs(k1 - k2) <= 0.1 * std::max(k1, k2));

  std::vector<TensorF> tiny(1, set[0]);
  CHECK_THROWS_AS(kid(tiny, set, fx), std::invalid_argument);
}

TEST_CASE("paired evaluation: identity and ground-truth methods, contamination") {
  FeatureExtractor<float> fx;
  DatasetSplit split;
  split.train_ids = {1, 2, 3};
  split.holdout_paired_ids = {10, 11};
  split.holdout_unpaired_ids = {20, 21, 22};

  std::vector<IdImage> phones, gt;
  Rng wr(77);
  LightingCondition wild = LightingCondition::sample_wild(wr);
  for (uint64_t id : split.holdout_paired_ids) {
    IdentityParams p = make_identity(id);
    phones.push_back({id, render_texture(p, wild, 32).image});
    gt.push_back({id, render_texture(p, LightingCondition::studio(), 32).image});
  }

  PairedEvalReport base = evaluate_paired(phones, gt, split, fx);
  REQUIRE(base.rows.size() == 2);
  CHECK(base.rows[0].id == 10);
  CHECK(base.rows[1].id == 11);
  CHECK(base.mean_psnr ==
        doctest::Approx((base.rows[0].psnr + base.rows[1].psnr) / 2).epsilon(1e-12));
  for (const auto& r : base.rows) {
    CHECK(std::isfinite(r.psnr));
    CHECK(std::isfinite(r.ssim));
    CHECK(r.percp > 0.0);
  }

  PairedEvalReport oracle = evaluate_paired(gt, gt, split, fx);
  for (const auto& r : oracle.rows) {
    CHECK(r.psnr == 99.0);
    CHECK(r.ssim == 1.0);
    CHECK(r.percp == 0.0);
  }

  std::vector<IdImage> dirty = phones;
  dirty.push_back({2, phones[0].second});
  CHECK_THROWS_AS(evaluate_paired(dirty, gt, split, fx), ConfigError);
  std::vector<IdImage> stranger = {{999, phones[0].second}};
  CHECK_THROWS_AS(evaluate_paired(stranger, gt, split, fx), ConfigError);
  std::vector<IdImage> no_gt = {{10, phones[0].second}};
  CHECK_THROWS_AS(evaluate_paired(no_gt, {}, split, fx), std::invalid_argument);
}

TEST_CASE("unpaired evaluation: identity drift and set distance") {
  FeatureExtractor<float> fx;
  IdentityEmbedder<float> emb(8, 99);
  DatasetSplit split;
  split.train_ids = {1, 2, 3};
  split.holdout_paired_ids = {10, 11};
  split.holdout_unpaired_ids = {20, 21, 22};

  Rng wr(78);
  LightingCondition wild = LightingCondition::sample_wild(wr);
  std::vector<IdImage> phones, outputs;
  for (uint64_t id : split.holdout_unpaired_ids) {
    TensorF img = render_texture(make_identity(id), wild, 32).image;
    phones.push_back({id, img});
    outputs.push_back({id, img});
  }
  std::vector<TensorF> studio;
  for (uint64_t s : {40, 41, 42})
    studio.push_back(
        render_texture(make_identity(s), LightingCondition::studio(), 32).image);

  UnpairedEvalReport rep = evaluate_unpaired(outputs, phones, studio, split, emb, fx);
  REQUIRE(rep.rows.size() == 3);
  for (const auto& r : rep.rows) CHECK(r.faceid == 0.0);
  CHECK(rep.mean_faceid == 0.0);
  CHECK(std::isfinite(rep.kid_vs_studio));

  std::vector<IdImage> dirty = outputs;
  dirty[0].first = 3;
  CHECK_THROWS_AS(evaluate_unpaired(dirty, phones, studio, split, emb, fx),
                  ConfigError);
}

TEST_CASE("reports: stable bytes, headers, parseable aggregate") {
  FeatureExtractor<float> fx;
  DatasetSplit split;
  split.train_ids = {};
  split.holdout_paired_ids = {5, 6};

  std::vector<IdImage> out, gt;
  for (uint64_t id : {5, 6}) {
    out.push_back({id, smooth_pattern(16, 0.4, id)});
    gt.push_back({id, smooth_pattern(16, 0.5, id + 100)});
  }
  PairedEvalReport r1 = evaluate_paired(out, gt, split, fx);
  r1.method = "identity";
  PairedEvalReport r2 = evaluate_paired(out, gt, split, fx);
  r2.method = "identity";

  CHECK(paired_report_csv(r1) == paired_report_csv(r2));
  CHECK(paired_report_json(r1) == paired_report_json(r2));
  CHECK(paired_report_markdown(r1) == paired_report_markdown(r2));

  std::string csv = paired_report_csv(r1);
  CHECK(csv.rfind("id,psnr,ssim,percp (LPIPS-proxy),dists_proxy\n", 0) == 0);
  CHECK(csv.find("\n# ") != std::string::npos);
  std::string md = paired_report_markdown(r1);
  CHECK(md.find("percp (LPIPS-proxy)") != std::string::npos);
  CHECK(md.find("identity") != std::string::npos);
  std::string js = paired_report_json(r1);
  CHECK(js.find("\"aggregate\"") != std::string::npos);
}

TEST_CASE("dataset split json round trip and validation") {
  DatasetSplit s;
  s.train_ids = {1, 2, 3, 4};
  s.holdout_paired_ids = {9, 10};
  s.holdout_unpaired_ids = {20};
  DatasetSplit back = split_from_json(split_to_json(s));
  CHECK(back.train_ids == s.train_ids);
  CHECK(back.holdout_paired_ids == s.holdout_paired_ids);
  CHECK(back.holdout_unpaired_ids == s.holdout_unpaired_ids);
  CHECK_THROWS_AS(split_from_json("{\"nope\": 1}"), MissingArtifactError);
  CHECK_THROWS_AS(split_from_json("not json"), MissingArtifactError);
}
