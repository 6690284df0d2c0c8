#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "texbridge/imageio.hpp"
#include "texbridge/synthtex.hpp"

using namespace texbridge;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("texbridge_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

bool same_identity(const IdentityParams& a, const IdentityParams& b) {
  if (a.blobs.size() != b.blobs.size() || a.moles.size() != b.moles.size()) return false;
  if (a.base_color != b.base_color || a.freq_u != b.freq_u || a.freq_v != b.freq_v) return false;
  for (size_t i = 0; i < a.moles.size(); ++i)
    if (a.moles[i].cx != b.moles[i].cx || a.moles[i].contrast != b.moles[i].contrast) return false;
  return true;
}

}  // namespace

TEST_CASE("identity sampling is deterministic and in range") {
  for (uint64_t seed : {0ull, 1ull, 77ull, 123456789ull}) {
    IdentityParams a = make_identity(seed);
    IdentityParams b = make_identity(seed);
    CHECK(same_identity(a, b));
    CHECK(a.blobs.size() >= 2);
    CHECK(a.blobs.size() <= 4);
    CHECK(a.moles.size() >= 1);
    CHECK(a.moles.size() <= 6);
    for (const auto& m : a.moles) {
      CHECK(std::hypot(m.cx - 0.5, m.cy - 0.5) <= 0.32 + 1e-12);
      CHECK(m.radius_px_hr >= 1.0);
      CHECK(m.radius_px_hr <= 3.0);
      CHECK(m.contrast >= 0.35);
      CHECK(m.contrast <= 0.65);
    }
    for (int c = 0; c < 3; ++c) {
      CHECK(a.base_color[c] >= 0.55);
      CHECK(a.base_color[c] <= 0.95);
    }
  }
  CHECK_FALSE(same_identity(make_identity(0), make_identity(1)));
}

TEST_CASE("studio render: full mask, [0,1] range, deterministic") {
  IdentityParams id = make_identity(42);
  TextureSample a = render_texture(id, LightingCondition::studio(), 64);
  TextureSample b = render_texture(id, LightingCondition::studio(), 64);
  CHECK(a.image.shape() == Shape{3, 64, 64});
  CHECK(a.mask.size() == 64 * 64);
  for (uint8_t v : a.mask) CHECK(v == 1);
  for (int64_t i = 0; i < a.image.size(); ++i) {
    CHECK(a.image.data()[i] >= 0.0f);
    CHECK(a.image.data()[i] <= 1.0f);
    CHECK(a.image.data()[i] == b.image.data()[i]);
  }
}

TEST_CASE("neutral wild lighting reproduces the studio render") {
  IdentityParams id = make_identity(7);
  LightingCondition neutral;
  neutral.kind = LightingCondition::Kind::Wild;
  neutral.direction = {0.3, -0.2, 0.93};
  neutral.intensity = 1.0;
  neutral.color_cast = {1.0, 1.0, 1.0};
  neutral.shadow_strength = 0.0;
  TextureSample wild = render_texture(id, neutral, 128);
  TextureSample studio = render_texture(id, LightingCondition::studio(), 128);
  for (int64_t i = 0; i < wild.image.size(); ++i)
    CHECK(std::abs(wild.image.data()[i] - studio.image.data()[i]) <= 1e-6f);
  // but the capture mask still has wild holes
  size_t holes = 0;
  for (uint8_t v : wild.mask) holes += v == 0;
  CHECK(holes > 0);
}

TEST_CASE("wild/studio ratio equals the analytic shading field at native res") {
  IdentityParams id = make_identity(99);
  Rng rng(555);
  LightingCondition cond = LightingCondition::sample_wild(rng);
  TextureSample wild = render_texture(id, cond, kNativeHighRes);
  TextureSample studio = render_texture(id, LightingCondition::studio(), kNativeHighRes);
  int checked = 0;
  for (int y = 0; y < kNativeHighRes; y += 3)
    for (int x = 0; x < kNativeHighRes; x += 3) {
      double u = (x + 0.5) / kNativeHighRes, v = (y + 0.5) / kNativeHighRes;
      for (int c = 0; c < 3; ++c) {
        double s = studio.image.at(c, y, x);
        if (s < 0.05) continue;
        double ratio = wild.image.at(c, y, x) / s;
        CHECK(std::abs(ratio - shading_value(cond, u, v, c)) <= 1e-6);
        ++checked;
      }
    }
  CHECK(checked > 1000);
  // shading is a genuine attenuation: in (0, 1] everywhere
  for (int k = 0; k < 50; ++k) {
    double u = (k * 37 % 100) / 100.0, v = (k * 61 % 100) / 100.0;
    for (int c = 0; c < 3; ++c) {
      double s = shading_value(cond, u, v, c);
      CHECK(s > 0.0);
      CHECK(s <= 1.0);
    }
  }
  CHECK(shading_value(LightingCondition::studio(), 0.3, 0.8, 1) == 1.0);
}

TEST_CASE("wild mask holes stay in the border band and repeat deterministically") {
  IdentityParams id = make_identity(13);
  Rng rng(3);
  LightingCondition cond = LightingCondition::sample_wild(rng);
  TextureSample a = render_texture(id, cond, 64);
  TextureSample b = render_texture(id, cond, 64);
  CHECK(a.mask == b.mask);
  size_t holes = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      double d = std::hypot((x + 0.5) / 64 - 0.5, (y + 0.5) / 64 - 0.5);
      bool visible = a.mask[y * 64 + x] == 1;
      if (!visible) {
        ++holes;
        CHECK(d > 0.40);
        CHECK(d <= 0.47);
      }
      if (d > 0.44 && d <= 0.47) CHECK_FALSE(visible);  // never-seen ring
    }
  CHECK(holes > 0);
}

TEST_CASE("moles are detectable at high res and fade at very low res") {
  double sum_hi = 0, sum_lo = 0;
  int n_moles = 0, n_small = 0;
  for (uint64_t seed : {5ull, 6ull, 8ull, 9ull, 10ull, 11ull}) {
    IdentityParams id = make_identity(seed);
    TensorF hi = render_texture(id, LightingCondition::studio(), 128).image;
    TensorF lo = render_texture(id, LightingCondition::studio(), 16).image;
    CHECK(mole_recall(hi, id, 128, 0.2) == 1.0);
    for (const auto& m : id.moles) {
      double chi = measure_mole_contrast(hi, m, 128);
      double clo = measure_mole_contrast(lo, m, 16);
      sum_hi += chi;
      sum_lo += clo;
      ++n_moles;
      if (m.radius_px_hr <= 1.5) {
        CHECK(clo < chi);  // small marks cannot survive 8x downsampling
        ++n_small;
      }
    }
  }
  REQUIRE(n_moles >= 6);
  REQUIRE(n_small >= 1);
  CHECK(sum_lo < 0.5 * sum_hi);
}

TEST_CASE("expression renders share moles but move feature blobs") {
  IdentityParams id = make_identity(21);
  TextureSample neutral = render_texture(id, LightingCondition::studio(), 128);
  TextureSample expr = render_expression(id, LightingCondition::studio(), 128, 4);
  TextureSample expr_same = render_expression(id, LightingCondition::studio(), 128, 4);
  TextureSample expr_other = render_expression(id, LightingCondition::studio(), 128, 5);
  double d_neutral = 0, d_seed = 0, d_repeat = 0;
  for (int64_t i = 0; i < neutral.image.size(); ++i) {
    d_neutral += std::abs(expr.image.data()[i] - neutral.image.data()[i]);
    d_seed += std::abs(expr.image.data()[i] - expr_other.image.data()[i]);
    d_repeat += std::abs(expr.image.data()[i] - expr_same.image.data()[i]);
  }
  CHECK(d_repeat == 0.0);
  CHECK(d_neutral > 1.0);
  CHECK(d_seed > 1.0);
  // identity marks survive the expression change
  CHECK(mole_recall(expr.image, id, 128, 0.15) == 1.0);
}

TEST_CASE("ppm16 and pbm roundtrip") {
  fs::path dir = temp_dir("imageio");
  TensorF img({3, 5, 7});
  Rng rng(1);
  for (int64_t i = 0; i < img.size(); ++i)
    img.data()[i] = static_cast<float>(rng.uniform01());
  img.data()[0] = 0.0f;
  img.data()[1] = 1.0f;
  write_ppm16((dir / "a.ppm").string(), img);
  TensorF back = read_ppm16((dir / "a.ppm").string());
  REQUIRE(back.shape() == img.shape());
  for (int64_t i = 0; i < img.size(); ++i)
    CHECK(std::abs(back.data()[i] - img.data()[i]) <= 0.5f / 65535.0f + 1e-7f);
  // quantized values roundtrip bitwise on a second pass
  write_ppm16((dir / "b.ppm").string(), back);
  TensorF twice = read_ppm16((dir / "b.ppm").string());
  for (int64_t i = 0; i < img.size(); ++i) CHECK(twice.data()[i] == back.data()[i]);

  std::vector<uint8_t> mask(9 * 13);
  for (size_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform01() < 0.5 ? 0 : 1;
  write_pbm((dir / "m.pbm").string(), mask, 9, 13);
  int64_t h = 0, w = 0;
  std::vector<uint8_t> mback = read_pbm((dir / "m.pbm").string(), &h, &w);
  CHECK(h == 9);
  CHECK(w == 13);
  CHECK(mback == mask);
  fs::remove_all(dir);
}

TEST_CASE("dataset build: splits, files, manifest roundtrip, rebuild determinism") {
  DatasetConfig cfg;
  cfg.n_phone = 8;
  cfg.n_studio = 4;
  cfg.n_paired = 2;
  cfg.n_holdout_paired = 1;
  cfg.n_holdout_unpaired = 2;
  cfg.resolution_lr = 16;
  cfg.resolution_hr = 32;
  cfg.master_seed = 777;
  cfg.threads = 2;

  fs::path dir = temp_dir("dataset_a");
  DatasetManifest m = build_dataset(cfg, dir.string());

  CHECK(m.phone_ids.size() == 8);
  CHECK(m.studio_ids.size() == 4);
  CHECK(m.paired_ids.size() == 2);
  CHECK(m.holdout_paired_ids.size() == 1);
  CHECK(m.holdout_unpaired_ids.size() == 2);

  // paired ids live in both capture sets; holdouts are fresh identities
  std::set<int64_t> phone(m.phone_ids.begin(), m.phone_ids.end());
  std::set<int64_t> studio(m.studio_ids.begin(), m.studio_ids.end());
  for (int64_t id : m.paired_ids) {
    CHECK(phone.count(id) == 1);
    CHECK(studio.count(id) == 1);
  }
  for (int64_t id : m.holdout_paired_ids) {
    CHECK(phone.count(id) == 0);
    CHECK(studio.count(id) == 0);
    CHECK(m.is_holdout(id));
  }
  for (int64_t id : m.holdout_unpaired_ids) CHECK(m.is_holdout(id));
  CHECK_FALSE(m.is_holdout(m.phone_ids[0]));

  // every id has a reproducibility record with distinct seeds
  std::set<uint64_t> seeds;
  for (int64_t id : m.phone_ids) seeds.insert(m.record(id).seed);
  CHECK(seeds.size() == m.phone_ids.size());

  for (int64_t id : m.phone_ids) {
    CHECK(fs::exists(phone_lr_path(dir.string(), id)));
    CHECK(fs::exists(phone_mask_path(dir.string(), id, cfg.resolution_lr)));
  }
  for (int64_t id : m.studio_ids) {
    CHECK(fs::exists(studio_lr_path(dir.string(), id)));
    CHECK(fs::exists(studio_hr_path(dir.string(), id)));
  }
  for (int64_t id : m.paired_ids) CHECK(fs::exists(phone_hr_path(dir.string(), id)));
  for (int64_t id : m.holdout_paired_ids) {
    CHECK(fs::exists(phone_lr_path(dir.string(), id)));
    CHECK(fs::exists(phone_hr_path(dir.string(), id)));
    CHECK(fs::exists(studio_hr_path(dir.string(), id)));
  }
  for (int64_t id : m.holdout_unpaired_ids) {
    CHECK(fs::exists(phone_hr_path(dir.string(), id)));
    CHECK_FALSE(fs::exists(studio_hr_path(dir.string(), id)));
  }

  // a stored image re-renders from its manifest record
  int64_t probe = m.paired_ids[1];
  IdentityParams ip = make_identity(m.record(probe).seed);
  TensorF rerender = render_texture(ip, m.record(probe).wild, cfg.resolution_lr).image;
  TensorF stored = read_ppm16(phone_lr_path(dir.string(), probe));
  REQUIRE(stored.shape() == rerender.shape());
  for (int64_t i = 0; i < stored.size(); ++i)
    CHECK(std::abs(stored.data()[i] - rerender.data()[i]) <= 1e-4f);

  DatasetManifest loaded = load_manifest(dir.string() + "/manifest.json");
  CHECK(loaded.phone_ids == m.phone_ids);
  CHECK(loaded.studio_ids == m.studio_ids);
  CHECK(loaded.paired_ids == m.paired_ids);
  CHECK(loaded.config.master_seed == cfg.master_seed);
  CHECK(loaded.record(probe).seed == m.record(probe).seed);
  CHECK(loaded.record(probe).wild.shadow_strength == m.record(probe).wild.shadow_strength);

  // same config elsewhere (different thread count) -> byte-identical artifacts
  fs::path dir2 = temp_dir("dataset_b");
  cfg.threads = 1;
  build_dataset(cfg, dir2.string());
  CHECK(slurp(dir / "manifest.json") == slurp(dir2 / "manifest.json"));
  CHECK(slurp(phone_lr_path(dir.string(), probe)) == slurp(phone_lr_path(dir2.string(), probe)));
  CHECK(slurp(studio_hr_path(dir.string(), m.studio_ids[0])) ==
        slurp(studio_hr_path(dir2.string(), m.studio_ids[0])));

  fs::remove_all(dir);
  fs::remove_all(dir2);
}
