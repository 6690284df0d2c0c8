#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "texbridge/rng.hpp"
#include "texbridge/tensor.hpp"

namespace texbridge {

// Procedural texture world. Identity content (base field + blobs + moles) is a
// pure function of the identity seed; lighting multiplies onto content so the
// studio render is exactly the wild render with lighting removed.

struct IdentityParams {
  int64_t identity_id = 0;
  uint64_t seed = 0;
  std::array<double, 3> base_color{};
  struct Blob {
    double cx, cy, radius;
    std::array<double, 3> color;  // additive, may be negative
  };
  std::vector<Blob> blobs;
  struct Mole {
    double cx, cy;        // uv in the face disk
    double radius_px_hr;  // pixels at the native high resolution
    double contrast;      // multiplicative dip in (0,1)
  };
  std::vector<Mole> moles;
  // smooth base-field parameters
  double freq_u = 1, freq_v = 1;
  std::array<double, 3> phase{};
};

struct LightingCondition {
  enum class Kind { Studio, Wild };
  Kind kind = Kind::Studio;
  std::array<double, 3> direction{0, 0, 1};
  double intensity = 1.0;
  std::array<double, 3> color_cast{1, 1, 1};
  double shadow_strength = 0.0;

  static LightingCondition studio() { return LightingCondition{}; }
  static LightingCondition sample_wild(Rng& rng);
};

struct TextureSample {
  int64_t identity_id = 0;
  LightingCondition condition;
  TensorF image;               // (3, R, R) in [0,1]
  std::vector<uint8_t> mask;   // R*R, 1 = visible
  int resolution = 0;
};

// native high resolution the detail band (moles) is defined at; lower
// resolutions are box-downsampled renders of this grid
inline constexpr int kNativeHighRes = 128;

IdentityParams make_identity(uint64_t seed);

// shading multiplier at (u,v) for one channel:
// intensity * (1 - shadow_strength*S(u,v)) * cast[channel], identically 1 for studio
double shading_value(const LightingCondition& cond, double u, double v, int channel);

TextureSample render_texture(const IdentityParams& id, const LightingCondition& cond,
                             int resolution);

// same identity/lighting with expression-jittered feature blobs (moles kept)
TextureSample render_expression(const IdentityParams& id, const LightingCondition& cond,
                                int resolution, uint64_t expr_seed);

// measured relative dip of a mole footprint against its local background ring
double measure_mole_contrast(const TensorF& img, const IdentityParams::Mole& mole, int resolution);

// fraction of ground-truth moles whose measured contrast exceeds min_contrast
double mole_recall(const TensorF& img, const IdentityParams& id, int resolution,
                   double min_contrast = 0.1);

struct DatasetConfig {
  int n_phone = 600;
  int n_studio = 40;   // paired ids are a subset of these
  int n_paired = 12;
  int n_holdout_paired = 4;
  int n_holdout_unpaired = 20;
  int resolution_lr = 64;
  int resolution_hr = 128;
  uint64_t master_seed = 1234;
  int threads = 0;
};

struct DatasetManifest {
  DatasetConfig config;
  std::vector<int64_t> phone_ids;
  std::vector<int64_t> studio_ids;
  std::vector<int64_t> paired_ids;
  std::vector<int64_t> holdout_paired_ids;
  std::vector<int64_t> holdout_unpaired_ids;
  // per-id reproducibility data
  struct IdRecord {
    uint64_t seed;
    LightingCondition wild;
  };
  std::vector<std::pair<int64_t, IdRecord>> records;

  const IdRecord& record(int64_t id) const;
  bool is_holdout(int64_t id) const;
};

// renders and persists the whole world under data_dir; pure function of config
DatasetManifest build_dataset(const DatasetConfig& cfg, const std::string& data_dir);

void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

// file layout helpers
std::string phone_lr_path(const std::string& dir, int64_t id);
std::string phone_hr_path(const std::string& dir, int64_t id);
std::string phone_mask_path(const std::string& dir, int64_t id, int res);
std::string studio_lr_path(const std::string& dir, int64_t id);
std::string studio_hr_path(const std::string& dir, int64_t id);

}  // namespace texbridge
