#include "texbridge/synthtex.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "texbridge/imageio.hpp"
#include "texbridge/parallel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace texbridge {

namespace {

constexpr double kFaceRadius = 0.42;   // dome / feature placement boundary
constexpr double kBandInner = 0.40;    // wild-mask hole band
constexpr double kBandOuter = 0.47;
constexpr double kAlwaysHidden = 0.44; // ears/back-of-head stand-in: never visible in wild

double dist_center(double u, double v) {
  return std::sqrt((u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5));
}

// content before lighting, all three channels at once
void content_rgb(const IdentityParams& id, double u, double v, double out[3]) {
  double blob_add[3] = {0, 0, 0};
  for (const auto& b : id.blobs) {
    double d2 = (u - b.cx) * (u - b.cx) + (v - b.cy) * (v - b.cy);
    double sigma = b.radius * 0.5;
    double f = std::exp(-d2 / (2 * sigma * sigma));
    for (int c = 0; c < 3; ++c) blob_add[c] += b.color[c] * f;
  }
  double mole_factor = 1.0;
  for (const auto& m : id.moles) {
    double r = m.radius_px_hr / double(kNativeHighRes);
    double d = std::sqrt((u - m.cx) * (u - m.cx) + (v - m.cy) * (v - m.cy));
    if (d >= 1.6 * r) continue;
    double fall = d <= r ? 1.0 : 0.5 * (1.0 + std::cos(M_PI * (d - r) / (0.6 * r)));
    mole_factor *= 1.0 - m.contrast * fall;
  }
  for (int c = 0; c < 3; ++c) {
    double base = id.base_color[c] *
                  (0.8 + 0.2 * std::cos(2 * M_PI * (id.freq_u * u + id.freq_v * v + id.phase[c])));
    double val = std::clamp(base + blob_add[c], 0.08, 1.0);
    out[c] = val * mole_factor;
  }
}

// mask-hole arcs are a fixed property of the identity's capture
struct MaskArcs {
  std::vector<std::pair<double, double>> arcs;  // [theta_lo, theta_hi]
  explicit MaskArcs(uint64_t id_seed) {
    Rng rng = Rng(id_seed).derive("mask_arcs");
    int n = 2 + static_cast<int>(rng.uniform_int(3));
    for (int i = 0; i < n; ++i) {
      double lo = rng.uniform(0, 2 * M_PI);
      double len = rng.uniform(0.4, 1.2);
      arcs.emplace_back(lo, lo + len);
    }
  }
  bool hit(double theta) const {
    for (auto [lo, hi] : arcs) {
      double t = theta;
      if (t < lo) t += 2 * M_PI;
      if (t <= hi) return true;
    }
    return false;
  }
};

std::vector<uint8_t> wild_mask(const IdentityParams& id, int res) {
  MaskArcs arcs(id.seed);
  std::vector<uint8_t> mask(static_cast<size_t>(res) * res, 1);
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      double u = (x + 0.5) / res, v = (y + 0.5) / res;
      double d = dist_center(u, v);
      if (d <= kBandInner || d > kBandOuter) continue;  // holes live in the band only
      bool hidden = d > kAlwaysHidden;
      if (!hidden) hidden = arcs.hit(std::atan2(v - 0.5, u - 0.5) + M_PI);
      if (hidden) mask[static_cast<size_t>(y) * res + x] = 0;
    }
  return mask;
}

TensorF render_grid(const IdentityParams& id, const LightingCondition& cond, int res) {
  TensorF img({3, res, res});
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      double u = (x + 0.5) / res, v = (y + 0.5) / res;
      double rgb[3];
      content_rgb(id, u, v, rgb);
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(rgb[c] * shading_value(cond, u, v, c));
    }
  return img;
}

TensorF downsample_half(const TensorF& img) {
  TensorF x = img.reshaped({1, 3, img.dim(1), img.dim(2)});
  return avgpool2(x).reshaped({3, img.dim(1) / 2, img.dim(2) / 2});
}

IdentityParams jitter_expression(const IdentityParams& id, uint64_t expr_seed) {
  Rng rng = Rng(id.seed ^ (expr_seed * 0x9e3779b97f4a7c15ULL + 0xabcdULL)).derive("expression");
  IdentityParams out = id;
  for (auto& b : out.blobs) {
    b.cx = std::clamp(b.cx + rng.normal() * 0.02, 0.5 - 0.32, 0.5 + 0.32);
    b.cy = std::clamp(b.cy + rng.normal() * 0.02, 0.5 - 0.32, 0.5 + 0.32);
    b.radius = std::clamp(b.radius * std::exp(rng.normal() * 0.08), 0.05, 0.3);
    for (int c = 0; c < 3; ++c) b.color[c] += rng.normal() * 0.02;
  }
  return out;
}

}  // namespace

LightingCondition LightingCondition::sample_wild(Rng& rng) {
  LightingCondition c;
  c.kind = Kind::Wild;
  double dx = rng.uniform(-0.6, 0.6), dy = rng.uniform(-0.6, 0.6), dz = rng.uniform(0.5, 1.0);
  double n = std::sqrt(dx * dx + dy * dy + dz * dz);
  c.direction = {dx / n, dy / n, dz / n};
  c.intensity = rng.uniform(0.7, 1.0);
  for (int i = 0; i < 3; ++i) c.color_cast[i] = rng.uniform(0.75, 1.0);
  c.shadow_strength = rng.uniform(0.15, 0.6);
  return c;
}

double shading_value(const LightingCondition& cond, double u, double v, int channel) {
  if (cond.kind == LightingCondition::Kind::Studio) return 1.0;
  // dome normal over the face disk, flat outside
  double pu = (u - 0.5) / kFaceRadius, pv = (v - 0.5) / kFaceRadius;
  double p2 = pu * pu + pv * pv;
  double nx = 0, ny = 0, nz = 1;
  if (p2 < 1.0) {
    nx = pu;
    ny = pv;
    nz = std::sqrt(1.0 - p2);
  }
  double ndl = nx * cond.direction[0] + ny * cond.direction[1] + nz * cond.direction[2];
  double geom = 1.0 - std::max(0.0, ndl);
  double pat = 0.5 * (1.0 + std::sin(2 * M_PI * (1.3 * u + 0.9 * v + 0.25)));
  double shadow_field = 0.6 * geom + 0.4 * pat;
  return cond.intensity * (1.0 - cond.shadow_strength * shadow_field) * cond.color_cast[channel];
}

IdentityParams make_identity(uint64_t seed) {
  Rng rng = Rng(seed).derive("identity");
  IdentityParams id;
  id.identity_id = static_cast<int64_t>(seed);
  id.seed = seed;
  for (int c = 0; c < 3; ++c) id.base_color[c] = rng.uniform(0.55, 0.95);
  id.freq_u = rng.uniform(0.7, 2.3);
  id.freq_v = rng.uniform(0.7, 2.3);
  for (int c = 0; c < 3; ++c) id.phase[c] = rng.uniform(0, 1);

  int n_blobs = 2 + static_cast<int>(rng.uniform_int(3));
  for (int i = 0; i < n_blobs; ++i) {
    double ang = rng.uniform(0, 2 * M_PI), rad = 0.30 * std::sqrt(rng.uniform01());
    IdentityParams::Blob b;
    b.cx = 0.5 + rad * std::cos(ang);
    b.cy = 0.5 + rad * std::sin(ang);
    b.radius = rng.uniform(0.06, 0.28);
    for (int c = 0; c < 3; ++c) b.color[c] = rng.uniform(-0.12, 0.22);
    id.blobs.push_back(b);
  }

  // moles go where the surrounding content is locally flat, so their measured
  // contrast stays close to the sampled dip
  auto content_lum = [&id](double u, double v) {
    double rgb[3];
    content_rgb(id, u, v, rgb);
    return (rgb[0] + rgb[1] + rgb[2]) / 3.0;
  };
  int n_moles = 1 + static_cast<int>(rng.uniform_int(6));
  const double min_spacing = 20.0 / kNativeHighRes;
  for (int i = 0; i < n_moles; ++i) {
    double flat_tol = 0.08;
    for (int attempt = 0; attempt < 100; ++attempt) {
      if (attempt == 60 && id.moles.empty()) flat_tol = 0.15;  // always keep at least one
      double ang = rng.uniform(0, 2 * M_PI), rad = 0.32 * std::sqrt(rng.uniform01());
      IdentityParams::Mole m;
      m.cx = 0.5 + rad * std::cos(ang);
      m.cy = 0.5 + rad * std::sin(ang);
      m.radius_px_hr = rng.uniform(1.0, 3.0);
      m.contrast = rng.uniform(0.35, 0.65);
      bool clear = true;
      for (const auto& prev : id.moles)
        if (std::hypot(m.cx - prev.cx, m.cy - prev.cy) < min_spacing) clear = false;
      if (!clear) continue;
      double c0 = content_lum(m.cx, m.cy);
      double ring = 0, probe_r = 2.75 * m.radius_px_hr / kNativeHighRes;
      for (int k = 0; k < 8; ++k) {
        double a = 2 * M_PI * k / 8;
        ring += content_lum(m.cx + probe_r * std::cos(a), m.cy + probe_r * std::sin(a));
      }
      ring /= 8;
      if (std::abs(c0 / std::max(ring, 1e-6) - 1.0) > flat_tol) continue;
      id.moles.push_back(m);
      break;
    }
  }
  if (id.moles.empty()) throw std::logic_error("identity without moles (placement too tight)");
  return id;
}

TextureSample render_texture(const IdentityParams& id, const LightingCondition& cond,
                             int resolution) {
  if (resolution < 8 || (resolution & (resolution - 1)) != 0)
    throw std::invalid_argument("unsupported resolution " + std::to_string(resolution));
  int native = std::max(resolution, kNativeHighRes);
  TensorF img = render_grid(id, cond, native);
  while (native > resolution) {
    img = downsample_half(img);
    native /= 2;
  }
  TextureSample s;
  s.identity_id = id.identity_id;
  s.condition = cond;
  s.image = std::move(img);
  s.resolution = resolution;
  if (cond.kind == LightingCondition::Kind::Studio)
    s.mask.assign(static_cast<size_t>(resolution) * resolution, 1);
  else
    s.mask = wild_mask(id, resolution);
  return s;
}

TextureSample render_expression(const IdentityParams& id, const LightingCondition& cond,
                                int resolution, uint64_t expr_seed) {
  return render_texture(jitter_expression(id, expr_seed), cond, resolution);
}

double measure_mole_contrast(const TensorF& img, const IdentityParams::Mole& mole, int resolution) {
  const double r_px = mole.radius_px_hr * resolution / double(kNativeHighRes);
  const double cx = mole.cx * resolution - 0.5, cy = mole.cy * resolution - 0.5;
  double center_sum = 0, ring_sum = 0;
  int64_t center_n = 0, ring_n = 0;
  int lo_y = std::max(0, int(cy - 4 * r_px - 1)), hi_y = std::min(resolution - 1, int(cy + 4 * r_px + 1));
  int lo_x = std::max(0, int(cx - 4 * r_px - 1)), hi_x = std::min(resolution - 1, int(cx + 4 * r_px + 1));
  for (int y = lo_y; y <= hi_y; ++y)
    for (int x = lo_x; x <= hi_x; ++x) {
      double d = std::hypot(x - cx, y - cy);
      double lum = (img.at(0, y, x) + img.at(1, y, x) + img.at(2, y, x)) / 3.0;
      if (d <= r_px) {
        center_sum += lum;
        ++center_n;
      } else if (d > 2.0 * r_px && d <= 4.0 * r_px) {
        ring_sum += lum;
        ++ring_n;
      }
    }
  if (center_n == 0 || ring_n == 0) return 0.0;
  double center = center_sum / center_n, ring = ring_sum / ring_n;
  return (ring - center) / std::max(ring, 1e-6);
}

double mole_recall(const TensorF& img, const IdentityParams& id, int resolution,
                   double min_contrast) {
  if (id.moles.empty()) return 0.0;
  int hit = 0;
  for (const auto& m : id.moles)
    if (measure_mole_contrast(img, m, resolution) >= min_contrast) ++hit;
  return double(hit) / double(id.moles.size());
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

namespace {

uint64_t id_seed_for(uint64_t master, int64_t id) {
  Rng rng = Rng(master).derive("id_seed_" + std::to_string(id));
  return rng.next_u64();
}

LightingCondition wild_cond_for(uint64_t master, int64_t id) {
  Rng rng = Rng(master).derive("wild_light_" + std::to_string(id));
  return LightingCondition::sample_wild(rng);
}

json cond_to_json(const LightingCondition& c) {
  return json{{"kind", c.kind == LightingCondition::Kind::Studio ? "studio" : "wild"},
              {"direction", c.direction},
              {"intensity", c.intensity},
              {"color_cast", c.color_cast},
              {"shadow_strength", c.shadow_strength}};
}

LightingCondition cond_from_json(const json& j) {
  LightingCondition c;
  c.kind = j.at("kind") == "studio" ? LightingCondition::Kind::Studio : LightingCondition::Kind::Wild;
  for (int i = 0; i < 3; ++i) c.direction[i] = j.at("direction")[i];
  c.intensity = j.at("intensity");
  for (int i = 0; i < 3; ++i) c.color_cast[i] = j.at("color_cast")[i];
  c.shadow_strength = j.at("shadow_strength");
  return c;
}

}  // namespace

const DatasetManifest::IdRecord& DatasetManifest::record(int64_t id) const {
  for (const auto& [rid, rec] : records)
    if (rid == id) return rec;
  throw std::out_of_range("no record for identity " + std::to_string(id));
}

bool DatasetManifest::is_holdout(int64_t id) const {
  auto in = [id](const std::vector<int64_t>& v) {
    return std::find(v.begin(), v.end(), id) != v.end();
  };
  return in(holdout_paired_ids) || in(holdout_unpaired_ids);
}

std::string phone_lr_path(const std::string& dir, int64_t id) {
  return dir + "/phone_lr/" + std::to_string(id) + ".ppm";
}
std::string phone_hr_path(const std::string& dir, int64_t id) {
  return dir + "/phone_hr/" + std::to_string(id) + ".ppm";
}
std::string phone_mask_path(const std::string& dir, int64_t id, int res) {
  return dir + "/masks/" + std::to_string(id) + "_" + std::to_string(res) + ".pbm";
}
std::string studio_lr_path(const std::string& dir, int64_t id) {
  return dir + "/studio_lr/" + std::to_string(id) + ".ppm";
}
std::string studio_hr_path(const std::string& dir, int64_t id) {
  return dir + "/studio_hr/" + std::to_string(id) + ".ppm";
}

DatasetManifest build_dataset(const DatasetConfig& cfg, const std::string& data_dir) {
  if (cfg.n_paired > cfg.n_studio)
    throw std::invalid_argument("paired ids must be a subset of the studio set");
  if (cfg.n_paired > cfg.n_phone) throw std::invalid_argument("paired ids must fit the phone set");

  DatasetManifest m;
  m.config = cfg;
  for (int i = 0; i < cfg.n_phone; ++i) m.phone_ids.push_back(i);
  for (int i = 0; i < cfg.n_paired; ++i) m.paired_ids.push_back(i);
  for (int i = 0; i < cfg.n_studio - cfg.n_paired; ++i) m.studio_ids.push_back(10000 + i);
  // studio set = paired + studio-only
  m.studio_ids.insert(m.studio_ids.begin(), m.paired_ids.begin(), m.paired_ids.end());
  for (int i = 0; i < cfg.n_holdout_paired; ++i) m.holdout_paired_ids.push_back(20000 + i);
  for (int i = 0; i < cfg.n_holdout_unpaired; ++i) m.holdout_unpaired_ids.push_back(30000 + i);

  std::vector<int64_t> all_ids = m.phone_ids;
  for (int64_t id : m.studio_ids)
    if (id >= 10000) all_ids.push_back(id);
  all_ids.insert(all_ids.end(), m.holdout_paired_ids.begin(), m.holdout_paired_ids.end());
  all_ids.insert(all_ids.end(), m.holdout_unpaired_ids.begin(), m.holdout_unpaired_ids.end());

  for (int64_t id : all_ids)
    m.records.emplace_back(id, DatasetManifest::IdRecord{id_seed_for(cfg.master_seed, id),
                                                         wild_cond_for(cfg.master_seed, id)});

  for (const char* sub : {"phone_lr", "phone_hr", "studio_lr", "studio_hr", "masks"})
    fs::create_directories(fs::path(data_dir) / sub);

  auto in_list = [](const std::vector<int64_t>& v, int64_t id) {
    return std::find(v.begin(), v.end(), id) != v.end();
  };

  parallel_for(
      static_cast<int64_t>(all_ids.size()),
      [&](int64_t idx) {
        int64_t id = all_ids[static_cast<size_t>(idx)];
        const auto& rec = m.records[static_cast<size_t>(idx)].second;
        IdentityParams ip = make_identity(rec.seed);
        ip.identity_id = id;

        bool is_phone = in_list(m.phone_ids, id) || in_list(m.holdout_paired_ids, id) ||
                        in_list(m.holdout_unpaired_ids, id);
        bool is_studio = in_list(m.studio_ids, id) || in_list(m.holdout_paired_ids, id);
        bool wants_hr = in_list(m.paired_ids, id) || in_list(m.holdout_paired_ids, id) ||
                        in_list(m.holdout_unpaired_ids, id);

        if (is_phone) {
          TextureSample lr = render_texture(ip, rec.wild, cfg.resolution_lr);
          write_ppm16(phone_lr_path(data_dir, id), lr.image);
          write_pbm(phone_mask_path(data_dir, id, cfg.resolution_lr), lr.mask, cfg.resolution_lr,
                    cfg.resolution_lr);
          if (wants_hr) {
            TextureSample hr = render_texture(ip, rec.wild, cfg.resolution_hr);
            write_ppm16(phone_hr_path(data_dir, id), hr.image);
            write_pbm(phone_mask_path(data_dir, id, cfg.resolution_hr), hr.mask, cfg.resolution_hr,
                      cfg.resolution_hr);
          }
        }
        if (is_studio) {
          LightingCondition st = LightingCondition::studio();
          write_ppm16(studio_lr_path(data_dir, id), render_texture(ip, st, cfg.resolution_lr).image);
          write_ppm16(studio_hr_path(data_dir, id), render_texture(ip, st, cfg.resolution_hr).image);
        }
      },
      cfg.threads);

  save_manifest(m, data_dir + "/manifest.json");
  return m;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
  json j;
  j["schema"] = 1;
  j["config"] = {{"n_phone", m.config.n_phone},
                 {"n_studio", m.config.n_studio},
                 {"n_paired", m.config.n_paired},
                 {"n_holdout_paired", m.config.n_holdout_paired},
                 {"n_holdout_unpaired", m.config.n_holdout_unpaired},
                 {"resolution_lr", m.config.resolution_lr},
                 {"resolution_hr", m.config.resolution_hr},
                 {"master_seed", m.config.master_seed}};
  j["splits"] = {{"phone", m.phone_ids},
                 {"studio", m.studio_ids},
                 {"paired", m.paired_ids},
                 {"holdout_paired", m.holdout_paired_ids},
                 {"holdout_unpaired", m.holdout_unpaired_ids}};
  json recs = json::object();
  for (const auto& [id, rec] : m.records)
    recs[std::to_string(id)] = {{"seed", rec.seed}, {"wild", cond_to_json(rec.wild)}};
  j["records"] = recs;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest: " + path);
  out << j.dump(1) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest: " + path);
  json j;
  in >> j;
  DatasetManifest m;
  const json& c = j.at("config");
  m.config.n_phone = c.at("n_phone");
  m.config.n_studio = c.at("n_studio");
  m.config.n_paired = c.at("n_paired");
  m.config.n_holdout_paired = c.at("n_holdout_paired");
  m.config.n_holdout_unpaired = c.at("n_holdout_unpaired");
  m.config.resolution_lr = c.at("resolution_lr");
  m.config.resolution_hr = c.at("resolution_hr");
  m.config.master_seed = c.at("master_seed");
  const json& s = j.at("splits");
  m.phone_ids = s.at("phone").get<std::vector<int64_t>>();
  m.studio_ids = s.at("studio").get<std::vector<int64_t>>();
  m.paired_ids = s.at("paired").get<std::vector<int64_t>>();
  m.holdout_paired_ids = s.at("holdout_paired").get<std::vector<int64_t>>();
  m.holdout_unpaired_ids = s.at("holdout_unpaired").get<std::vector<int64_t>>();
  for (const auto& [key, rec] : j.at("records").items())
    m.records.emplace_back(std::stoll(key),
                           DatasetManifest::IdRecord{rec.at("seed").get<uint64_t>(),
                                                     cond_from_json(rec.at("wild"))});
  return m;
}

}  // namespace texbridge
