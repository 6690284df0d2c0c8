#include "texbridge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "texbridge/autodiff.hpp"
#include "texbridge/errors.hpp"
#include "texbridge/finetune.hpp"

namespace texbridge {

namespace {

constexpr const char* kFeatureNote =
    "distances use this repo's fixed feature bank and identity embedder; "
    "absolute values are not comparable to numbers computed with pretrained "
    "perceptual or face networks, only orderings within one run are.";

void check_same_shape(const TensorF& a, const TensorF& b, const char* who) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(who) + ": shape mismatch");
}

double mse_all(const TensorF& a, const TensorF& b) {
  double acc = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    double d = double(a.data()[i]) - double(b.data()[i]);
    acc += d * d;
  }
  return acc / double(a.size());
}

// window start offsets for stride-8 8x8 coverage, last window snapped to the
// border so every pixel is inside at least one window
std::vector<int64_t> window_starts(int64_t extent, int64_t win) {
  std::vector<int64_t> out;
  if (extent <= win) {
    out.push_back(0);
    return out;
  }
  for (int64_t s = 0; s + win <= extent; s += win) out.push_back(s);
  if (out.back() + win < extent) out.push_back(extent - win);
  return out;
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

ad::Value<float> as_batch(const TensorF& img) {
  if (img.rank() != 3)
    throw std::invalid_argument("metric inputs must be (C,H,W) images");
  TensorF t = img;
  return ad::constant(t.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}));
}

std::vector<double> pooled_features(const TensorF& img,
                                    const FeatureExtractor<float>& fx) {
  TensorF t = img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)});
  TensorF p = fx.pooled(t);
  std::vector<double> out(p.size());
  for (int64_t i = 0; i < p.size(); ++i) out[i] = double(p.data()[i]);
  return out;
}

double poly3_kernel(const std::vector<double>& x, const std::vector<double>& y) {
  double dot = 0;
  for (size_t i = 0; i < x.size(); ++i) dot += x[i] * y[i];
  double u = dot / double(x.size()) + 1.0;
  return u * u * u;
}

}  // namespace

double psnr(const TensorF& a, const TensorF& b) {
  check_same_shape(a, b, "psnr");
  double m = mse_all(a, b);
  if (m < 1e-10) return 99.0;
  return 10.0 * std::log10(1.0 / m);
}

double ssim(const TensorF& a, const TensorF& b) {
  check_same_shape(a, b, "ssim");
  if (a.rank() != 3) throw std::invalid_argument("ssim expects (C,H,W) images");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const int64_t C = a.dim(0), H = a.dim(1), W = a.dim(2);
  const int64_t win = 8;
  std::vector<int64_t> ys = window_starts(H, win), xs = window_starts(W, win);
  double acc = 0;
  int64_t n_win = 0;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y0 : ys)
      for (int64_t x0 : xs) {
        int64_t hh = std::min(win, H), ww = std::min(win, W);
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int64_t y = y0; y < y0 + hh; ++y)
          for (int64_t x = x0; x < x0 + ww; ++x) {
            double va = a.at(c, y, x), vb = b.at(c, y, x);
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
          }
        double n = double(hh * ww);
        double ma = sa / n, mb = sb / n;
        double va = saa / n - ma * ma, vb = sbb / n - mb * mb;
        double cov = sab / n - ma * mb;
        double s = ((2 * ma * mb + c1) * (2 * cov + c2)) /
                   ((ma * ma + mb * mb + c1) * (va + vb + c2));
        acc += s;
        ++n_win;
      }
  return acc / double(n_win);
}

double faceid_distance(const TensorF& a, const TensorF& b,
                       const IdentityEmbedder<float>& emb) {
  ad::NoGradGuard ng;
  return double(loss_faceid(as_batch(a), as_batch(b), emb)->data.item());
}

double percp_distance(const TensorF& a, const TensorF& b,
                      const FeatureExtractor<float>& fx) {
  ad::NoGradGuard ng;
  return double(fx.distance(as_batch(a), as_batch(b))->data.item());
}

double dists_proxy(const TensorF& a, const TensorF& b,
                   const FeatureExtractor<float>& fx) {
  ad::NoGradGuard ng;
  auto fa = fx.features(as_batch(a));
  auto fb = fx.features(as_batch(b));
  const double c1 = 1e-4, c2 = 9e-4;
  double acc = 0;
  int64_t n = 0;
  for (size_t i = 0; i < fa.size(); ++i) {
    const TensorF& ta = fa[i]->data;
    const TensorF& tb = fb[i]->data;
    const int64_t C = ta.dim(1), plane = ta.dim(2) * ta.dim(3);
    for (int64_t c = 0; c < C; ++c) {
      const float* pa = ta.data() + c * plane;
      const float* pb = tb.data() + c * plane;
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (int64_t j = 0; j < plane; ++j) {
        sa += pa[j];
        sb += pb[j];
        saa += double(pa[j]) * pa[j];
        sbb += double(pb[j]) * pb[j];
        sab += double(pa[j]) * pb[j];
      }
      double np = double(plane);
      double ma = sa / np, mb = sb / np;
      double va = saa / np - ma * ma, vb = sbb / np - mb * mb;
      double cov = sab / np - ma * mb;
      double lum = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1);
      double str = (2 * cov + c2) / (va + vb + c2);
      acc += lum * str;
      ++n;
    }
  }
  return 1.0 - acc / double(n);
}

double kid(const std::vector<TensorF>& set_a, const std::vector<TensorF>& set_b,
           const FeatureExtractor<float>& fx) {
  const int64_t m = int64_t(set_a.size()), n = int64_t(set_b.size());
  if (m < 2 || n < 2)
    throw std::invalid_argument("kid: each set needs at least 2 samples");
  std::vector<std::vector<double>> fa(m), fb(n);
  for (int64_t i = 0; i < m; ++i) fa[i] = pooled_features(set_a[i], fx);
  for (int64_t j = 0; j < n; ++j) fb[j] = pooled_features(set_b[j], fx);

  if (m == n) {
    // paired U-statistic: each off-diagonal pair contributes
    // k(a_i,a_j) + k(b_i,b_j) - k(a_i,b_j) - k(a_j,b_i); identically zero when
    // the two sets hold the same samples in the same order
    double acc = 0;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < m; ++j) {
        if (i == j) continue;
        acc += poly3_kernel(fa[i], fa[j]) + poly3_kernel(fb[i], fb[j]) -
               poly3_kernel(fa[i], fb[j]) - poly3_kernel(fa[j], fb[i]);
      }
    return acc / double(m * (m - 1));
  }

  double aa = 0, bb = 0, ab = 0;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < m; ++j)
      if (i != j) aa += poly3_kernel(fa[i], fa[j]);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      if (i != j) bb += poly3_kernel(fb[i], fb[j]);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) ab += poly3_kernel(fa[i], fb[j]);
  return aa / double(m * (m - 1)) + bb / double(n * (n - 1)) -
         2.0 * ab / double(m * n);
}

// ---------------------------------------------------------------------------
// split bookkeeping
// ---------------------------------------------------------------------------

std::string split_to_json(const DatasetSplit& s) {
  nlohmann::json j;
  j["train_ids"] = s.train_ids;
  j["holdout_paired_ids"] = s.holdout_paired_ids;
  j["holdout_unpaired_ids"] = s.holdout_unpaired_ids;
  return j.dump(2);
}

DatasetSplit split_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.contains("train_ids") ||
      !j.contains("holdout_paired_ids") || !j.contains("holdout_unpaired_ids"))
    throw MissingArtifactError("dataset split json is malformed");
  DatasetSplit s;
  s.train_ids = j["train_ids"].get<std::vector<uint64_t>>();
  s.holdout_paired_ids = j["holdout_paired_ids"].get<std::vector<uint64_t>>();
  s.holdout_unpaired_ids = j["holdout_unpaired_ids"].get<std::vector<uint64_t>>();
  return s;
}

void assert_holdout_clean(const std::vector<uint64_t>& eval_ids,
                          const std::vector<uint64_t>& expected_holdout,
                          const DatasetSplit& split) {
  std::set<uint64_t> train(split.train_ids.begin(), split.train_ids.end());
  std::set<uint64_t> holdout(expected_holdout.begin(), expected_holdout.end());
  for (uint64_t id : eval_ids) {
    if (train.count(id))
      throw ConfigError("holdout contamination: id " + std::to_string(id) +
                        " appears in the training split");
    if (!holdout.count(id))
      throw ConfigError("id " + std::to_string(id) +
                        " is not part of the declared holdout set");
  }
}

// ---------------------------------------------------------------------------
// evaluation drivers
// ---------------------------------------------------------------------------

namespace {

std::vector<IdImage> sorted_by_id(std::vector<IdImage> v) {
  std::sort(v.begin(), v.end(),
            [](const IdImage& a, const IdImage& b) { return a.first < b.first; });
  return v;
}

const TensorF& partner(const std::map<uint64_t, const TensorF*>& pool, uint64_t id,
                       const char* what) {
  auto it = pool.find(id);
  if (it == pool.end())
    throw std::invalid_argument(std::string("no ") + what + " image for id " +
                                std::to_string(id));
  return *it->second;
}

}  // namespace

PairedEvalReport evaluate_paired(const std::vector<IdImage>& outputs,
                                 const std::vector<IdImage>& gt_studio,
                                 const DatasetSplit& split,
                                 const FeatureExtractor<float>& fx) {
  std::vector<IdImage> out = sorted_by_id(outputs);
  std::vector<uint64_t> ids;
  for (const auto& [id, img] : out) ids.push_back(id);
  assert_holdout_clean(ids, split.holdout_paired_ids, split);

  std::map<uint64_t, const TensorF*> gt;
  for (const auto& [id, img] : gt_studio) gt[id] = &img;

  PairedEvalReport rep;
  double sp = 0, ss = 0, sl = 0, sd = 0;
  for (const auto& [id, img] : out) {
    const TensorF& ref = partner(gt, id, "ground-truth studio");
    PairedRow row;
    row.id = id;
    row.psnr = psnr(img, ref);
    row.ssim = ssim(img, ref);
    row.percp = percp_distance(img, ref, fx);
    row.dists = dists_proxy(img, ref, fx);
    sp += row.psnr;
    ss += row.ssim;
    sl += row.percp;
    sd += row.dists;
    rep.rows.push_back(row);
  }
  if (!rep.rows.empty()) {
    double n = double(rep.rows.size());
    rep.mean_psnr = sp / n;
    rep.mean_ssim = ss / n;
    rep.mean_percp = sl / n;
    rep.mean_dists = sd / n;
  }
  return rep;
}

UnpairedEvalReport evaluate_unpaired(const std::vector<IdImage>& outputs,
                                     const std::vector<IdImage>& phone_inputs,
                                     const std::vector<TensorF>& studio_set,
                                     const DatasetSplit& split,
                                     const IdentityEmbedder<float>& emb,
                                     const FeatureExtractor<float>& fx) {
  std::vector<IdImage> out = sorted_by_id(outputs);
  std::vector<uint64_t> ids;
  for (const auto& [id, img] : out) ids.push_back(id);
  assert_holdout_clean(ids, split.holdout_unpaired_ids, split);

  std::map<uint64_t, const TensorF*> phones;
  for (const auto& [id, img] : phone_inputs) phones[id] = &img;

  UnpairedEvalReport rep;
  double sf = 0;
  std::vector<TensorF> out_imgs;
  for (const auto& [id, img] : out) {
    const TensorF& ph = partner(phones, id, "phone input");
    UnpairedRow row;
    row.id = id;
    row.faceid = faceid_distance(img, ph, emb);
    sf += row.faceid;
    rep.rows.push_back(row);
    out_imgs.push_back(img);
  }
  if (!rep.rows.empty()) rep.mean_faceid = sf / double(rep.rows.size());
  rep.kid_vs_studio = kid(out_imgs, studio_set, fx);
  return rep;
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

std::string paired_report_csv(const PairedEvalReport& r) {
  std::ostringstream os;
  os << "id,psnr,ssim,percp (LPIPS-proxy),dists_proxy\n";
  for (const auto& row : r.rows)
    os << row.id << ',' << fmt6(row.psnr) << ',' << fmt6(row.ssim) << ','
       << fmt6(row.percp) << ',' << fmt6(row.dists) << '\n';
  os << "# " << kFeatureNote << '\n';
  return os.str();
}

std::string paired_report_json(const PairedEvalReport& r) {
  nlohmann::json j;
  j["method"] = r.method;
  j["aggregate"] = {{"psnr", r.mean_psnr},
                    {"ssim", r.mean_ssim},
                    {"percp (LPIPS-proxy)", r.mean_percp},
                    {"dists_proxy", r.mean_dists},
                    {"n", r.rows.size()}};
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"id", row.id},
                    {"psnr", row.psnr},
                    {"ssim", row.ssim},
                    {"percp (LPIPS-proxy)", row.percp},
                    {"dists_proxy", row.dists}});
  j["rows"] = rows;
  j["note"] = kFeatureNote;
  return j.dump(2);
}

std::string paired_report_markdown(const PairedEvalReport& r) {
  std::ostringstream os;
  os << "| method | psnr | ssim | percp (LPIPS-proxy) | dists_proxy |\n";
  os << "|---|---|---|---|---|\n";
  os << "| " << r.method << " | " << fmt6(r.mean_psnr) << " | "
     << fmt6(r.mean_ssim) << " | " << fmt6(r.mean_percp) << " | "
     << fmt6(r.mean_dists) << " |\n\n";
  os << "| id | psnr | ssim | percp (LPIPS-proxy) | dists_proxy |\n";
  os << "|---|---|---|---|---|\n";
  for (const auto& row : r.rows)
    os << "| " << row.id << " | " << fmt6(row.psnr) << " | " << fmt6(row.ssim)
       << " | " << fmt6(row.percp) << " | " << fmt6(row.dists) << " |\n";
  os << "\n_" << kFeatureNote << "_\n";
  return os.str();
}

std::string unpaired_report_csv(const UnpairedEvalReport& r) {
  std::ostringstream os;
  os << "id,faceid\n";
  for (const auto& row : r.rows) os << row.id << ',' << fmt6(row.faceid) << '\n';
  os << "# kid_vs_studio," << fmt6(r.kid_vs_studio) << '\n';
  os << "# " << kFeatureNote << '\n';
  return os.str();
}

std::string unpaired_report_json(const UnpairedEvalReport& r) {
  nlohmann::json j;
  j["method"] = r.method;
  j["aggregate"] = {{"faceid", r.mean_faceid},
                    {"kid_vs_studio", r.kid_vs_studio},
                    {"n", r.rows.size()}};
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"id", row.id}, {"faceid", row.faceid}});
  j["rows"] = rows;
  j["note"] = kFeatureNote;
  return j.dump(2);
}

std::string unpaired_report_markdown(const UnpairedEvalReport& r) {
  std::ostringstream os;
  os << "| method | faceid | kid_vs_studio |\n|---|---|---|\n";
  os << "| " << r.method << " | " << fmt6(r.mean_faceid) << " | "
     << fmt6(r.kid_vs_studio) << " |\n\n";
  os << "| id | faceid |\n|---|---|\n";
  for (const auto& row : r.rows)
    os << "| " << row.id << " | " << fmt6(row.faceid) << " |\n";
  os << "\n_" << kFeatureNote << "_\n";
  return os.str();
}

}  // namespace texbridge
