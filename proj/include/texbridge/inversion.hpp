#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "texbridge/autodiff.hpp"
#include "texbridge/checkpoint.hpp"
#include "texbridge/errors.hpp"
#include "texbridge/nets.hpp"
#include "texbridge/parallel.hpp"
#include "texbridge/synthtex.hpp"

namespace texbridge {

// Latent projection: find the per-layer style stack whose synthesis matches a
// target texture on its visible pixels.

struct InversionOptions {
  int iterations = 300;
  double step = 0.05;
  double momentum = 0.9;
  double l2_weight = 1.0;
  double percp_weight = 1.0;
  int mean_w_samples = 1024;  // latent average used as the starting point
  int backtrack_max = 12;
  bool backtracking = true;
  uint64_t seed = 0;
};

template <class S>
struct InversionResultT {
  Tensor<S> w_plus;  // (layers, d_w)
  double final_loss = 0;
  std::vector<double> loss_curve;  // [0] = loss at init, then one entry per iteration
  int iterations = 0;
};
using InversionResult = InversionResultT<float>;

struct InvertedEntry {
  int64_t identity_id = 0;
  TensorF w_plus;
  double final_loss = 0;
  double masked_psnr = 0;
};

struct InvertedSet {
  std::vector<InvertedEntry> entries;  // one per phone identity, id-sorted
  std::string source_manifest_hash;

  const InvertedEntry& at(int64_t id) const {
    for (const auto& e : entries)
      if (e.identity_id == id) return e;
    throw MissingArtifactError("no inverted latent for identity " + std::to_string(id));
  }
};

// average of mapped random latents; the standard neutral starting point
template <class S>
Tensor<S> mean_w(const Generator<S>& gen, int n_samples, uint64_t seed) {
  Rng rng = Rng(seed).derive("mean_w");
  Tensor<S> acc({gen.cfg.d_w});
  int done = 0;
  ad::NoGradGuard ng;
  while (done < n_samples) {
    int b = std::min(64, n_samples - done);
    Tensor<S> z = rng.template normal_tensor<S>({b, gen.cfg.d_z});
    Tensor<S> w = gen.map_z(ad::constant<S>(z))->data;  // (b, d_w)
    for (int i = 0; i < b; ++i)
      for (int64_t j = 0; j < gen.cfg.d_w; ++j) acc.data()[j] += w.at(i, j);
    done += b;
  }
  return scale(acc, S(1) / S(n_samples));
}

namespace indetail {

// (3,R,R) sample pieces -> broadcastable (1,·,R,R) tensors
template <class S>
Tensor<S> image_batch(const TensorF& img) {
  Tensor<S> out({1, img.dim(0), img.dim(1), img.dim(2)});
  for (int64_t i = 0; i < img.size(); ++i) out.data()[i] = static_cast<S>(img.data()[i]);
  return out;
}

template <class S>
Tensor<S> mask_batch(const std::vector<uint8_t>& mask, int64_t r) {
  Tensor<S> out({1, 1, r, r});
  for (int64_t i = 0; i < r * r; ++i) out.data()[i] = mask[static_cast<size_t>(i)] ? S(1) : S(0);
  return out;
}

}  // namespace indetail

// masked L2 + masked perceptual objective on a (1,L,d_w) style stack
template <class S>
ad::Value<S> inversion_loss(const Generator<S>& gen, const FeatureExtractor<S>& fx,
                            const ad::Value<S>& w_plus, const Tensor<S>& target,
                            const Tensor<S>& mask, double l2_weight, double percp_weight) {
  using namespace ad;
  Value<S> img = gen.synthesize_wplus(w_plus);  // (1,3,R,R)
  Value<S> m = constant<S>(mask);
  Value<S> tgt_masked = constant<S>(mul(broadcast_to(mask, target.shape()), target));
  Value<S> img_masked = mul(img, m);
  S n_vis = S(3) * sum_all(mask);
  if (n_vis <= 0) throw NumericalError("inversion target has an empty visibility mask");
  Value<S> diff = sub(img_masked, tgt_masked);
  Value<S> l2 = scale(sum_all(square(diff)), S(1) / n_vis);
  Value<S> percp = fx.distance(img_masked, tgt_masked);
  return add(scale(l2, S(l2_weight)), scale(percp, S(percp_weight)));
}

template <class S>
InversionResultT<S> invert_wplus(const TextureSample& target, const Generator<S>& gen,
                                 const FeatureExtractor<S>& fx, const InversionOptions& opts,
                                 const Tensor<S>* init_w = nullptr) {
  if (target.resolution != gen.cfg.resolution)
    throw std::invalid_argument("target resolution " + std::to_string(target.resolution) +
                                " does not match generator resolution " +
                                std::to_string(gen.cfg.resolution));
  const int64_t L = gen.n_layers();
  Tensor<S> w0({1, L, gen.cfg.d_w});
  if (init_w) {
    if (init_w->shape() == Shape{gen.cfg.d_w}) {
      for (int64_t l = 0; l < L; ++l)
        for (int64_t j = 0; j < gen.cfg.d_w; ++j) w0.at(0, l, j) = init_w->data()[j];
    } else if (init_w->shape() == w0.shape()) {
      w0 = *init_w;
    } else {
      throw std::invalid_argument("init_w must be (d_w) or (1,L,d_w)");
    }
  } else {
    Tensor<S> mu = mean_w(gen, opts.mean_w_samples, opts.seed);
    for (int64_t l = 0; l < L; ++l)
      for (int64_t j = 0; j < gen.cfg.d_w; ++j) w0.at(0, l, j) = mu.data()[j];
  }

  Tensor<S> tgt = indetail::image_batch<S>(target.image);
  Tensor<S> mask = indetail::mask_batch<S>(target.mask, target.resolution);

  auto eval = [&](const Tensor<S>& w, Tensor<S>* grad_out) -> double {
    ad::Value<S> w_leaf = ad::leaf<S>(w);
    ad::Value<S> loss =
        inversion_loss(gen, fx, w_leaf, tgt, mask, opts.l2_weight, opts.percp_weight);
    double val = static_cast<double>(loss->data.item());
    if (!std::isfinite(val)) throw NumericalError("inversion loss diverged (non-finite)");
    if (grad_out) *grad_out = ad::gradients(loss, {w_leaf}, false)[0]->data;
    return val;
  };

  InversionResultT<S> res;
  Tensor<S> w = w0;
  Tensor<S> vel(w.shape());
  double step = opts.step;
  double cur = eval(w, nullptr);
  res.loss_curve.push_back(cur);

  for (int it = 0; it < opts.iterations; ++it) {
    Tensor<S> g(w.shape());
    eval(w, &g);
    bool accepted = false;
    for (int bt = 0; bt <= (opts.backtracking ? opts.backtrack_max : 0); ++bt) {
      Tensor<S> v_try = sub(scale(vel, S(opts.momentum)), scale(g, S(step)));
      Tensor<S> w_try = add(w, v_try);
      double cand = eval(w_try, nullptr);
      if (!opts.backtracking || cand <= cur) {
        w = std::move(w_try);
        vel = std::move(v_try);
        cur = cand;
        accepted = true;
        break;
      }
      step *= 0.5;        // safeguard: shrink and drop momentum
      vel = Tensor<S>(w.shape());
    }
    if (!accepted) step *= 2;  // stuck at machine precision; gently re-open
    res.loss_curve.push_back(cur);
  }

  res.w_plus = w.reshaped({L, gen.cfg.d_w});
  res.final_loss = res.loss_curve.back();
  res.iterations = opts.iterations;
  return res;
}

// mean masked squared error -> dB (data range 1); reused by the quality gate
template <class S>
double masked_psnr(const Tensor<S>& a, const TensorF& b, const std::vector<uint8_t>& mask) {
  double se = 0;
  int64_t n = 0;
  int64_t hw = b.dim(1) * b.dim(2);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < hw; ++i)
      if (mask[static_cast<size_t>(i)]) {
        double d = static_cast<double>(a.data()[c * hw + i]) - b.data()[c * hw + i];
        se += d * d;
        ++n;
      }
  if (n == 0) return 0;
  double mse = se / static_cast<double>(n);
  if (mse < 1e-10) return 99.0;
  return 10.0 * std::log10(1.0 / mse);
}

struct InvertSetOptions {
  InversionOptions inversion;
  int threads = 0;
  double max_failure_rate = 0.01;
};

template <class S>
InvertedSet build_inverted_set(const DatasetManifest& manifest, const std::string& data_dir,
                               const Generator<S>& gen, const FeatureExtractor<S>& fx,
                               const InvertSetOptions& opts,
                               std::string source_manifest_hash = "") {
  InvertedSet out;
  out.source_manifest_hash = std::move(source_manifest_hash);
  const auto& ids = manifest.phone_ids;
  out.entries.resize(ids.size());
  std::vector<std::string> failures(ids.size());

  Tensor<S> init = mean_w(gen, opts.inversion.mean_w_samples, opts.inversion.seed);

  parallel_for(
      static_cast<int64_t>(ids.size()),
      [&](int64_t i) {
        int64_t id = ids[static_cast<size_t>(i)];
        try {
          IdentityParams ip = make_identity(manifest.record(id).seed);
          ip.identity_id = id;
          TextureSample s =
              render_texture(ip, manifest.record(id).wild, manifest.config.resolution_lr);
          InversionOptions iopts = opts.inversion;
          iopts.seed = Rng(opts.inversion.seed).derive("invert_" + std::to_string(id)).next_u64();
          InversionResultT<S> r = invert_wplus(s, gen, fx, iopts, &init);
          ad::NoGradGuard ng;
          Tensor<S> img = gen.synthesize_wplus(ad::constant<S>(r.w_plus.reshaped(
                                                   {1, gen.n_layers(), gen.cfg.d_w})))
                              ->data;
          InvertedEntry e;
          e.identity_id = id;
          e.final_loss = r.final_loss;
          e.masked_psnr =
              masked_psnr(img.reshaped({3, s.resolution, s.resolution}), s.image, s.mask);
          TensorF wp32(r.w_plus.shape());
          for (int64_t k = 0; k < r.w_plus.size(); ++k)
            wp32.data()[k] = static_cast<float>(r.w_plus.data()[k]);
          e.w_plus = std::move(wp32);
          out.entries[static_cast<size_t>(i)] = std::move(e);
        } catch (const std::exception& ex) {
          failures[static_cast<size_t>(i)] = std::string(ex.what());
        }
      },
      opts.threads);

  size_t n_failed = 0;
  std::string detail;
  for (size_t i = 0; i < ids.size(); ++i)
    if (!failures[i].empty()) {
      ++n_failed;
      if (detail.size() < 500)
        detail += "id " + std::to_string(ids[i]) + ": " + failures[i] + "; ";
    }
  if (n_failed > opts.max_failure_rate * static_cast<double>(ids.size()))
    throw NumericalError("inversion failed on " + std::to_string(n_failed) + "/" +
                         std::to_string(ids.size()) + " identities: " + detail);
  if (n_failed > 0) {
    // tolerated stragglers are dropped, ids recorded by the caller via size diff
    std::vector<InvertedEntry> kept;
    for (size_t i = 0; i < ids.size(); ++i)
      if (failures[i].empty()) kept.push_back(std::move(out.entries[i]));
    out.entries = std::move(kept);
  }
  return out;
}

inline Checkpoint inverted_set_to_checkpoint(const InvertedSet& set) {
  Checkpoint ck;
  std::string ids = "[";
  for (size_t i = 0; i < set.entries.size(); ++i) {
    const auto& e = set.entries[i];
    ck.arrays.emplace_back("w/" + std::to_string(e.identity_id), e.w_plus);
    ids += (i ? "," : "") + std::to_string(e.identity_id);
  }
  ids += "]";
  std::string losses = "[", psnrs = "[";
  for (size_t i = 0; i < set.entries.size(); ++i) {
    losses += (i ? "," : "") + std::to_string(set.entries[i].final_loss);
    psnrs += (i ? "," : "") + std::to_string(set.entries[i].masked_psnr);
  }
  losses += "]";
  psnrs += "]";
  ck.extra_json = "{\"ids\":" + ids + ",\"final_loss\":" + losses + ",\"masked_psnr\":" + psnrs +
                  ",\"source_manifest\":\"" + set.source_manifest_hash + "\"}";
  return ck;
}

InvertedSet inverted_set_from_checkpoint(const Checkpoint& ck);

}  // namespace texbridge
