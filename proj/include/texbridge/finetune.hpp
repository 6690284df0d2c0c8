#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "texbridge/autodiff.hpp"
#include "texbridge/errors.hpp"
#include "texbridge/inversion.hpp"
#include "texbridge/nets.hpp"

namespace texbridge {

// Domain transfer by finetuning: a copy of the phone generator is pushed
// toward the studio image distribution while identity-bearing content is held
// by perceptual/embedding anchors to the phone generator's output for the same
// latent, plus a tiny paired reconstruction set.

struct FinetuneConfig {
  double lambda1 = 0.5;   // perceptual anchor weight
  double lambda2 = 10.0;  // identity-embedding anchor weight
  double gamma_r1 = 10.0;
  int freeze_upto = 8;  // 0 = train the full synthesis stack
  enum class LatentSource { WPlusSet, ZSpace };
  LatentSource latent_source = LatentSource::WPlusSet;
  int steps = 200;
  int batch = 4;
  double lr_g = 1e-3;
  double lr_d = 1e-3;
  uint64_t seed = 0;
};

struct LossBreakdown {
  double adv_g = 0, adv_d = 0, r1 = 0, percp = 0, faceid = 0, percp_recons = 0, total = 0;
};

inline std::string loss_csv_header() {
  return "step,adv_g,adv_d,r1,percp,faceid,percp_recons,total";
}
std::string loss_csv_row(int64_t step, const LossBreakdown& b);

// ---------------------------------------------------------------------------
// loss terms (all return graph values; batch-meaned)
// ---------------------------------------------------------------------------

// hinge pair: d_loss = mean relu(1-D(real)) + mean relu(1+D(fake)), g_loss = -mean D(fake)
template <class S>
std::pair<ad::Value<S>, ad::Value<S>> loss_adv(const Discriminator<S>& disc,
                                               const ad::Value<S>& real,
                                               const ad::Value<S>& fake) {
  using namespace ad;
  Value<S> dr = disc.forward(real);  // (B,1)
  Value<S> df = disc.forward(fake);
  Value<S> d_loss = add(mean_all(relu(affine(dr, S(-1), S(1)))),
                        mean_all(relu(affine(df, S(1), S(1)))));
  Value<S> g_loss = neg(mean_all(df));
  return {d_loss, g_loss};
}

// (gamma/2) * mean_b ||d D(x)/d x||^2, differentiable in the discriminator's params
template <class S>
ad::Value<S> loss_r1(const Discriminator<S>& disc, const ad::Value<S>& real_leaf, double gamma) {
  using namespace ad;
  if (gamma == 0) return constant_scalar<S>(0);
  Value<S> logits = disc.forward(real_leaf);
  Value<S> grads = gradients(sum_all(logits), {real_leaf}, /*build_graph=*/true)[0];
  Value<S> per_sample = sum_axes(square(grads), {1, 2, 3});  // (B,1,1,1)
  return scale(mean_all(per_sample), S(gamma / 2));
}

template <class S>
ad::Value<S> loss_faceid(const ad::Value<S>& img_studio, const ad::Value<S>& img_phone,
                         const IdentityEmbedder<S>& emb) {
  using namespace ad;
  Value<S> d = sub(emb.embed(img_studio), emb.embed(img_phone));  // (B, d_id)
  return mean_all(sum_axes(square(d), {1}));
}

template <class S>
ad::Value<S> loss_percp(const ad::Value<S>& img_studio, const ad::Value<S>& img_phone,
                        const FeatureExtractor<S>& fx) {
  return fx.distance(img_studio, img_phone);
}

// reconstruction of ground-truth studio textures from their inverted latents
template <class S>
ad::Value<S> loss_percp_recons(const Generator<S>& g_studio, const ad::Value<S>& paired_w,
                               const ad::Value<S>& paired_gt, const FeatureExtractor<S>& fx) {
  return fx.distance(g_studio.synthesize_wplus(paired_w), paired_gt);
}

// ---------------------------------------------------------------------------
// training state
// ---------------------------------------------------------------------------

template <class S>
struct FinetuneData {
  Tensor<S> studio_images;  // (N,3,R,R) real pool
  std::vector<int64_t> studio_ids;
  Tensor<S> inverted_w;  // (M,L,d_w) latent pool for WPlusSet
  std::vector<int64_t> inverted_ids;
  Tensor<S> paired_w;   // (K,L,d_w); K may be 0
  Tensor<S> paired_gt;  // (K,3,R,R)
  std::vector<int64_t> paired_ids;
};

template <class S>
struct FinetuneState {
  FinetuneConfig cfg;
  Generator<S> g_phone;   // frozen content reference
  Generator<S> g_studio;  // trained copy
  Discriminator<S> disc;
  FeatureExtractor<S> fx;
  IdentityEmbedder<S> emb;
  FinetuneData<S> data;

  Adam<S> opt_g, opt_d;
  std::vector<ad::Value<S>> g_trainable, g_frozen, d_trainable;
  int64_t step = 0;
  int rotate = 0;  // paired minibatch cursor
  std::vector<LossBreakdown> log;
  std::vector<int64_t> used_latent_ids;  // WPlusSet membership audit trail

  FinetuneState(FinetuneConfig cfg_, Generator<S> phone, Generator<S> studio,
                Discriminator<S> d, IdentityEmbedder<S> e, FinetuneData<S> data_)
      : cfg(cfg_),
        g_phone(std::move(phone)),
        g_studio(std::move(studio)),
        disc(std::move(d)),
        fx(),
        emb(std::move(e)),
        data(std::move(data_)),
        opt_g(cfg_.lr_g),
        opt_d(cfg_.lr_d) {
    std::vector<std::string> frozen_names, trainable_names;
    partition_trainables(g_studio.params, cfg.freeze_upto, &frozen_names, &trainable_names);
    for (const auto& n : frozen_names) g_frozen.push_back(g_studio.params.value(n));
    for (const auto& n : trainable_names) g_trainable.push_back(g_studio.params.value(n));
    for (const auto& p : disc.params.items())
      if (p.trainable) d_trainable.push_back(p.value);
    if (cfg.latent_source == FinetuneConfig::LatentSource::WPlusSet &&
        data.inverted_w.size() == 0)
      throw std::invalid_argument("WPlusSet latent source requires a non-empty inverted set");
  }
};

namespace ftdetail {

template <class S>
Tensor<S> rows(const Tensor<S>& pool, const std::vector<int64_t>& idx) {
  Shape s = pool.shape();
  int64_t row = pool.size() / s[0];
  Shape out_shape = s;
  out_shape[0] = static_cast<int64_t>(idx.size());
  Tensor<S> out(out_shape);
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(pool.data() + idx[i] * row, row, out.data() + static_cast<int64_t>(i) * row);
  return out;
}

inline void check_finite(double v, const char* term) {
  if (!std::isfinite(v))
    throw NumericalError(std::string("finetune loss diverged: ") + term + " is non-finite");
}

}  // namespace ftdetail

// one discriminator update then one generator update on a freshly drawn batch
template <class S>
LossBreakdown finetune_step(FinetuneState<S>& st) {
  using namespace ad;
  const FinetuneConfig& cfg = st.cfg;
  const int64_t L = st.g_studio.n_layers();
  Rng step_rng = Rng(cfg.seed).derive("finetune_step").derive(static_cast<uint64_t>(st.step));

  // --- draw the batch
  std::vector<int64_t> real_idx(cfg.batch), lat_idx(cfg.batch);
  for (int i = 0; i < cfg.batch; ++i)
    real_idx[i] = static_cast<int64_t>(step_rng.uniform_int(st.data.studio_images.dim(0)));
  Tensor<S> real = ftdetail::rows(st.data.studio_images, real_idx);

  Tensor<S> latents;  // (B,L,d_w) after mapping or lookup
  if (cfg.latent_source == FinetuneConfig::LatentSource::WPlusSet) {
    for (int i = 0; i < cfg.batch; ++i) {
      lat_idx[i] = static_cast<int64_t>(step_rng.uniform_int(st.data.inverted_w.dim(0)));
      int64_t id = st.data.inverted_ids[static_cast<size_t>(lat_idx[i])];
      st.used_latent_ids.push_back(id);
    }
    latents = ftdetail::rows(st.data.inverted_w, lat_idx);
  } else {
    NoGradGuard ng;
    Tensor<S> z = step_rng.template normal_tensor<S>({cfg.batch, st.g_studio.cfg.d_z});
    Tensor<S> w = st.g_studio.map_z(constant<S>(z))->data;  // (B,d_w)
    latents = Tensor<S>({cfg.batch, L, st.g_studio.cfg.d_w});
    for (int b = 0; b < cfg.batch; ++b)
      for (int64_t l = 0; l < L; ++l)
        for (int64_t j = 0; j < st.g_studio.cfg.d_w; ++j) latents.at(b, l, j) = w.at(b, j);
  }

  LossBreakdown out;

  // --- discriminator step (hinge + R1); fake detached
  {
    Tensor<S> fake;
    {
      NoGradGuard ng;
      fake = st.g_studio.synthesize_wplus(constant<S>(latents))->data;
    }
    Value<S> real_leaf = leaf<S>(real);  // leaf so R1 can differentiate wrt pixels
    auto [d_adv, g_unused] = loss_adv(st.disc, real_leaf, constant<S>(fake));
    Value<S> r1 = loss_r1(st.disc, real_leaf, cfg.gamma_r1);
    Value<S> d_total = add(d_adv, r1);
    out.adv_d = static_cast<double>(d_adv->data.item());
    out.r1 = static_cast<double>(r1->data.item());
    ftdetail::check_finite(out.adv_d, "adv_d");
    ftdetail::check_finite(out.r1, "r1");
    std::vector<Value<S>> grads = gradients(d_total, st.d_trainable, /*build_graph=*/false);
    st.opt_d.step(st.d_trainable, grads);
  }

  // --- generator step (adv + anchors + paired reconstruction)
  {
    Value<S> wp = constant<S>(latents);
    Value<S> img_studio = st.g_studio.synthesize_wplus(wp);
    Tensor<S> phone_ref;
    {
      NoGradGuard ng;
      phone_ref = st.g_phone.synthesize_wplus(constant<S>(latents))->data;
    }
    Value<S> img_phone = constant<S>(phone_ref);

    Value<S> adv_g = neg(mean_all(st.disc.forward(img_studio)));
    Value<S> percp = loss_percp(img_studio, img_phone, st.fx);
    Value<S> faceid = loss_faceid(img_studio, img_phone, st.emb);

    Value<S> recons;
    int64_t K = st.data.paired_w.rank() == 3 ? st.data.paired_w.dim(0) : 0;
    if (K > 0) {
      int kb = static_cast<int>(std::min<int64_t>(cfg.batch, K));
      std::vector<int64_t> pick(static_cast<size_t>(kb));
      for (int i = 0; i < kb; ++i) pick[static_cast<size_t>(i)] = (st.rotate + i) % K;
      st.rotate = static_cast<int>((st.rotate + kb) % K);
      recons = loss_percp_recons(st.g_studio, constant<S>(ftdetail::rows(st.data.paired_w, pick)),
                                 constant<S>(ftdetail::rows(st.data.paired_gt, pick)), st.fx);
    } else {
      recons = constant_scalar<S>(0);
    }

    Value<S> g_total = add(add(adv_g, recons),
                           add(scale(percp, S(cfg.lambda1)), scale(faceid, S(cfg.lambda2))));
    out.adv_g = static_cast<double>(adv_g->data.item());
    out.percp = static_cast<double>(percp->data.item());
    out.faceid = static_cast<double>(faceid->data.item());
    out.percp_recons = static_cast<double>(recons->data.item());
    ftdetail::check_finite(out.adv_g, "adv_g");
    ftdetail::check_finite(out.percp, "percp");
    ftdetail::check_finite(out.faceid, "faceid");
    ftdetail::check_finite(out.percp_recons, "percp_recons");
    std::vector<Value<S>> grads = gradients(g_total, st.g_trainable, /*build_graph=*/false);
    st.opt_g.step(st.g_trainable, grads);
  }

  // both players' objectives recombined with the config weights
  out.total = out.adv_g + out.adv_d + out.r1 + out.percp_recons + cfg.lambda1 * out.percp +
              cfg.lambda2 * out.faceid;
  st.log.push_back(out);
  ++st.step;
  return out;
}

// WPlusSet contract: every latent used so far is an exact member of the set
template <class S>
void assert_latents_member(const FinetuneState<S>& st, const InvertedSet& set) {
  for (int64_t id : st.used_latent_ids) {
    const InvertedEntry& e = set.at(id);  // throws if foreign
    bool found = false;
    for (size_t i = 0; i < st.data.inverted_ids.size(); ++i)
      if (st.data.inverted_ids[i] == id) {
        int64_t row = e.w_plus.size();
        for (int64_t k = 0; k < row; ++k)
          if (static_cast<float>(st.data.inverted_w.data()[static_cast<int64_t>(i) * row + k]) !=
              e.w_plus.data()[k])
            throw NumericalError("latent drifted from its inverted-set entry, id " +
                                 std::to_string(id));
        found = true;
        break;
      }
    if (!found)
      throw NumericalError("latent id missing from training pool: " + std::to_string(id));
  }
}

}  // namespace texbridge
