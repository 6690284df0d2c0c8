#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "texbridge/autodiff.hpp"
#include "texbridge/rng.hpp"
#include "texbridge/tensor.hpp"

namespace texbridge {

// ---------------------------------------------------------------------------
// parameter registry
// ---------------------------------------------------------------------------

template <typename S>
struct Param {
  std::string name;
  ad::Value<S> value;
  bool trainable = true;
};

/// Named parameters in stable registration order (the order checkpoints use).
template <typename S>
class ParamStore {
 public:
  ad::Value<S> add(const std::string& name, Tensor<S> init, bool trainable = true) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    ad::Value<S> v = ad::leaf(std::move(init), true);
    index_[name] = items_.size();
    items_.push_back(Param<S>{name, v, trainable});
    return v;
  }
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  const Param<S>& at(const std::string& name) const { return items_[index_.at(name)]; }
  ad::Value<S> value(const std::string& name) const { return at(name).value; }
  const std::vector<Param<S>>& items() const { return items_; }

  std::vector<std::pair<std::string, Tensor<S>>> state_dict() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    out.reserve(items_.size());
    for (const auto& p : items_) out.emplace_back(p.name, p.value->data);
    return out;
  }
  void load_state(const std::vector<std::pair<std::string, Tensor<S>>>& dict) {
    for (const auto& [name, t] : dict) {
      auto it = index_.find(name);
      if (it == index_.end()) throw std::runtime_error("unknown parameter in state: " + name);
      Param<S>& p = items_[it->second];
      if (p.value->data.shape() != t.shape())
        throw std::runtime_error("shape mismatch loading " + name + ": have " +
                                 shape_str(p.value->data.shape()) + " got " + shape_str(t.shape()));
      p.value->data = t;
    }
  }

 private:
  std::vector<Param<S>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// initializers
// ---------------------------------------------------------------------------

namespace init {

template <typename S>
Tensor<S> conv_weight(Rng& rng, int64_t out_c, int64_t in_c, int64_t k) {
  double std = 1.0 / std::sqrt(double(in_c * k * k));
  return rng.normal_tensor<S>({out_c, in_c, k, k}, std);
}

template <typename S>
Tensor<S> dense_weight(Rng& rng, int64_t in_d, int64_t out_d) {
  double std = 1.0 / std::sqrt(double(in_d));
  return rng.normal_tensor<S>({in_d, out_d}, std);
}

}  // namespace init

// ---------------------------------------------------------------------------
// generator
// ---------------------------------------------------------------------------

struct GeneratorConfig {
  int resolution = 64;
  int d_z = 64;
  int d_w = 64;
  // channels per synthesis/discriminator resolution
  std::map<int, int> channels = {{4, 48}, {8, 48}, {16, 32}, {32, 24}, {64, 16}, {128, 12}};
  double lrelu_slope = 0.2;

  int channel(int res) const {
    auto it = channels.find(res);
    if (it == channels.end()) throw std::invalid_argument("no channel count for resolution " + std::to_string(res));
    return it->second;
  }
};

/// one style vector per synthesis layer: conv4, then (conv0, conv1) per block
/// plus the final toRGB, with each toRGB sharing the following block's conv0 slot
inline int n_style_layers(int resolution) {
  int n = 0;
  for (int r = resolution; r >= 4; r /= 2) ++n;  // log2(R/4)+1 blocks
  return 2 * (n - 1) + 2;
}

template <typename S>
struct StyledConv {
  ad::Value<S> w;           // (O, C, k, k)
  ad::Value<S> b;           // (1, O, 1, 1)
  ad::Value<S> style_w;     // (d_w, C)
  ad::Value<S> style_b;     // (1, C)
  ad::Value<S> noise;       // (1, 1, H, W) fixed buffer (empty for toRGB)
  ad::Value<S> noise_gain;  // scalar
  int pad = 1;
  bool demodulate = true;
  bool act = true;

  void build(ParamStore<S>& ps, const std::string& prefix, Rng& rng, int64_t in_c, int64_t out_c,
             int64_t k, int64_t res, int64_t d_w, bool torgb) {
    w = ps.add(prefix + ".w", init::conv_weight<S>(rng, out_c, in_c, k));
    b = ps.add(prefix + ".b", Tensor<S>({1, out_c, 1, 1}));
    style_w = ps.add(prefix + ".style_w", init::dense_weight<S>(rng, d_w, in_c));
    style_b = ps.add(prefix + ".style_b", Tensor<S>::full({1, in_c}, S(1)));
    pad = static_cast<int>((k - 1) / 2);
    demodulate = !torgb;
    act = !torgb;
    if (!torgb) {
      noise = ps.add(prefix + ".noise", rng.normal_tensor<S>({1, 1, res, res}), /*trainable=*/false);
      noise_gain = ps.add(prefix + ".noise_gain", Tensor<S>::scalar(S(0)));
    }
  }

  // x: (B, C, H, W), style source w_vec: (B, d_w)
  ad::Value<S> forward(const ad::Value<S>& x, const ad::Value<S>& w_vec, double slope) const {
    using namespace ad;
    const int64_t B = x->data.dim(0), C = x->data.dim(1);
    const int64_t O = w->data.dim(0);
    Value<S> s = add(matmul(w_vec, style_w), style_b);  // (B, C)
    // conv(x*s, W) == conv(x, W*s): modulation without per-sample kernels
    Value<S> xm = mul(x, reshape(s, {B, C, 1, 1}));
    Value<S> y = conv2d(xm, w, pad);
    if (demodulate) {
      // sigma2[b,o] = sum_{c,k} (s[b,c] * W[o,c,k])^2  -- one matmul on squares
      Value<S> wsq = transpose2d(reshape(sum_axes(square(w), {2, 3}), {O, C}));  // (C, O)
      Value<S> sigma2 = matmul(square(s), wsq);                                  // (B, O)
      y = mul(y, reshape(rsqrt_eps(sigma2, S(1e-8)), {B, O, 1, 1}));
    }
    if (noise) y = add(y, mul(reshape(noise_gain, {1, 1, 1, 1}), noise));
    y = add(y, b);
    if (act) y = leaky_relu(y, S(slope));
    return y;
  }
};

template <typename S>
class MappingNet {
 public:
  void build(ParamStore<S>& ps, const std::string& prefix, Rng& rng, const GeneratorConfig& cfg) {
    slope_ = cfg.lrelu_slope;
    w1_ = ps.add(prefix + ".fc1.w", init::dense_weight<S>(rng, cfg.d_z, cfg.d_w));
    b1_ = ps.add(prefix + ".fc1.b", Tensor<S>({1, cfg.d_w}));
    w2_ = ps.add(prefix + ".fc2.w", init::dense_weight<S>(rng, cfg.d_w, cfg.d_w));
    b2_ = ps.add(prefix + ".fc2.b", Tensor<S>({1, cfg.d_w}));
  }

  // z: (B, d_z) -> w: (B, d_w)
  ad::Value<S> forward(const ad::Value<S>& z) const {
    using namespace ad;
    int64_t d = z->data.dim(1);
    Value<S> nrm = scale(sum_axes(square(z), {1}), S(1) / S(d));    // (B,1) mean of squares
    Value<S> zn = mul(z, rsqrt_eps(nrm, S(1e-8)));
    Value<S> h = leaky_relu(add(matmul(zn, w1_), b1_), S(slope_));
    return add(matmul(h, w2_), b2_);
  }

 private:
  ad::Value<S> w1_, b1_, w2_, b2_;
  double slope_ = 0.2;
};

template <typename S>
class Generator {
 public:
  GeneratorConfig cfg;
  ParamStore<S> params;

  explicit Generator(const GeneratorConfig& c, uint64_t seed) : cfg(c) {
    Rng rng = Rng(seed).derive("generator");
    mapping_.build(params, "mapping", rng, cfg);

    int64_t c4 = cfg.channel(4);
    const_ = params.add("synth.b4.const", rng.normal_tensor<S>({1, c4, 4, 4}));
    conv4_.build(params, "synth.b4.conv", rng, c4, c4, 3, 4, cfg.d_w, false);
    torgb4_.build(params, "synth.b4.torgb", rng, c4, 3, 1, 4, cfg.d_w, true);

    for (int r = 8; r <= cfg.resolution; r *= 2) {
      Block blk;
      int64_t ci = cfg.channel(r / 2), co = cfg.channel(r);
      std::string p = "synth.b" + std::to_string(r);
      blk.res = r;
      blk.conv0.build(params, p + ".conv0", rng, ci, co, 3, r, cfg.d_w, false);
      blk.conv1.build(params, p + ".conv1", rng, co, co, 3, r, cfg.d_w, false);
      blk.torgb.build(params, p + ".torgb", rng, co, 3, 1, r, cfg.d_w, true);
      blocks_.push_back(std::move(blk));
    }
  }

  int n_layers() const { return n_style_layers(cfg.resolution); }

  ad::Value<S> map_z(const ad::Value<S>& z) const { return mapping_.forward(z); }

  // styles: one (B, d_w) vector per layer, StyleGAN2 slot convention
  ad::Value<S> synthesize_styles(const std::vector<ad::Value<S>>& styles) const {
    using namespace ad;
    if (static_cast<int>(styles.size()) != n_layers())
      throw std::invalid_argument("expected " + std::to_string(n_layers()) + " style vectors, got " +
                                  std::to_string(styles.size()));
    const int64_t B = styles[0]->data.dim(0);
    Value<S> x = broadcast_to(const_, {B, const_->data.dim(1), 4, 4});
    x = conv4_.forward(x, styles[0], cfg.lrelu_slope);
    Value<S> rgb = torgb4_.forward(x, styles[1], cfg.lrelu_slope);
    int slot = 1;  // toRGB at res r shares its slot with conv0 at res 2r
    for (const Block& blk : blocks_) {
      x = blk.conv0.forward(upsample2_nearest(x), styles[slot], cfg.lrelu_slope);
      x = blk.conv1.forward(x, styles[slot + 1], cfg.lrelu_slope);
      rgb = add(upsample2_nearest(rgb), blk.torgb.forward(x, styles[slot + 2], cfg.lrelu_slope));
      slot += 2;
    }
    return sigmoid(rgb);  // squash to [0,1]
  }

  // w_plus: (B, n_layers, d_w)
  ad::Value<S> synthesize_wplus(const ad::Value<S>& wp) const {
    const int64_t B = wp->data.dim(0);
    std::vector<ad::Value<S>> styles;
    for (int l = 0; l < n_layers(); ++l)
      styles.push_back(ad::reshape(ad::narrow(wp, 1, l, 1), {B, wp->data.dim(2)}));
    return synthesize_styles(styles);
  }

  // z: (B, d_z): map once, broadcast the same w to every layer
  ad::Value<S> forward_z(const ad::Value<S>& z) const {
    ad::Value<S> w = map_z(z);
    std::vector<ad::Value<S>> styles(static_cast<size_t>(n_layers()), w);
    return synthesize_styles(styles);
  }

 private:
  struct Block {
    int res;
    StyledConv<S> conv0, conv1, torgb;
  };
  MappingNet<S> mapping_;
  ad::Value<S> const_;
  StyledConv<S> conv4_, torgb4_;
  std::vector<Block> blocks_;
};

/// frozen = mapping + synthesis blocks with resolution <= freeze_upto (0 = freeze nothing);
/// fixed buffers (noise) are always frozen regardless of the resolution rule
template <typename S>
void partition_trainables(const ParamStore<S>& params, int freeze_upto,
                          std::vector<std::string>* frozen, std::vector<std::string>* trainable) {
  frozen->clear();
  trainable->clear();
  for (const auto& p : params.items()) {
    bool is_frozen = !p.trainable;
    if (freeze_upto > 0) {
      if (p.name.rfind("mapping.", 0) == 0) is_frozen = true;
      if (p.name.rfind("synth.b", 0) == 0) {
        size_t dot = p.name.find('.', 7);
        int res = std::stoi(p.name.substr(7, dot - 7));
        if (res <= freeze_upto) is_frozen = true;
      }
    }
    (is_frozen ? frozen : trainable)->push_back(p.name);
  }
}

// ---------------------------------------------------------------------------
// discriminator
// ---------------------------------------------------------------------------

template <typename S>
class Discriminator {
 public:
  GeneratorConfig cfg;
  ParamStore<S> params;

  explicit Discriminator(const GeneratorConfig& c, uint64_t seed) : cfg(c) {
    Rng rng = Rng(seed).derive("discriminator");
    int64_t ctop = cfg.channel(cfg.resolution);
    from_rgb_w_ = params.add("disc.from_rgb.w", init::conv_weight<S>(rng, ctop, 3, 1));
    from_rgb_b_ = params.add("disc.from_rgb.b", Tensor<S>({1, ctop, 1, 1}));
    for (int r = cfg.resolution; r > 4; r /= 2) {
      Block blk;
      int64_t ci = cfg.channel(r), co = cfg.channel(r / 2);
      std::string p = "disc.b" + std::to_string(r);
      blk.w0 = params.add(p + ".conv0.w", init::conv_weight<S>(rng, ci, ci, 3));
      blk.b0 = params.add(p + ".conv0.b", Tensor<S>({1, ci, 1, 1}));
      blk.w1 = params.add(p + ".conv1.w", init::conv_weight<S>(rng, co, ci, 3));
      blk.b1 = params.add(p + ".conv1.b", Tensor<S>({1, co, 1, 1}));
      blocks_.push_back(std::move(blk));
    }
    int64_t c4 = cfg.channel(4);
    final_w_ = params.add("disc.final.conv.w", init::conv_weight<S>(rng, c4, c4, 3));
    final_b_ = params.add("disc.final.conv.b", Tensor<S>({1, c4, 1, 1}));
    fc_w_ = params.add("disc.final.fc.w", init::dense_weight<S>(rng, c4 * 16, c4));
    fc_b_ = params.add("disc.final.fc.b", Tensor<S>({1, c4}));
    out_w_ = params.add("disc.final.out.w", init::dense_weight<S>(rng, c4, 1));
    out_b_ = params.add("disc.final.out.b", Tensor<S>({1, 1}));
  }

  // img: (B, 3, R, R) -> logits (B, 1)
  ad::Value<S> forward(const ad::Value<S>& img) const {
    using namespace ad;
    const S slope = S(cfg.lrelu_slope);
    Value<S> x = leaky_relu(add(conv2d(img, from_rgb_w_, 0), from_rgb_b_), slope);
    for (const Block& blk : blocks_) {
      x = leaky_relu(add(conv2d(x, blk.w0, 1), blk.b0), slope);
      x = leaky_relu(add(conv2d(x, blk.w1, 1), blk.b1), slope);
      x = avgpool2(x);
    }
    x = leaky_relu(add(conv2d(x, final_w_, 1), final_b_), slope);
    const int64_t B = x->data.dim(0);
    x = reshape(x, {B, x->data.size() / B});
    x = leaky_relu(add(matmul(x, fc_w_), fc_b_), slope);
    return add(matmul(x, out_w_), out_b_);
  }

 private:
  struct Block {
    ad::Value<S> w0, b0, w1, b1;
  };
  ad::Value<S> from_rgb_w_, from_rgb_b_;
  std::vector<Block> blocks_;
  ad::Value<S> final_w_, final_b_, fc_w_, fc_b_, out_w_, out_b_;
};

// ---------------------------------------------------------------------------
// fixed perceptual feature bank
// ---------------------------------------------------------------------------

/// Multi-scale random (but fixed and seeded) conv filter bank. Stands in for a
/// pretrained perceptual network: distances in its feature space are stable,
/// differentiable, and zero exactly at equality.
template <typename S>
class FeatureExtractor {
 public:
  explicit FeatureExtractor(uint64_t seed = 0xFEA7, int n_scales = 3, int width = 16)
      : n_scales_(n_scales) {
    Rng rng = Rng(seed).derive("feature_bank");
    f1_ = ad::constant(init::conv_weight<S>(rng, width, 3, 3));
    f2_ = ad::constant(init::conv_weight<S>(rng, width, width, 3));
  }

  // feature maps at each scale and depth; all differentiable graph values
  std::vector<ad::Value<S>> features(const ad::Value<S>& img) const {
    using namespace ad;
    std::vector<Value<S>> out;
    Value<S> x = img;
    for (int s = 0; s < n_scales_; ++s) {
      Value<S> h1 = leaky_relu(conv2d(x, f1_, 1), S(0.2));
      Value<S> h2 = leaky_relu(conv2d(h1, f2_, 1), S(0.2));
      out.push_back(h1);
      out.push_back(h2);
      if (s + 1 < n_scales_) x = avgpool2(x);
    }
    return out;
  }

  // channelwise unit-normalized feature difference plus a pixel term;
  // zero iff images are equal, symmetric by construction
  ad::Value<S> distance(const ad::Value<S>& a, const ad::Value<S>& b) const {
    using namespace ad;
    if (a->data.shape() != b->data.shape())
      throw std::invalid_argument("perceptual distance: shape mismatch");
    Value<S> d = mse(a, b);
    auto fa = features(a);
    auto fb = features(b);
    for (size_t i = 0; i < fa.size(); ++i) d = add(d, mse(unit_norm(fa[i]), unit_norm(fb[i])));
    return d;
  }

  // spatial mean of every feature channel, for set-level statistics
  Tensor<S> pooled(const Tensor<S>& img) const {
    ad::NoGradGuard ng;
    auto fs = features(ad::constant(img));
    std::vector<S> vals;
    for (const auto& f : fs) {
      Tensor<S> m = texbridge::sum_axes(f->data, {0, 2, 3});
      S inv = S(1) / S(f->data.dim(0) * f->data.dim(2) * f->data.dim(3));
      for (int64_t i = 0; i < m.size(); ++i) vals.push_back(m[i] * inv);
    }
    const int64_t n = static_cast<int64_t>(vals.size());
    return Tensor<S>({n}, std::move(vals));
  }

  int64_t pooled_dim() const { return n_scales_ * (f1_->data.dim(0) + f2_->data.dim(0)); }

 private:
  static ad::Value<S> unit_norm(const ad::Value<S>& f) {
    using namespace ad;
    int64_t C = f->data.dim(1);
    Value<S> nrm = scale(sum_axes(square(f), {1}), S(1) / S(C));
    return mul(f, rsqrt_eps(nrm, S(1e-8)));
  }

  int n_scales_;
  ad::Value<S> f1_, f2_;
};

// ---------------------------------------------------------------------------
// identity embedder
// ---------------------------------------------------------------------------

template <typename S>
class IdentityEmbedder {
 public:
  ParamStore<S> params;
  int input_res = 32;
  int d_id = 32;

  IdentityEmbedder(int n_classes, uint64_t seed, int d_id_ = 32) : d_id(d_id_) {
    Rng rng = Rng(seed).derive("embedder");
    w0_ = params.add("emb.conv0.w", init::conv_weight<S>(rng, 16, 3, 3));
    b0_ = params.add("emb.conv0.b", Tensor<S>({1, 16, 1, 1}));
    w1_ = params.add("emb.conv1.w", init::conv_weight<S>(rng, 32, 16, 3));
    b1_ = params.add("emb.conv1.b", Tensor<S>({1, 32, 1, 1}));
    w2_ = params.add("emb.conv2.w", init::conv_weight<S>(rng, 32, 32, 3));
    b2_ = params.add("emb.conv2.b", Tensor<S>({1, 32, 1, 1}));
    fc_w_ = params.add("emb.fc.w", init::dense_weight<S>(rng, 32 * 4 * 4, d_id));
    fc_b_ = params.add("emb.fc.b", Tensor<S>({1, d_id}));
    cls_w_ = params.add("emb.cls.w", init::dense_weight<S>(rng, d_id, n_classes));
    cls_b_ = params.add("emb.cls.b", Tensor<S>({1, n_classes}));
  }

  // penultimate activations, before normalization: (B, d_id)
  ad::Value<S> penultimate(const ad::Value<S>& img) const {
    using namespace ad;
    Value<S> x = img;
    if (x->data.dim(2) != input_res || x->data.dim(3) != input_res)
      x = resize_bilinear(x, input_res, input_res);
    x = avgpool2(leaky_relu(add(conv2d(x, w0_, 1), b0_), S(0.2)));  // 16
    x = avgpool2(leaky_relu(add(conv2d(x, w1_, 1), b1_), S(0.2)));  // 8
    x = avgpool2(leaky_relu(add(conv2d(x, w2_, 1), b2_), S(0.2)));  // 4
    const int64_t B = x->data.dim(0);
    x = reshape(x, {B, x->data.size() / B});
    return add(matmul(x, fc_w_), fc_b_);
  }

  // unit-normalized embedding: (B, d_id), L2 norm 1 per row
  ad::Value<S> embed(const ad::Value<S>& img) const {
    using namespace ad;
    Value<S> h = penultimate(img);
    Value<S> nrm = sum_axes(square(h), {1});
    return mul(h, rsqrt_eps(nrm, S(1e-12)));
  }

  ad::Value<S> logits(const ad::Value<S>& img) const {
    return ad::add(ad::matmul(penultimate(img), cls_w_), cls_b_);
  }

 private:
  ad::Value<S> w0_, b0_, w1_, b1_, w2_, b2_, fc_w_, fc_b_, cls_w_, cls_b_;
};

/// numerically stable softmax cross-entropy; labels as dense one-hot rows
template <typename S>
ad::Value<S> softmax_cross_entropy(const ad::Value<S>& logits, const Tensor<S>& one_hot) {
  using namespace ad;
  const int64_t B = logits->data.dim(0), K = logits->data.dim(1);
  // subtracting the (detached) row max leaves gradients unchanged
  Tensor<S> mx({B, 1});
  for (int64_t i = 0; i < B; ++i) {
    S m = logits->data.at(i, 0);
    for (int64_t j = 1; j < K; ++j) m = std::max(m, logits->data.at(i, j));
    mx[i] = m;
  }
  Value<S> shifted = sub(logits, constant(mx));
  Value<S> lse = log(sum_axes(exp(shifted), {1}));  // (B,1)
  Value<S> picked = sum_axes(mul(shifted, constant(one_hot)), {1});
  return mean_all(sub(lse, picked));
}

// ---------------------------------------------------------------------------
// denoiser (small u-net)
// ---------------------------------------------------------------------------

struct DenoiserConfig {
  int in_ch = 6;  // noisy state + conditioned low-res, concatenated
  int c0 = 24;
  int c1 = 32;
  int temb_dim = 32;
};

template <typename S>
class Denoiser {
 public:
  DenoiserConfig cfg;
  ParamStore<S> params;

  explicit Denoiser(const DenoiserConfig& c, uint64_t seed) : cfg(c) {
    Rng rng = Rng(seed).derive("denoiser");
    auto conv = [&](const std::string& n, int64_t o, int64_t i, int64_t k) {
      return std::make_pair(params.add(n + ".w", init::conv_weight<S>(rng, o, i, k)),
                            params.add(n + ".b", Tensor<S>({1, o, 1, 1})));
    };
    auto temb = [&](const std::string& n, int64_t o) {
      return std::make_pair(params.add(n + ".w", init::dense_weight<S>(rng, cfg.temb_dim, o)),
                            params.add(n + ".b", Tensor<S>({1, o})));
    };
    e0c0_ = conv("den.enc0.conv0", cfg.c0, cfg.in_ch, 3);
    e0t_ = temb("den.enc0.temb", cfg.c0);
    e0c1_ = conv("den.enc0.conv1", cfg.c0, cfg.c0, 3);
    e1c0_ = conv("den.enc1.conv0", cfg.c1, cfg.c0, 3);
    e1t_ = temb("den.enc1.temb", cfg.c1);
    e1c1_ = conv("den.enc1.conv1", cfg.c1, cfg.c1, 3);
    dc0_ = conv("den.dec.conv0", cfg.c0, cfg.c0 + cfg.c1, 3);
    dt_ = temb("den.dec.temb", cfg.c0);
    dc1_ = conv("den.dec.conv1", cfg.c0, cfg.c0, 3);
    out_ = conv("den.out", 3, cfg.c0, 1);
  }

  // sinusoidal embedding of integer timesteps, one row per batch element
  Tensor<S> t_embedding(const std::vector<int>& ts) const {
    const int d = cfg.temb_dim;
    Tensor<S> e({static_cast<int64_t>(ts.size()), d});
    for (size_t b = 0; b < ts.size(); ++b)
      for (int i = 0; i < d / 2; ++i) {
        double freq = std::pow(10000.0, -double(i) / double(d / 2));
        e.at(static_cast<int64_t>(b), 2 * i) = static_cast<S>(std::sin(ts[b] * freq));
        e.at(static_cast<int64_t>(b), 2 * i + 1) = static_cast<S>(std::cos(ts[b] * freq));
      }
    return e;
  }

  // x_t, cond: (B,3,H,W); predicts x0. The conditioned low-res enters both the
  // conv stack and a residual skip, so the net starts near the identity on cond.
  ad::Value<S> forward(const ad::Value<S>& x_t, const ad::Value<S>& cond,
                       const std::vector<int>& ts) const {
    using namespace ad;
    const int64_t B = x_t->data.dim(0);
    Value<S> emb = constant(t_embedding(ts));
    auto tbias = [&](const std::pair<ad::Value<S>, ad::Value<S>>& te, int64_t ch) {
      return reshape(add(matmul(emb, te.first), te.second), {B, ch, 1, 1});
    };
    Value<S> x = concat<S>({x_t, cond}, 1);
    Value<S> h0 = leaky_relu(add(add(conv2d(x, e0c0_.first, 1), e0c0_.second), tbias(e0t_, cfg.c0)), S(0.2));
    h0 = leaky_relu(add(conv2d(h0, e0c1_.first, 1), e0c1_.second), S(0.2));
    Value<S> h1 = avgpool2(h0);
    h1 = leaky_relu(add(add(conv2d(h1, e1c0_.first, 1), e1c0_.second), tbias(e1t_, cfg.c1)), S(0.2));
    h1 = leaky_relu(add(conv2d(h1, e1c1_.first, 1), e1c1_.second), S(0.2));
    Value<S> u = concat<S>({upsample2_nearest(h1), h0}, 1);
    u = leaky_relu(add(add(conv2d(u, dc0_.first, 1), dc0_.second), tbias(dt_, cfg.c0)), S(0.2));
    u = leaky_relu(add(conv2d(u, dc1_.first, 1), dc1_.second), S(0.2));
    return add(add(conv2d(u, out_.first, 0), out_.second), cond);
  }

 private:
  using ConvP = std::pair<ad::Value<S>, ad::Value<S>>;
  ConvP e0c0_, e0c1_, e1c0_, e1c1_, dc0_, dc1_, out_;
  ConvP e0t_, e1t_, dt_;
};

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Adam with the GAN-typical (beta1=0, beta2=0.99) defaults.
template <typename S>
class Adam {
 public:
  double lr = 1e-3, beta1 = 0.0, beta2 = 0.99, eps = 1e-8;

  Adam() = default;
  explicit Adam(double lr_) : lr(lr_) {}

  void step(const std::vector<ad::Value<S>>& params, const std::vector<ad::Value<S>>& grads) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1, double(t_));
    double bc2 = 1.0 - std::pow(beta2, double(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor<S>& p = params[i]->data;
      const Tensor<S>& g = grads[i]->data;
      auto& [m, v] = state_[params[i].get()];
      if (m.size() != p.size()) {
        m = Tensor<S>(p.shape());
        v = Tensor<S>(p.shape());
      }
      for (int64_t j = 0; j < p.size(); ++j) {
        double gj = double(g[j]);
        double mj = beta1 * double(m[j]) + (1 - beta1) * gj;
        double vj = beta2 * double(v[j]) + (1 - beta2) * gj * gj;
        m[j] = static_cast<S>(mj);
        v[j] = static_cast<S>(vj);
        p[j] -= static_cast<S>(lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps));
      }
    }
  }

 private:
  std::unordered_map<ad::Node<S>*, std::pair<Tensor<S>, Tensor<S>>> state_;
  int64_t t_ = 0;
};

}  // namespace texbridge
