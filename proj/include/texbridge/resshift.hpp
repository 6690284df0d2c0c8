#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "texbridge/autodiff.hpp"
#include "texbridge/errors.hpp"
#include "texbridge/nets.hpp"
#include "texbridge/rng.hpp"
#include "texbridge/tensor.hpp"

namespace texbridge {

// Residual-shifting diffusion super-resolver. The forward chain moves the
// state from the high-res image toward the (upsampled) low-res image by adding
// fractions alpha_t of the residual e0 = lr - hr plus Gaussian noise of scale
// kappa^2 * alpha_t; the learned reverse chain walks back. Detail conditioning
// mixes a gradient-magnitude map of the phone capture into the low-res input
// so high-frequency content survives the round trip.

struct DiffusionSchedule {
  int T = 0;
  double kappa = 0;
  std::vector<double> eta;    // size T+1; eta[0] = 0, cumulative shift
  std::vector<double> alpha;  // size T+1; alpha[0] = 0 unused, alpha[t] = eta[t]-eta[t-1]
};

// sqrt(eta[t]) geometric from sqrt(eta1) at t=1 to sqrt(etaT) at t=T. eta is
// built as a running left-fold over alpha so the identity
// eta[t] == alpha[1] + ... + alpha[t] holds bitwise at every t.
DiffusionSchedule make_schedule(int T, double kappa, double eta1, double etaT);

std::string schedule_to_json(const DiffusionSchedule& sched);
DiffusionSchedule schedule_from_json(const std::string& text);

// reverse-posterior mean weights for (x_t, x0_hat); they sum to 1 exactly
inline std::pair<double, double> reverse_coeffs(const DiffusionSchedule& sched, int t) {
  double c0 = sched.alpha[static_cast<size_t>(t)] / sched.eta[static_cast<size_t>(t)];
  return {1.0 - c0, c0};
}

template <class S>
struct ResidualPair {
  Tensor<S> hr;             // (3,H,W)
  Tensor<S> lr_on_hr_grid;  // (3,H,W), low-res content on the high-res grid
  Tensor<S> e0;             // lr_on_hr_grid - hr
};

template <class S>
ResidualPair<S> make_residual_pair(Tensor<S> hr, Tensor<S> lr_on_hr_grid) {
  if (hr.shape() != lr_on_hr_grid.shape())
    throw std::invalid_argument("residual pair shapes differ: " + shape_str(hr.shape()) + " vs " +
                                shape_str(lr_on_hr_grid.shape()));
  ResidualPair<S> p;
  p.e0 = Tensor<S>(hr.shape());
  for (int64_t i = 0; i < hr.size(); ++i) p.e0.data()[i] = lr_on_hr_grid.data()[i] - hr.data()[i];
  p.hr = std::move(hr);
  p.lr_on_hr_grid = std::move(lr_on_hr_grid);
  return p;
}

// (3,H,W) -> (3,Ho,Wo) align-corners bilinear, convenience over the 4-d kernel
template <class S>
Tensor<S> upsample_image(const Tensor<S>& img, int64_t Ho, int64_t Wo) {
  Tensor<S> x = img;
  Tensor<S> up = resize_bilinear(x.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}), Ho, Wo);
  return up.reshaped({img.dim(0), Ho, Wo});
}

namespace rsdetail {

inline void check_t(int t, const DiffusionSchedule& sched, int lo) {
  if (t < lo || t > sched.T)
    throw std::invalid_argument("diffusion step t=" + std::to_string(t) + " outside [" +
                                std::to_string(lo) + "," + std::to_string(sched.T) + "]");
}

// out = a + coef*b + noise_std*xi, elementwise; skips the rng draw when the
// noise scale is exactly zero so zero-noise limits are exact
template <class S>
Tensor<S> shift_sample(const Tensor<S>& a, const Tensor<S>& b, double coef, double noise_std,
                       Rng& rng) {
  Tensor<S> out(a.shape());
  if (noise_std > 0) {
    Tensor<S> xi = rng.template normal_tensor<S>(a.shape());
    for (int64_t i = 0; i < a.size(); ++i)
      out.data()[i] = static_cast<S>(a.data()[i] + coef * b.data()[i] +
                                     noise_std * xi.data()[i]);
  } else {
    for (int64_t i = 0; i < a.size(); ++i)
      out.data()[i] = static_cast<S>(a.data()[i] + coef * b.data()[i]);
  }
  return out;
}

}  // namespace rsdetail

// one forward hop: x_t ~ N(x_prev + alpha_t*e0, kappa^2*alpha_t*I)
template <class S>
Tensor<S> forward_step(const Tensor<S>& x_prev, const Tensor<S>& e0, int t,
                       const DiffusionSchedule& sched, Rng& rng) {
  rsdetail::check_t(t, sched, 1);
  double a = sched.alpha[static_cast<size_t>(t)];
  return rsdetail::shift_sample(x_prev, e0, a, sched.kappa * std::sqrt(a), rng);
}

// closed-form marginal: x_t ~ N(x0 + eta_t*e0, kappa^2*eta_t*I); t=0 returns x0
template <class S>
Tensor<S> forward_marginal(const Tensor<S>& x0, const Tensor<S>& e0, int t,
                           const DiffusionSchedule& sched, Rng& rng) {
  rsdetail::check_t(t, sched, 0);
  if (t == 0) return x0;
  double h = sched.eta[static_cast<size_t>(t)];
  return rsdetail::shift_sample(x0, e0, h, sched.kappa * std::sqrt(h), rng);
}

// x_{t-1} ~ N((1-c)*x_t + c*x0_hat, kappa^2*(eta_{t-1}/eta_t)*alpha_t*I) with
// c = alpha_t/eta_t; at t=1 the variance is zero and the step returns x0_hat
template <class S>
Tensor<S> reverse_step(const Tensor<S>& x_t, const Tensor<S>& x0_hat, int t,
                       const DiffusionSchedule& sched, Rng& rng) {
  rsdetail::check_t(t, sched, 1);
  auto [c_prev, c0] = reverse_coeffs(sched, t);
  double var = sched.kappa * sched.kappa * (sched.eta[static_cast<size_t>(t - 1)] /
                                            sched.eta[static_cast<size_t>(t)]) *
               sched.alpha[static_cast<size_t>(t)];
  Tensor<S> mean(x_t.shape());
  for (int64_t i = 0; i < x_t.size(); ++i)
    mean.data()[i] = static_cast<S>(c_prev * x_t.data()[i] + c0 * x0_hat.data()[i]);
  if (var <= 0) return mean;
  Tensor<S> xi = rng.template normal_tensor<S>(x_t.shape());
  double sd = std::sqrt(var);
  for (int64_t i = 0; i < mean.size(); ++i)
    mean.data()[i] = static_cast<S>(mean.data()[i] + sd * xi.data()[i]);
  return mean;
}

// ---------------------------------------------------------------------------
// detail conditioning
// ---------------------------------------------------------------------------

enum class GradOp { sobel_mag, central_diff_mag };

// per-channel gradient magnitude with replicate borders; both operators are
// normalized so a linear ramp of slope s reports |s| in the interior
template <class S>
Tensor<S> gradient_magnitude(const Tensor<S>& img, GradOp op) {
  const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor<S> out(img.shape());
  auto px = [&](int64_t c, int64_t y, int64_t x) {
    y = std::clamp<int64_t>(y, 0, H - 1);
    x = std::clamp<int64_t>(x, 0, W - 1);
    return static_cast<double>(img.data()[(c * H + y) * W + x]);
  };
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double gx, gy;
        if (op == GradOp::central_diff_mag) {
          gx = (px(c, y, x + 1) - px(c, y, x - 1)) / 2;
          gy = (px(c, y + 1, x) - px(c, y - 1, x)) / 2;
        } else {
          // paired differences so a constant image cancels exactly
          gx = ((px(c, y - 1, x + 1) - px(c, y - 1, x - 1)) +
                2 * (px(c, y, x + 1) - px(c, y, x - 1)) +
                (px(c, y + 1, x + 1) - px(c, y + 1, x - 1))) /
               8;
          gy = ((px(c, y + 1, x - 1) - px(c, y - 1, x - 1)) +
                2 * (px(c, y + 1, x) - px(c, y - 1, x)) +
                (px(c, y + 1, x + 1) - px(c, y - 1, x + 1))) /
               8;
        }
        out.data()[(c * H + y) * W + x] = static_cast<S>(std::sqrt(gx * gx + gy * gy));
      }
  return out;
}

// conditioned low-res input: lr + scale * gradmag(phone), per channel
template <class S>
Tensor<S> grad_condition(const Tensor<S>& lr_on_hr_grid, const Tensor<S>& phone_hr, GradOp op,
                         double scale) {
  if (lr_on_hr_grid.shape() != phone_hr.shape())
    throw std::invalid_argument("grad_condition shape mismatch: " +
                                shape_str(lr_on_hr_grid.shape()) + " vs " +
                                shape_str(phone_hr.shape()));
  Tensor<S> g = gradient_magnitude(phone_hr, op);
  Tensor<S> out(lr_on_hr_grid.shape());
  for (int64_t i = 0; i < out.size(); ++i)
    out.data()[i] = static_cast<S>(lr_on_hr_grid.data()[i] + scale * g.data()[i]);
  return out;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

enum class CondMode { vanilla, infer_only_cond, train_and_infer_cond };

inline const char* cond_mode_name(CondMode m) {
  switch (m) {
    case CondMode::vanilla: return "vanilla";
    case CondMode::infer_only_cond: return "infer_only_cond";
    default: return "train_and_infer_cond";
  }
}
CondMode cond_mode_from_name(const std::string& name);

template <class S>
struct DiffusionExample {
  Tensor<S> hr;             // (3,H,W) ground truth
  Tensor<S> lr_on_hr_grid;  // (3,H,W)
  Tensor<S> phone_hr;       // (3,H,W) detail source for conditioning
};

struct DiffusionTrainConfig {
  int steps = 600;
  int batch = 8;
  int crop = 32;
  double lr = 2e-3;
  double lr_final_frac = 0.05;  // cosine decay floor as a fraction of lr
  uint64_t seed = 0;
  CondMode mode = CondMode::train_and_infer_cond;
  GradOp grad_op = GradOp::sobel_mag;
  double cond_scale = 0.5;
};

// denoising objective on an already-sampled noisy state: mean squared error
// between the x0 prediction and the truth
template <class S>
ad::Value<S> diffusion_loss(const Denoiser<S>& net, const Tensor<S>& x0, const Tensor<S>& cond,
                            const Tensor<S>& x_t, const std::vector<int>& ts) {
  using namespace ad;
  Value<S> pred = net.forward(constant<S>(x_t), constant<S>(cond), ts);
  return mean_all(square(sub(pred, constant<S>(x0))));
}

template <class S>
std::vector<double> train_denoiser(Denoiser<S>& net, const std::vector<DiffusionExample<S>>& data,
                                   const DiffusionSchedule& sched,
                                   const DiffusionTrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
  const bool train_cond = cfg.mode == CondMode::train_and_infer_cond;
  const int64_t C = 3, crop = cfg.crop;
  std::vector<Tensor<S>> conds, e0s;
  for (const auto& ex : data) {
    Tensor<S> y = train_cond ? grad_condition(ex.lr_on_hr_grid, ex.phone_hr, cfg.grad_op,
                                              cfg.cond_scale)
                             : ex.lr_on_hr_grid;
    Tensor<S> e0(ex.hr.shape());
    for (int64_t i = 0; i < e0.size(); ++i) e0.data()[i] = y.data()[i] - ex.hr.data()[i];
    conds.push_back(std::move(y));
    e0s.push_back(std::move(e0));
  }

  std::vector<ad::Value<S>> params;
  for (const auto& p : net.params.items()) params.push_back(p.value);
  Adam<S> opt(cfg.lr);
  Rng root = Rng(cfg.seed).derive("train_denoiser");
  std::vector<double> log;
  log.reserve(static_cast<size_t>(cfg.steps));

  for (int step = 0; step < cfg.steps; ++step) {
    double frac = cfg.steps > 1 ? double(step) / double(cfg.steps - 1) : 0.0;
    opt.lr = cfg.lr * (cfg.lr_final_frac +
                       (1.0 - cfg.lr_final_frac) * 0.5 * (1.0 + std::cos(frac * M_PI)));
    Rng rng = root.derive(static_cast<uint64_t>(step));
    Tensor<S> x0({cfg.batch, C, crop, crop}), cond({cfg.batch, C, crop, crop}),
        x_t({cfg.batch, C, crop, crop});
    std::vector<int> ts(static_cast<size_t>(cfg.batch));
    for (int b = 0; b < cfg.batch; ++b) {
      int64_t k = static_cast<int64_t>(rng.uniform_int(static_cast<int64_t>(data.size())));
      const Tensor<S>& hr = data[static_cast<size_t>(k)].hr;
      const int64_t H = hr.dim(1), W = hr.dim(2);
      if (H < crop || W < crop)
        throw std::invalid_argument("training image smaller than crop size");
      int64_t oy = static_cast<int64_t>(rng.uniform_int(H - crop + 1));
      int64_t ox = static_cast<int64_t>(rng.uniform_int(W - crop + 1));
      int t = 1 + static_cast<int>(rng.uniform_int(sched.T));
      ts[static_cast<size_t>(b)] = t;
      double h = sched.eta[static_cast<size_t>(t)];
      double sd = sched.kappa * std::sqrt(h);
      Tensor<S> xi = rng.template normal_tensor<S>({C, crop, crop});
      for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < crop; ++y)
          for (int64_t x = 0; x < crop; ++x) {
            S v0 = hr.data()[(c * H + oy + y) * W + ox + x];
            S e = e0s[static_cast<size_t>(k)].data()[(c * H + oy + y) * W + ox + x];
            S yc = conds[static_cast<size_t>(k)].data()[(c * H + oy + y) * W + ox + x];
            x0.at(b, c, y, x) = v0;
            cond.at(b, c, y, x) = yc;
            x_t.at(b, c, y, x) = static_cast<S>(v0 + h * e + sd * xi.at(c, y, x));
          }
    }
    ad::Value<S> loss = diffusion_loss(net, x0, cond, x_t, ts);
    double lv = static_cast<double>(loss->data.item());
    if (!std::isfinite(lv))
      throw NumericalError("diffusion training loss non-finite at step " + std::to_string(step));
    std::vector<ad::Value<S>> grads = ad::gradients(loss, params, /*build_graph=*/false);
    opt.step(params, grads);
    log.push_back(lv);
  }
  return log;
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

// x0 predictor given (x_t (3,H,W), cond (3,H,W), t)
template <class S>
using DenoiseFn = std::function<Tensor<S>(const Tensor<S>&, const Tensor<S>&, int)>;

// reverse chain from x_T ~ N(y_cond, kappa^2*eta_T*I) down to x_0 (unclipped)
template <class S>
Tensor<S> sample_loop(const Tensor<S>& y_cond, const DenoiseFn<S>& fn,
                      const DiffusionSchedule& sched, Rng& rng) {
  if (sched.T < 1) throw std::invalid_argument("schedule has no steps");
  double sd = sched.kappa * std::sqrt(sched.eta[static_cast<size_t>(sched.T)]);
  Tensor<S> x(y_cond.shape());
  if (sd > 0) {
    Tensor<S> xi = rng.template normal_tensor<S>(y_cond.shape());
    for (int64_t i = 0; i < x.size(); ++i)
      x.data()[i] = static_cast<S>(y_cond.data()[i] + sd * xi.data()[i]);
  } else {
    x = y_cond;
  }
  for (int t = sched.T; t >= 1; --t) {
    Tensor<S> x0_hat = fn(x, y_cond, t);
    if (x0_hat.shape() != x.shape())
      throw std::invalid_argument("denoiser output shape mismatch");
    x = reverse_step(x, x0_hat, t, sched, rng);
  }
  return x;
}

template <class S>
struct SampleOptions {
  CondMode mode = CondMode::train_and_infer_cond;
  GradOp grad_op = GradOp::sobel_mag;
  double cond_scale = 0.5;
  uint64_t seed = 0;
};

// full conditioned super-resolution pass; output clipped to [0,1]
template <class S>
Tensor<S> sample(const Tensor<S>& lr_on_hr_grid, const Tensor<S>& phone_hr,
                 const Denoiser<S>& net, const DiffusionSchedule& sched,
                 const SampleOptions<S>& opt) {
  Tensor<S> y = opt.mode == CondMode::vanilla
                    ? lr_on_hr_grid
                    : grad_condition(lr_on_hr_grid, phone_hr, opt.grad_op, opt.cond_scale);
  DenoiseFn<S> fn = [&](const Tensor<S>& x_t, const Tensor<S>& cond, int t) {
    ad::NoGradGuard ng;
    const int64_t C = x_t.dim(0), H = x_t.dim(1), W = x_t.dim(2);
    Tensor<S> xb = x_t;
    Tensor<S> cb = cond;
    ad::Value<S> pred = net.forward(ad::constant<S>(xb.reshaped({1, C, H, W})),
                                    ad::constant<S>(cb.reshaped({1, C, H, W})), {t});
    return pred->data.reshaped({C, H, W});
  };
  Rng rng = Rng(opt.seed).derive("resshift_sample");
  Tensor<S> out = sample_loop(y, fn, sched, rng);
  for (int64_t i = 0; i < out.size(); ++i)
    out.data()[i] = std::clamp(out.data()[i], S(0), S(1));
  return out;
}

}  // namespace texbridge
