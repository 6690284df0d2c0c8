#pragma once

#include <cstdint>
#include <string>

#include "texbridge/checkpoint.hpp"
#include "texbridge/tensor.hpp"

namespace texbridge {

// Low-frequency color correction: a k x k per-channel gain and bias field,
// bilinearly upsampled to the image grid, mapping phone-lit textures toward
// studio lighting. Fitting is linear least squares with a small ridge pulling
// (gain, bias) toward the identity (1, 0).

struct ColorTransform {
  TensorF gain;  // (3,k,k)
  TensorF bias;  // (3,k,k)
  int k = 0;
  int source_res = 0;  // image resolution the transform was fit at
  // fit diagnostics (not persisted)
  double residual_sse = 0;  // data-term sum of squares at the solution
  double grad_norm = 0;     // objective gradient norm at the solution
};

struct ColorFitOptions {
  int k = 32;
  double ridge = 1e-6;
  enum class Solver { auto_pick, normal_eq, conj_grad };
  Solver solver = Solver::auto_pick;  // auto: normal equations for k <= 8
  int max_iters = 20000;
  double tol_scale = 1e-8;  // gradient-norm target relative to problem scale
  // optional warm start (3,k,k); defaults to gain=1, bias=0
  const TensorF* init_gain = nullptr;
  const TensorF* init_bias = nullptr;
};

// (C,k,k) map -> (C,res,res), separable align-corners bilinear
TensorF bilinear_resize(const TensorF& map, int target_res);

// minimizes ||studio - (Rsz(G)*phone + Rsz(B))||^2 + ridge*(||G-1||^2 + ||B||^2)
ColorTransform fit_gain_bias(const TensorF& studio, const TensorF& phone,
                             const ColorFitOptions& opt = {});

// Rsz(G)*img + Rsz(B), clipped to [0,1]; reports how many values were clipped
TensorF apply_transform(const ColorTransform& xf, const TensorF& img,
                        int64_t* n_clipped = nullptr);

// unclipped evaluation, used for residual accounting
TensorF apply_transform_raw(const ColorTransform& xf, const TensorF& img);

void color_transform_to_checkpoint(const ColorTransform& xf, Checkpoint& ckpt,
                                   const std::string& prefix);
ColorTransform color_transform_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix);

}  // namespace texbridge
