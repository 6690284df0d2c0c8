#include "texbridge/colorxform.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "texbridge/errors.hpp"

namespace texbridge {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// one color channel as a double image (1,1,R,R)
Tensor<double> channel_image(const TensorF& img, int64_t c) {
  const int64_t R = img.dim(1);
  Tensor<double> out({1, 1, R, R});
  for (int64_t i = 0; i < R * R; ++i)
    out.data()[i] = static_cast<double>(img.data()[c * R * R + i]);
  return out;
}

Tensor<double> vec_to_map(const VectorXd& v, int64_t off, int k) {
  Tensor<double> m({1, 1, k, k});
  for (int64_t i = 0; i < k * k; ++i) m.data()[i] = v[off + i];
  return m;
}

// least-squares operator for one channel: x = [g; b] (length 2k^2),
// A x = Rsz(g) * phone + Rsz(b); matvec applies A^T A + ridge I
struct ChannelLS {
  const Tensor<double>& phone;  // (1,1,R,R)
  int R, k;
  double ridge;

  VectorXd apply_At(const Tensor<double>& r) const {
    Tensor<double> rp({1, 1, R, R});
    for (int64_t i = 0; i < R * R; ++i) rp.data()[i] = r.data()[i] * phone.data()[i];
    Tensor<double> ag = resize_bilinear_adjoint(rp, k, k);
    Tensor<double> ab = resize_bilinear_adjoint(r, k, k);
    VectorXd out(2 * k * k);
    for (int64_t i = 0; i < k * k; ++i) {
      out[i] = ag.data()[i];
      out[k * k + i] = ab.data()[i];
    }
    return out;
  }

  Tensor<double> apply_A(const VectorXd& x) const {
    Tensor<double> ug = resize_bilinear(vec_to_map(x, 0, k), R, R);
    Tensor<double> ub = resize_bilinear(vec_to_map(x, k * k, k), R, R);
    Tensor<double> out({1, 1, R, R});
    for (int64_t i = 0; i < R * R; ++i)
      out.data()[i] = ug.data()[i] * phone.data()[i] + ub.data()[i];
    return out;
  }

  VectorXd matvec(const VectorXd& x) const { return apply_At(apply_A(x)) + ridge * x; }
};

VectorXd identity_start(int k) {
  VectorXd x0 = VectorXd::Zero(2 * k * k);
  x0.head(k * k).setOnes();
  return x0;
}

}  // namespace

TensorF bilinear_resize(const TensorF& map, int target_res) {
  if (map.rank() != 3 || map.dim(1) < 1) throw std::invalid_argument("expected a (C,k,k) map");
  const int64_t C = map.dim(0), k = map.dim(1);
  TensorF m = map;
  TensorF out = resize_bilinear(m.reshaped({1, C, k, k}), target_res, target_res);
  return out.reshaped({C, target_res, target_res});
}

ColorTransform fit_gain_bias(const TensorF& studio, const TensorF& phone,
                             const ColorFitOptions& opt) {
  if (studio.shape() != phone.shape() || studio.rank() != 3)
    throw std::invalid_argument("fit_gain_bias wants two (3,R,R) images of equal shape");
  const int R = static_cast<int>(studio.dim(1));
  if (opt.k < 1 || opt.k > R) throw std::invalid_argument("k must satisfy 1 <= k <= resolution");
  if (!(opt.ridge >= 0)) throw std::invalid_argument("ridge must be non-negative");
  for (int64_t i = 0; i < studio.size(); ++i)
    if (!std::isfinite(studio.data()[i]) || !std::isfinite(phone.data()[i]))
      throw NumericalError("non-finite pixels passed to color-transform fit");

  const int k = opt.k;
  const int64_t n = 2LL * k * k;
  const bool use_normal = opt.solver == ColorFitOptions::Solver::normal_eq ||
                          (opt.solver == ColorFitOptions::Solver::auto_pick && k <= 8);

  ColorTransform xf;
  xf.k = k;
  xf.source_res = R;
  xf.gain = TensorF({3, k, k});
  xf.bias = TensorF({3, k, k});

  double grad_sq = 0, sse = 0;
  for (int64_t c = 0; c < 3; ++c) {
    Tensor<double> p = channel_image(phone, c);
    Tensor<double> y = channel_image(studio, c);
    ChannelLS ls{p, R, k, opt.ridge};

    VectorXd x0 = identity_start(k);
    VectorXd rhs = ls.apply_At(y) + opt.ridge * x0;
    // problem scale: objective gradient norm at the identity transform
    const double scale = std::max(1.0, 2.0 * (ls.matvec(x0) - rhs).norm());
    const double tol_grad = opt.tol_scale * scale;

    VectorXd x;
    if (use_normal) {
      MatrixXd M(n, n);
      VectorXd e = VectorXd::Zero(n);
      for (int64_t j = 0; j < n; ++j) {
        e[j] = 1.0;
        M.col(j) = ls.matvec(e);
        e[j] = 0.0;
      }
      x = MatrixXd(M.selfadjointView<Eigen::Lower>()).ldlt().solve(rhs);
    } else {
      x = x0;
      if (opt.init_gain && opt.init_bias) {
        if (opt.init_gain->shape() != Shape{3, k, k} || opt.init_bias->shape() != Shape{3, k, k})
          throw std::invalid_argument("warm-start maps must be (3,k,k)");
        for (int64_t i = 0; i < k * k; ++i) {
          x[i] = static_cast<double>(opt.init_gain->data()[c * k * k + i]);
          x[k * k + i] = static_cast<double>(opt.init_bias->data()[c * k * k + i]);
        }
      }
      VectorXd r = rhs - ls.matvec(x);
      VectorXd d = r;
      double rs = r.squaredNorm();
      for (int it = 0; it < opt.max_iters && 2.0 * std::sqrt(rs) > tol_grad; ++it) {
        VectorXd md = ls.matvec(d);
        double alpha = rs / d.dot(md);
        x += alpha * d;
        r -= alpha * md;
        double rs_new = r.squaredNorm();
        d = r + (rs_new / rs) * d;
        rs = rs_new;
      }
    }

    VectorXd grad = 2.0 * (ls.matvec(x) - rhs);
    double gn = grad.norm();
    if (gn > tol_grad && !(use_normal && gn <= 1e-6 * scale))
      throw NumericalError("color-transform solver stalled: gradient norm " + std::to_string(gn) +
                           " above tolerance " + std::to_string(tol_grad));
    grad_sq += gn * gn;

    Tensor<double> res = ls.apply_A(x);
    for (int64_t i = 0; i < res.size(); ++i) {
      double dlt = y.data()[i] - res.data()[i];
      sse += dlt * dlt;
    }
    for (int64_t i = 0; i < k * k; ++i) {
      xf.gain.data()[c * k * k + i] = static_cast<float>(x[i]);
      xf.bias.data()[c * k * k + i] = static_cast<float>(x[k * k + i]);
    }
  }
  xf.residual_sse = sse;
  xf.grad_norm = std::sqrt(grad_sq);
  return xf;
}

TensorF apply_transform_raw(const ColorTransform& xf, const TensorF& img) {
  if (img.rank() != 3 || static_cast<int>(img.dim(1)) != xf.source_res ||
      static_cast<int>(img.dim(2)) != xf.source_res)
    throw std::invalid_argument("image resolution " + shape_str(img.shape()) +
                                " does not match transform resolution " +
                                std::to_string(xf.source_res));
  TensorF g = bilinear_resize(xf.gain, xf.source_res);
  TensorF b = bilinear_resize(xf.bias, xf.source_res);
  TensorF out(img.shape());
  for (int64_t i = 0; i < img.size(); ++i)
    out.data()[i] = g.data()[i] * img.data()[i] + b.data()[i];
  return out;
}

TensorF apply_transform(const ColorTransform& xf, const TensorF& img, int64_t* n_clipped) {
  TensorF out = apply_transform_raw(xf, img);
  int64_t clipped = 0;
  for (int64_t i = 0; i < out.size(); ++i) {
    float v = out.data()[i];
    float cv = std::clamp(v, 0.0f, 1.0f);
    if (cv != v) ++clipped;
    out.data()[i] = cv;
  }
  if (n_clipped) *n_clipped = clipped;
  return out;
}

void color_transform_to_checkpoint(const ColorTransform& xf, Checkpoint& ckpt,
                                   const std::string& prefix) {
  ckpt.arrays.emplace_back(prefix + "/gain", xf.gain);
  ckpt.arrays.emplace_back(prefix + "/bias", xf.bias);
  TensorF meta({2});
  meta.data()[0] = static_cast<float>(xf.k);
  meta.data()[1] = static_cast<float>(xf.source_res);
  ckpt.arrays.emplace_back(prefix + "/meta", meta);
}

ColorTransform color_transform_from_checkpoint(const Checkpoint& ckpt,
                                               const std::string& prefix) {
  ColorTransform xf;
  xf.gain = ckpt.array(prefix + "/gain");
  xf.bias = ckpt.array(prefix + "/bias");
  TensorF meta = ckpt.array(prefix + "/meta");
  xf.k = static_cast<int>(meta.data()[0]);
  xf.source_res = static_cast<int>(meta.data()[1]);
  if (xf.gain.rank() != 3 || xf.gain.dim(1) != xf.k)
    throw MissingArtifactError("color transform arrays corrupt under prefix " + prefix);
  return xf;
}

}  // namespace texbridge
