#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace texbridge {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ",";
  }
  return out + ")";
}

/// Dense row-major n-d array. Rank 0 denotes a scalar (numel 1).
template <typename S>
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, S(0)) {}
  explicit Tensor(Shape shape, S fill = S(0))
      : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}
  Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
      throw std::invalid_argument("tensor data does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(S v) {
    Tensor t;
    t.data_[0] = v;
    return t;
  }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, S v) { return Tensor(std::move(shape), v); }

  const Shape& shape() const { return shape_; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  S operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  S& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  S at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  S& at(int64_t i, int64_t j, int64_t k) {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  S at(int64_t i, int64_t j, int64_t k) const {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  S& at(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  S at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  S item() const {
    if (size() != 1) throw std::logic_error("item() on tensor of size " + std::to_string(size()));
    return data_[0];
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != size())
      throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(s));
    Tensor out = *this;
    out.shape_ = std::move(s);
    return out;
  }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (int64_t i = 0; i < size(); ++i) out[i] = static_cast<T>(data_[static_cast<size_t>(i)]);
    return out;
  }

 private:
  Shape shape_;
  std::vector<S> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

/// Numpy-style broadcast of two shapes (right-aligned).
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

namespace detail {

// Right-aligned strides of `s` viewed at rank r; broadcast dims get stride 0.
inline void aligned_strides(const Shape& s, size_t r, int64_t* strides) {
  std::vector<int64_t> own(s.size());
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    own[i] = s[i] == 1 ? 0 : acc;
    acc *= s[i];
  }
  for (size_t i = 0; i < r; ++i)
    strides[i] = i < r - s.size() ? 0 : own[i - (r - s.size())];
}

}  // namespace detail

template <typename S, typename F>
Tensor<S> binary_broadcast(const Tensor<S>& a, const Tensor<S>& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor<S> out(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (int64_t i = 0, n = a.size(); i < n; ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  Shape os = broadcast_shape(a.shape(), b.shape());
  size_t r = os.size();
  Tensor<S> out(os);
  std::vector<int64_t> sa(r), sb(r);
  detail::aligned_strides(a.shape(), r, sa.data());
  detail::aligned_strides(b.shape(), r, sb.data());

  // contiguous inner run: trailing dims where both operands are either full or scalar
  size_t split = r;
  int64_t inner = 1;
  while (split > 0) {
    size_t i = split - 1;
    bool a_ok = sa[i] != 0 || os[i] == 1;
    bool b_ok = sb[i] == 0;
    bool a_bk = sa[i] == 0;
    bool b_full = sb[i] != 0 || os[i] == 1;
    if ((a_ok && b_ok) || (a_bk && b_full)) {
      inner *= os[i];
      --split;
    } else {
      break;
    }
  }
  // require one side fully contiguous, other constant over the inner run
  bool a_inner_const = true, b_inner_const = true;
  for (size_t i = split; i < r; ++i) {
    if (sa[i] != 0) a_inner_const = false;
    if (sb[i] != 0) b_inner_const = false;
  }
  if (split == r || (!a_inner_const && !b_inner_const)) {
    // generic per-element path
    std::vector<int64_t> idx(r, 0);
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    int64_t n = out.size();
    for (int64_t lin = 0; lin < n; ++lin) {
      int64_t ia = 0, ib = 0;
      for (size_t i = 0; i < r; ++i) {
        ia += idx[i] * sa[i];
        ib += idx[i] * sb[i];
      }
      po[lin] = f(pa[ia], pb[ib]);
      for (size_t i = r; i-- > 0;) {
        if (++idx[i] < os[i]) break;
        idx[i] = 0;
      }
    }
    return out;
  }

  int64_t outer = out.size() / inner;
  std::vector<int64_t> idx(split, 0);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    int64_t ia = 0, ib = 0;
    for (size_t i = 0; i < split; ++i) {
      ia += idx[i] * sa[i];
      ib += idx[i] * sb[i];
    }
    S* dst = po + o * inner;
    if (b_inner_const && !a_inner_const) {
      const S bv = pb[ib];
      const S* src = pa + ia;
      for (int64_t k = 0; k < inner; ++k) dst[k] = f(src[k], bv);
    } else if (a_inner_const && !b_inner_const) {
      const S av = pa[ia];
      const S* src = pb + ib;
      for (int64_t k = 0; k < inner; ++k) dst[k] = f(av, src[k]);
    } else {  // both constant over inner
      const S v = f(pa[ia], pb[ib]);
      for (int64_t k = 0; k < inner; ++k) dst[k] = v;
    }
    for (size_t i = split; i-- > 0;) {
      if (++idx[i] < os[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_broadcast(a, b, [](S x, S y) { return x + y; });
}
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_broadcast(a, b, [](S x, S y) { return x - y; });
}
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_broadcast(a, b, [](S x, S y) { return x * y; });
}
template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_broadcast(a, b, [](S x, S y) { return x / y; });
}

template <typename S, typename F>
Tensor<S> map(const Tensor<S>& a, F f) {
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  for (int64_t i = 0, n = a.size(); i < n; ++i) po[i] = f(pa[i]);
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S s) {
  return map(a, [s](S x) { return x * s; });
}

template <typename S>
Tensor<S> broadcast_to(const Tensor<S>& a, const Shape& s) {
  return binary_broadcast(Tensor<S>::zeros(s), a, [](S, S y) { return y; });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename S>
S sum_all(const Tensor<S>& a) {
  S acc = 0;
  for (int64_t i = 0, n = a.size(); i < n; ++i) acc += a[i];
  return acc;
}

/// Sum over `axes`, keeping reduced dims as size 1.
template <typename S>
Tensor<S> sum_axes(const Tensor<S>& a, const std::vector<int>& axes) {
  size_t r = a.shape().size();
  std::vector<bool> red(r, false);
  for (int ax : axes) {
    if (ax < 0 || static_cast<size_t>(ax) >= r) throw std::invalid_argument("bad reduce axis");
    red[static_cast<size_t>(ax)] = true;
  }
  Shape os = a.shape();
  for (size_t i = 0; i < r; ++i)
    if (red[i]) os[i] = 1;
  Tensor<S> out(os);
  std::vector<int64_t> so(r);
  detail::aligned_strides(os, r, so.data());
  std::vector<int64_t> idx(r, 0);
  const S* pa = a.data();
  S* po = out.data();
  for (int64_t lin = 0, n = a.size(); lin < n; ++lin) {
    int64_t io = 0;
    for (size_t i = 0; i < r; ++i) io += (red[i] ? 0 : idx[i]) * so[i];
    po[io] += pa[lin];
    for (size_t i = r; i-- > 0;) {
      if (++idx[i] < a.shape()[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

/// Sum a broadcast result back down to `target` shape (adjoint of broadcasting).
template <typename S>
Tensor<S> sum_to(const Tensor<S>& a, const Shape& target) {
  if (a.shape() == target) return a;
  size_t r = a.shape().size();
  size_t rt = target.size();
  std::vector<int> axes;
  Shape aligned(r, 1);
  for (size_t i = 0; i < rt; ++i) aligned[r - rt + i] = target[i];
  for (size_t i = 0; i < r; ++i)
    if (aligned[i] == 1 && a.shape()[i] != 1) axes.push_back(static_cast<int>(i));
  Tensor<S> out = axes.empty() ? a : sum_axes(a, axes);
  return out.reshaped(target);
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename S>
using EigenMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EigenMap = Eigen::Map<EigenMat<S>>;
template <typename S>
using EigenCMap = Eigen::Map<const EigenMat<S>>;

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul shape mismatch " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  Tensor<S> out({a.dim(0), b.dim(1)});
  EigenCMap<S> ma(a.data(), a.dim(0), a.dim(1));
  EigenCMap<S> mb(b.data(), b.dim(0), b.dim(1));
  EigenMap<S> mo(out.data(), out.dim(0), out.dim(1));
  mo.noalias() = ma * mb;
  return out;
}

template <typename S>
Tensor<S> transpose2d(const Tensor<S>& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose2d needs rank 2");
  Tensor<S> out({a.dim(1), a.dim(0)});
  for (int64_t i = 0; i < a.dim(0); ++i)
    for (int64_t j = 0; j < a.dim(1); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

// ---------------------------------------------------------------------------
// convolution (stride 1) and friends
// ---------------------------------------------------------------------------

namespace detail {

// im2col for stride-1 convolution with zero padding.
// x: (N,C,H,W) -> col: (N*Ho*Wo, C*kh*kw) row-major
template <typename S>
Tensor<S> im2col(const Tensor<S>& x, int kh, int kw, int pad) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1;
  Tensor<S> col({N * Ho * Wo, C * kh * kw});
  S* pc = col.data();
  const S* px = x.data();
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t y = 0; y < Ho; ++y) {
      for (int64_t xx = 0; xx < Wo; ++xx) {
        S* row = pc + ((n * Ho + y) * Wo + xx) * C * kh * kw;
        for (int64_t c = 0; c < C; ++c) {
          const S* plane = px + (n * C + c) * H * W;
          for (int i = 0; i < kh; ++i) {
            int64_t sy = y + i - pad;
            for (int j = 0; j < kw; ++j) {
              int64_t sx = xx + j - pad;
              *row++ = (sy >= 0 && sy < H && sx >= 0 && sx < W) ? plane[sy * W + sx] : S(0);
            }
          }
        }
      }
    }
  }
  return col;
}

}  // namespace detail

/// y[n,o] = sum_{c,i,j} w[o,c,i,j] * x[n,c,y+i-pad,x+j-pad], stride 1.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int pad) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1))
    throw std::invalid_argument("conv2d shape mismatch " + shape_str(x.shape()) + " w " +
                                shape_str(w.shape()));
  const int64_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const int64_t O = w.dim(0), C = w.dim(1);
  const int kh = static_cast<int>(w.dim(2)), kw = static_cast<int>(w.dim(3));
  const int64_t Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1;
  if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d output would be empty");

  Tensor<S> col = detail::im2col(x, kh, kw, pad);
  // (NHoWo, Ckk) * (Ckk, O)
  Tensor<S> res({N * Ho * Wo, O});
  EigenCMap<S> mc(col.data(), N * Ho * Wo, C * kh * kw);
  EigenCMap<S> mw(w.data(), O, C * kh * kw);
  EigenMap<S> mr(res.data(), N * Ho * Wo, O);
  mr.noalias() = mc * mw.transpose();

  Tensor<S> out({N, O, Ho, Wo});
  const S* pr = res.data();
  S* po = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t y = 0; y < Ho; ++y)
      for (int64_t xx = 0; xx < Wo; ++xx) {
        const S* row = pr + ((n * Ho + y) * Wo + xx) * O;
        for (int64_t o = 0; o < O; ++o) po[((n * O + o) * Ho + y) * Wo + xx] = row[o];
      }
  return out;
}

/// Weight gradient of conv2d: dw[o,c,i,j] = sum_{n,y,x} x[n,c,y+i-pad,x+j-pad] * g[n,o,y,x].
template <typename S>
Tensor<S> conv2d_wgrad(const Tensor<S>& x, const Tensor<S>& g, int pad, int kh, int kw) {
  const int64_t N = x.dim(0), C = x.dim(1);
  const int64_t O = g.dim(1), Ho = g.dim(2), Wo = g.dim(3);
  if (g.dim(0) != N) throw std::invalid_argument("conv2d_wgrad batch mismatch");
  Tensor<S> col = detail::im2col(x, kh, kw, pad);
  // gather g into (NHoWo, O)
  Tensor<S> gm({N * Ho * Wo, O});
  const S* pg = g.data();
  S* pm = gm.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t o = 0; o < O; ++o) {
      const S* plane = pg + (n * O + o) * Ho * Wo;
      for (int64_t y = 0; y < Ho; ++y)
        for (int64_t xx = 0; xx < Wo; ++xx) pm[((n * Ho + y) * Wo + xx) * O + o] = plane[y * Wo + xx];
    }
  Tensor<S> out({O, C, kh, kw});
  EigenCMap<S> mg(gm.data(), N * Ho * Wo, O);
  EigenCMap<S> mc(col.data(), N * Ho * Wo, C * kh * kw);
  EigenMap<S> mo(out.data(), O, C * kh * kw);
  mo.noalias() = mg.transpose() * mc;
  return out;
}

/// (O,C,kh,kw) -> (C,O,kh,kw) with spatially flipped taps.
template <typename S>
Tensor<S> flip_swap(const Tensor<S>& w) {
  const int64_t O = w.dim(0), C = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  Tensor<S> out({C, O, kh, kw});
  for (int64_t o = 0; o < O; ++o)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < kh; ++i)
        for (int64_t j = 0; j < kw; ++j) out.at(c, o, kh - 1 - i, kw - 1 - j) = w.at(o, c, i, j);
  return out;
}

template <typename S>
Tensor<S> avgpool2(const Tensor<S>& x) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<S> out({N, C, H / 2, W / 2});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const S* src = x.data() + nc * H * W;
    S* dst = out.data() + nc * (H / 2) * (W / 2);
    for (int64_t y = 0; y < H / 2; ++y)
      for (int64_t xx = 0; xx < W / 2; ++xx)
        dst[y * (W / 2) + xx] = (src[2 * y * W + 2 * xx] + src[2 * y * W + 2 * xx + 1] +
                                 src[(2 * y + 1) * W + 2 * xx] + src[(2 * y + 1) * W + 2 * xx + 1]) /
                                S(4);
  }
  return out;
}

template <typename S>
Tensor<S> upsample2_nearest(const Tensor<S>& x) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<S> out({N, C, H * 2, W * 2});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const S* src = x.data() + nc * H * W;
    S* dst = out.data() + nc * 4 * H * W;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xx = 0; xx < W; ++xx) {
        S v = src[y * W + xx];
        dst[(2 * y) * 2 * W + 2 * xx] = v;
        dst[(2 * y) * 2 * W + 2 * xx + 1] = v;
        dst[(2 * y + 1) * 2 * W + 2 * xx] = v;
        dst[(2 * y + 1) * 2 * W + 2 * xx + 1] = v;
      }
  }
  return out;
}

namespace detail {

// align-corners sample positions: size 1 maps to 0.
inline void bilinear_coeffs(int64_t in, int64_t out, std::vector<int64_t>& i0,
                            std::vector<int64_t>& i1, std::vector<double>& f) {
  i0.resize(out);
  i1.resize(out);
  f.resize(out);
  double s = (out > 1 && in > 1) ? double(in - 1) / double(out - 1) : 0.0;
  for (int64_t k = 0; k < out; ++k) {
    double p = k * s;
    int64_t lo = static_cast<int64_t>(std::floor(p));
    if (lo > in - 2) lo = std::max<int64_t>(in - 2, 0);
    i0[k] = lo;
    i1[k] = std::min(lo + 1, in - 1);
    f[k] = in > 1 ? p - double(lo) : 0.0;
  }
}

}  // namespace detail

/// Separable bilinear resize with align-corners semantics on (N,C,H,W).
template <typename S>
Tensor<S> resize_bilinear(const Tensor<S>& x, int64_t Ho, int64_t Wo) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<int64_t> y0, y1, x0, x1;
  std::vector<double> fy, fx;
  detail::bilinear_coeffs(H, Ho, y0, y1, fy);
  detail::bilinear_coeffs(W, Wo, x0, x1, fx);
  Tensor<S> out({N, C, Ho, Wo});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const S* src = x.data() + nc * H * W;
    S* dst = out.data() + nc * Ho * Wo;
    for (int64_t y = 0; y < Ho; ++y) {
      const S* r0 = src + y0[y] * W;
      const S* r1 = src + y1[y] * W;
      double gy = fy[y];
      for (int64_t xx = 0; xx < Wo; ++xx) {
        double gx = fx[xx];
        double v = (1 - gy) * ((1 - gx) * r0[x0[xx]] + gx * r0[x1[xx]]) +
                   gy * ((1 - gx) * r1[x0[xx]] + gx * r1[x1[xx]]);
        dst[y * Wo + xx] = static_cast<S>(v);
      }
    }
  }
  return out;
}

/// Adjoint of resize_bilinear: scatter-add output cotangents back to the (H,W) grid.
template <typename S>
Tensor<S> resize_bilinear_adjoint(const Tensor<S>& g, int64_t H, int64_t W) {
  const int64_t N = g.dim(0), C = g.dim(1), Ho = g.dim(2), Wo = g.dim(3);
  std::vector<int64_t> y0, y1, x0, x1;
  std::vector<double> fy, fx;
  detail::bilinear_coeffs(H, Ho, y0, y1, fy);
  detail::bilinear_coeffs(W, Wo, x0, x1, fx);
  Tensor<S> out({N, C, H, W});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const S* src = g.data() + nc * Ho * Wo;
    S* dst = out.data() + nc * H * W;
    for (int64_t y = 0; y < Ho; ++y) {
      double gy = fy[y];
      for (int64_t xx = 0; xx < Wo; ++xx) {
        double gx = fx[xx];
        S v = src[y * Wo + xx];
        dst[y0[y] * W + x0[xx]] += static_cast<S>((1 - gy) * (1 - gx)) * v;
        dst[y0[y] * W + x1[xx]] += static_cast<S>((1 - gy) * gx) * v;
        dst[y1[y] * W + x0[xx]] += static_cast<S>(gy * (1 - gx)) * v;
        dst[y1[y] * W + x1[xx]] += static_cast<S>(gy * gx) * v;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// slicing
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> narrow(const Tensor<S>& x, int axis, int64_t start, int64_t len) {
  const auto& s = x.shape();
  if (axis < 0 || axis >= x.rank() || start < 0 || start + len > s[static_cast<size_t>(axis)])
    throw std::invalid_argument("narrow out of range");
  Shape os = s;
  os[static_cast<size_t>(axis)] = len;
  Tensor<S> out(os);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[static_cast<size_t>(i)];
  int64_t ax = s[static_cast<size_t>(axis)];
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(x.data() + (o * ax + start) * inner, len * inner, out.data() + o * len * inner);
  return out;
}

/// Place x into a zero tensor whose `axis` has size `total`, at offset `start`.
template <typename S>
Tensor<S> embed(const Tensor<S>& x, int axis, int64_t start, int64_t total) {
  const auto& s = x.shape();
  Shape os = s;
  os[static_cast<size_t>(axis)] = total;
  Tensor<S> out(os);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[static_cast<size_t>(i)];
  int64_t len = s[static_cast<size_t>(axis)];
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(x.data() + o * len * inner, len * inner, out.data() + (o * total + start) * inner);
  return out;
}

}  // namespace texbridge
