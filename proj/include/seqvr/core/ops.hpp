// Copyright 2026 seqvr authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "seqvr/core/autograd.hpp"
#include "seqvr/core/tensor.hpp"

// Differentiable tensor ops. Every op exists in two overloads with the same
// name: one on Tensor<T> (plain forward, used for inference and detached
// evaluation) and one on Var<T> (records the backward closure). Feature maps
// are [C,H,W]; flows are [2,H,W] with channel 0 = horizontal displacement u
// and channel 1 = vertical displacement v, in pixels.

namespace seqvr {

enum class Border { kClamp, kZeros };

namespace kernels {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline int conv_out_dim(int in, int k, int stride, int pad) {
  const int out = (in + 2 * pad - k) / stride + 1;
  require(out >= 1, "conv2d: output dim would be empty");
  return out;
}

template <typename T>
void im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad, Tensor<T>& cols) {
  const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = conv_out_dim(h, kh, stride, pad);
  const int wo = conv_out_dim(w, kw, stride, pad);
  const int span = ho * wo;
  T* out = cols.data();
  for (int c = 0; c < ci; ++c) {
    const T* plane = x.data() + static_cast<std::int64_t>(c) * h * w;
    for (int dy = 0; dy < kh; ++dy) {
      for (int dx = 0; dx < kw; ++dx) {
        T* row = out + static_cast<std::int64_t>((c * kh + dy) * kw + dx) * span;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + dy - pad;
          T* dst = row + static_cast<std::int64_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::int64_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + dx - pad;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const Tensor<T>& cols, int ci, int h, int w, int kh, int kw, int stride, int pad,
            Tensor<T>& x) {
  const int ho = conv_out_dim(h, kh, stride, pad);
  const int wo = conv_out_dim(w, kw, stride, pad);
  const int span = ho * wo;
  x.fill(T(0));
  const T* in = cols.data();
  for (int c = 0; c < ci; ++c) {
    T* plane = x.data() + static_cast<std::int64_t>(c) * h * w;
    for (int dy = 0; dy < kh; ++dy) {
      for (int dx = 0; dx < kw; ++dx) {
        const T* row = in + static_cast<std::int64_t>((c * kh + dy) * kw + dx) * span;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + dy - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = plane + static_cast<std::int64_t>(iy) * w;
          const T* src = row + static_cast<std::int64_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + dx - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, int stride,
                         int pad) {
  require(x.rank() == 3 && w.rank() == 4, "conv2d: expected [C,H,W] input and [Co,Ci,Kh,Kw] weight");
  require(x.dim(0) == w.dim(1), "conv2d: input channels " + std::to_string(x.dim(0)) +
                                    " do not match weight " + std::to_string(w.dim(1)));
  const int co = w.dim(0), k_in = w.dim(1) * w.dim(2) * w.dim(3);
  const int ho = conv_out_dim(x.dim(1), w.dim(2), stride, pad);
  const int wo = conv_out_dim(x.dim(2), w.dim(3), stride, pad);
  Tensor<T> cols({k_in, ho * wo});
  im2col(x, w.dim(2), w.dim(3), stride, pad, cols);
  Tensor<T> out({co, ho, wo});
  ConstMatMap<T> wm(w.data(), co, k_in);
  ConstMatMap<T> cm(cols.data(), k_in, ho * wo);
  MatMap<T> om(out.data(), co, ho * wo);
  om.noalias() = wm * cm;
  if (b != nullptr) {
    require(b->rank() == 1 && b->dim(0) == co, "conv2d: bad bias shape");
    for (int c = 0; c < co; ++c) {
      T* plane = out.data() + static_cast<std::int64_t>(c) * ho * wo;
      const T bias = b->at(c);
      for (int i = 0; i < ho * wo; ++i) plane[i] += bias;
    }
  }
  return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad,
                     const Tensor<T>& grad_out, Tensor<T>* grad_x, Tensor<T>* grad_w,
                     Tensor<T>* grad_b) {
  const int co = w.dim(0), k_in = w.dim(1) * w.dim(2) * w.dim(3);
  const int ho = grad_out.dim(1), wo = grad_out.dim(2);
  ConstMatMap<T> gm(grad_out.data(), co, ho * wo);
  if (grad_b != nullptr) {
    for (int c = 0; c < co; ++c) {
      double s = 0.0;
      const T* plane = grad_out.data() + static_cast<std::int64_t>(c) * ho * wo;
      for (int i = 0; i < ho * wo; ++i) s += static_cast<double>(plane[i]);
      grad_b->at(c) += static_cast<T>(s);
    }
  }
  if (grad_w != nullptr) {
    // im2col is recomputed here instead of being kept alive on the tape.
    Tensor<T> cols({k_in, ho * wo});
    im2col(x, w.dim(2), w.dim(3), stride, pad, cols);
    ConstMatMap<T> cm(cols.data(), k_in, ho * wo);
    MatMap<T> gwm(grad_w->data(), co, k_in);
    gwm.noalias() += gm * cm.transpose();
  }
  if (grad_x != nullptr) {
    Tensor<T> col_grad({k_in, ho * wo});
    ConstMatMap<T> wm(w.data(), co, k_in);
    MatMap<T> cgm(col_grad.data(), k_in, ho * wo);
    cgm.noalias() = wm.transpose() * gm;
    Tensor<T> gx({x.dim(0), x.dim(1), x.dim(2)});
    col2im(col_grad, x.dim(0), x.dim(1), x.dim(2), w.dim(2), w.dim(3), stride, pad, gx);
    accumulate(*grad_x, gx);
  }
}

// Bilinear backward warp: out(p) = input(p + flow(p)), channels independent.
template <typename T>
Tensor<T> warp_forward(const Tensor<T>& x, const Tensor<T>& flow, Border border) {
  require(flow.rank() == 3 && flow.dim(0) == 2, "warp: flow must be [2,H,W]");
  require(x.rank() == 3 && x.dim(1) == flow.dim(1) && x.dim(2) == flow.dim(2),
          "warp: input dims " + x.shape_str() + " do not match flow " + flow.shape_str());
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> out({c, h, w});
  const T* u = flow.data();
  const T* v = flow.data() + static_cast<std::int64_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      const std::int64_t p = static_cast<std::int64_t>(y) * w + xx;
      double sx = xx + static_cast<double>(u[p]);
      double sy = y + static_cast<double>(v[p]);
      if (border == Border::kClamp) {
        sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
        sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
      } else if (sx <= -1.0 || sx >= static_cast<double>(w) || sy <= -1.0 ||
                 sy >= static_cast<double>(h)) {
        for (int ch = 0; ch < c; ++ch) out.data()[static_cast<std::int64_t>(ch) * h * w + p] = T(0);
        continue;
      }
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const double wx = sx - x0, wy = sy - y0;
      const int x0c = std::min(std::max(x0, 0), w - 1), x1c = std::min(std::max(x0 + 1, 0), w - 1);
      const int y0c = std::min(std::max(y0, 0), h - 1), y1c = std::min(std::max(y0 + 1, 0), h - 1);
      const bool i00 = x0 >= 0 && y0 >= 0, i01 = x0 + 1 < w && y0 >= 0;
      const bool i10 = x0 >= 0 && y0 + 1 < h, i11 = x0 + 1 < w && y0 + 1 < h;
      for (int ch = 0; ch < c; ++ch) {
        const T* plane = x.data() + static_cast<std::int64_t>(ch) * h * w;
        double v00, v01, v10, v11;
        if (border == Border::kClamp) {
          v00 = plane[static_cast<std::int64_t>(y0c) * w + x0c];
          v01 = plane[static_cast<std::int64_t>(y0c) * w + x1c];
          v10 = plane[static_cast<std::int64_t>(y1c) * w + x0c];
          v11 = plane[static_cast<std::int64_t>(y1c) * w + x1c];
        } else {
          v00 = i00 ? static_cast<double>(plane[static_cast<std::int64_t>(y0) * w + x0]) : 0.0;
          v01 = i01 ? static_cast<double>(plane[static_cast<std::int64_t>(y0) * w + x0 + 1]) : 0.0;
          v10 = i10 ? static_cast<double>(plane[static_cast<std::int64_t>(y0 + 1) * w + x0]) : 0.0;
          v11 = i11 ? static_cast<double>(plane[static_cast<std::int64_t>(y0 + 1) * w + x0 + 1]) : 0.0;
        }
        const double top = v00 + wx * (v01 - v00);
        const double bot = v10 + wx * (v11 - v10);
        out.data()[static_cast<std::int64_t>(ch) * h * w + p] = static_cast<T>(top + wy * (bot - top));
      }
    }
  }
  return out;
}

template <typename T>
void warp_backward(const Tensor<T>& x, const Tensor<T>& flow, Border border,
                   const Tensor<T>& grad_out, Tensor<T>* grad_x, Tensor<T>* grad_flow) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const T* u = flow.data();
  const T* v = flow.data() + static_cast<std::int64_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      const std::int64_t p = static_cast<std::int64_t>(y) * w + xx;
      double sx = xx + static_cast<double>(u[p]);
      double sy = y + static_cast<double>(v[p]);
      bool saturated_x = false, saturated_y = false;
      if (border == Border::kClamp) {
        if (sx <= 0.0 || sx >= static_cast<double>(w - 1)) saturated_x = true;
        if (sy <= 0.0 || sy >= static_cast<double>(h - 1)) saturated_y = true;
        sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
        sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
      } else if (sx <= -1.0 || sx >= static_cast<double>(w) || sy <= -1.0 ||
                 sy >= static_cast<double>(h)) {
        continue;
      }
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const double wx = sx - x0, wy = sy - y0;
      const int x0c = std::min(std::max(x0, 0), w - 1), x1c = std::min(std::max(x0 + 1, 0), w - 1);
      const int y0c = std::min(std::max(y0, 0), h - 1), y1c = std::min(std::max(y0 + 1, 0), h - 1);
      const bool i00 = x0 >= 0 && y0 >= 0, i01 = x0 + 1 < w && y0 >= 0;
      const bool i10 = x0 >= 0 && y0 + 1 < h, i11 = x0 + 1 < w && y0 + 1 < h;
      double du = 0.0, dv = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        const T* plane = x.data() + static_cast<std::int64_t>(ch) * h * w;
        const double g = grad_out.data()[static_cast<std::int64_t>(ch) * h * w + p];
        double v00, v01, v10, v11;
        if (border == Border::kClamp) {
          v00 = plane[static_cast<std::int64_t>(y0c) * w + x0c];
          v01 = plane[static_cast<std::int64_t>(y0c) * w + x1c];
          v10 = plane[static_cast<std::int64_t>(y1c) * w + x0c];
          v11 = plane[static_cast<std::int64_t>(y1c) * w + x1c];
        } else {
          v00 = i00 ? static_cast<double>(plane[static_cast<std::int64_t>(y0) * w + x0]) : 0.0;
          v01 = i01 ? static_cast<double>(plane[static_cast<std::int64_t>(y0) * w + x0 + 1]) : 0.0;
          v10 = i10 ? static_cast<double>(plane[static_cast<std::int64_t>(y0 + 1) * w + x0]) : 0.0;
          v11 = i11 ? static_cast<double>(plane[static_cast<std::int64_t>(y0 + 1) * w + x0 + 1]) : 0.0;
        }
        du += g * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
        dv += g * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
        if (grad_x != nullptr) {
          T* gplane = grad_x->data() + static_cast<std::int64_t>(ch) * h * w;
          if (border == Border::kClamp) {
            gplane[static_cast<std::int64_t>(y0c) * w + x0c] += static_cast<T>(g * (1 - wx) * (1 - wy));
            gplane[static_cast<std::int64_t>(y0c) * w + x1c] += static_cast<T>(g * wx * (1 - wy));
            gplane[static_cast<std::int64_t>(y1c) * w + x0c] += static_cast<T>(g * (1 - wx) * wy);
            gplane[static_cast<std::int64_t>(y1c) * w + x1c] += static_cast<T>(g * wx * wy);
          } else {
            if (i00) gplane[static_cast<std::int64_t>(y0) * w + x0] += static_cast<T>(g * (1 - wx) * (1 - wy));
            if (i01) gplane[static_cast<std::int64_t>(y0) * w + x0 + 1] += static_cast<T>(g * wx * (1 - wy));
            if (i10) gplane[static_cast<std::int64_t>(y0 + 1) * w + x0] += static_cast<T>(g * (1 - wx) * wy);
            if (i11) gplane[static_cast<std::int64_t>(y0 + 1) * w + x0 + 1] += static_cast<T>(g * wx * wy);
          }
        }
      }
      if (grad_flow != nullptr) {
        if (!saturated_x) grad_flow->data()[p] += static_cast<T>(du);
        if (!saturated_y)
          grad_flow->data()[static_cast<std::int64_t>(h) * w + p] += static_cast<T>(dv);
      }
    }
  }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

// Unary elementwise op; FwdFn computes the value, GradFn the local derivative
// from the input value.
template <typename T, typename FwdFn>
Tensor<T> map_unary(const Tensor<T>& x, FwdFn fn) {
  Tensor<T> out(x.shape());
  const T* in = x.data();
  T* o = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) o[i] = fn(in[i]);
  return out;
}

template <typename T, typename FwdFn, typename GradFn>
Var<T> unary_op(const Var<T>& x, FwdFn fn, GradFn dfn) {
  Tensor<T> out = map_unary(x.value(), fn);
  auto xn = x.node();
  return make_op_node<T>(std::move(out), {x},
                         [xn, dfn](const Tensor<T>& g, GradStore<T>& store) {
                           Tensor<T> gx(g.shape());
                           const T* in = xn->value.data();
                           const T* gg = g.data();
                           T* o = gx.data();
                           for (std::int64_t i = 0; i < gx.numel(); ++i) o[i] = gg[i] * dfn(in[i]);
                           store.add(xn.get(), gx);
                         });
}

template <typename T>
T sigmoid_scalar(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

}  // namespace detail

template <typename T>
inline Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::map_unary(x, detail::sigmoid_scalar<T>);
}
template <typename T>
inline Var<T> sigmoid(const Var<T>& x) {
  return detail::unary_op(x, detail::sigmoid_scalar<T>, [](T v) {
    const T s = detail::sigmoid_scalar(v);
    return s * (T(1) - s);
  });
}

template <typename T>
inline Tensor<T> tanh_op(const Tensor<T>& x) {
  return detail::map_unary(x, [](T v) { return std::tanh(v); });
}
template <typename T>
inline Var<T> tanh_op(const Var<T>& x) {
  return detail::unary_op(
      x, [](T v) { return std::tanh(v); },
      [](T v) {
        const T t = std::tanh(v);
        return T(1) - t * t;
      });
}

template <typename T>
inline Tensor<T> relu(const Tensor<T>& x) {
  return detail::map_unary(x, [](T v) { return v > T(0) ? v : T(0); });
}
template <typename T>
inline Var<T> relu(const Var<T>& x) {
  return detail::unary_op(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
inline Tensor<T> abs_op(const Tensor<T>& x) {
  return detail::map_unary(x, [](T v) { return v < T(0) ? -v : v; });
}
template <typename T>
inline Var<T> abs_op(const Var<T>& x) {
  return detail::unary_op(
      x, [](T v) { return v < T(0) ? -v : v; },
      [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
inline Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const T v = x.at(i);
    out.at(i) = v > T(0) ? v : slope * v;
  }
  return out;
}

template <typename T>
inline Var<T> leaky_relu(const Var<T>& x, T slope) {
  return detail::unary_op<T>(
      x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v) { return v > T(0) ? T(1) : slope; });
}

/// sqrt(x^2 + eps^2), the robust l1 relaxation.
template <typename T>
inline Tensor<T> charbonnier(const Tensor<T>& x, T eps) {
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    out.at(i) = std::sqrt(x.at(i) * x.at(i) + eps * eps);
  return out;
}

template <typename T>
inline Var<T> charbonnier(const Var<T>& x, T eps) {
  return detail::unary_op<T>(
      x, [eps](T v) { return std::sqrt(v * v + eps * eps); },
      [eps](T v) { return v / std::sqrt(v * v + eps * eps); });
}

template <typename T>
inline Tensor<T> clamp01(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    out.at(i) = std::min(std::max(x.at(i), T(0)), T(1));
  return out;
}

// ---------------------------------------------------------------------------
// Binary / affine ops
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.same_shape(b), "add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) + b.at(i);
  return out;
}

template <typename T>
inline Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = add(a.value(), b.value());
  auto an = a.node(), bn = b.node();
  return make_op_node<T>(std::move(out), {a, b}, [an, bn](const Tensor<T>& g, GradStore<T>& s) {
    if (an->requires_grad) s.add(an.get(), g);
    if (bn->requires_grad) s.add(bn.get(), g);
  });
}

template <typename T>
inline Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.same_shape(b), "sub: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) - b.at(i);
  return out;
}

template <typename T>
inline Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = sub(a.value(), b.value());
  auto an = a.node(), bn = b.node();
  return make_op_node<T>(std::move(out), {a, b}, [an, bn](const Tensor<T>& g, GradStore<T>& s) {
    if (an->requires_grad) s.add(an.get(), g);
    if (bn->requires_grad) {
      Tensor<T> neg(g.shape());
      for (std::int64_t i = 0; i < g.numel(); ++i) neg.at(i) = -g.at(i);
      s.add(bn.get(), neg);
    }
  });
}

template <typename T>
inline Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.same_shape(b), "mul: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) * b.at(i);
  return out;
}

template <typename T>
inline Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = mul(a.value(), b.value());
  auto an = a.node(), bn = b.node();
  return make_op_node<T>(std::move(out), {a, b}, [an, bn](const Tensor<T>& g, GradStore<T>& s) {
    if (an->requires_grad) s.add(an.get(), mul(g, bn->value));
    if (bn->requires_grad) s.add(bn.get(), mul(g, an->value));
  });
}

/// a*x + b with scalar constants.
template <typename T>
inline Tensor<T> affine(const Tensor<T>& x, T a, T b) {
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out.at(i) = a * x.at(i) + b;
  return out;
}

template <typename T>
inline Var<T> affine(const Var<T>& x, T a, T b) {
  Tensor<T> out = affine(x.value(), a, b);
  auto xn = x.node();
  return make_op_node<T>(std::move(out), {x}, [xn, a](const Tensor<T>& g, GradStore<T>& s) {
    s.add(xn.get(), affine(g, a, T(0)));
  });
}

template <typename T>
inline Tensor<T> scale(const Tensor<T>& x, T a) {
  return affine(x, a, T(0));
}
template <typename T>
inline Var<T> scale(const Var<T>& x, T a) {
  return affine(x, a, T(0));
}

/// Multiply a [C,H,W] map by a single-channel [1,H,W] weight map.
template <typename T>
inline Tensor<T> mul_bc(const Tensor<T>& x, const Tensor<T>& w) {
  require(w.rank() == 3 && w.dim(0) == 1 && w.dim(1) == x.dim(1) && w.dim(2) == x.dim(2),
          "mul_bc: weight must be [1,H,W] matching input");
  Tensor<T> out(x.shape());
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  for (int c = 0; c < x.dim(0); ++c)
    for (std::int64_t i = 0; i < plane; ++i)
      out.data()[c * plane + i] = x.data()[c * plane + i] * w.data()[i];
  return out;
}

template <typename T>
inline Var<T> mul_bc(const Var<T>& x, const Var<T>& w) {
  Tensor<T> out = mul_bc(x.value(), w.value());
  auto xn = x.node(), wn = w.node();
  return make_op_node<T>(std::move(out), {x, w}, [xn, wn](const Tensor<T>& g, GradStore<T>& s) {
    const std::int64_t plane = static_cast<std::int64_t>(g.dim(1)) * g.dim(2);
    if (xn->requires_grad) s.add(xn.get(), mul_bc(g, wn->value));
    if (wn->requires_grad) {
      Tensor<T> gw({1, g.dim(1), g.dim(2)});
      for (int c = 0; c < g.dim(0); ++c)
        for (std::int64_t i = 0; i < plane; ++i)
          gw.data()[i] += g.data()[c * plane + i] * xn->value.data()[c * plane + i];
      s.add(wn.get(), gw);
    }
  });
}

/// Multiply a map by a scalar Var (gradient flows into the scalar).
template <typename T>
inline Var<T> mul_scalar(const Var<T>& x, const Var<T>& s) {
  require(s.value().numel() == 1, "mul_scalar: scalar operand must have one element");
  Tensor<T> out = scale(x.value(), s.value().at(0));
  auto xn = x.node(), sn = s.node();
  return make_op_node<T>(std::move(out), {x, s}, [xn, sn](const Tensor<T>& g, GradStore<T>& st) {
    if (xn->requires_grad) st.add(xn.get(), scale(g, sn->value.at(0)));
    if (sn->requires_grad) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < g.numel(); ++i)
        acc += static_cast<double>(g.at(i)) * static_cast<double>(xn->value.at(i));
      st.add(sn.get(), Tensor<T>::scalar(static_cast<T>(acc)));
    }
  });
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> concat_ch(const std::vector<Tensor<T>>& xs) {
  require(!xs.empty(), "concat_ch: empty input");
  int c_total = 0;
  for (const auto& x : xs) {
    require(x.rank() == 3 && x.dim(1) == xs[0].dim(1) && x.dim(2) == xs[0].dim(2),
            "concat_ch: spatial dims must agree");
    c_total += x.dim(0);
  }
  Tensor<T> out({c_total, xs[0].dim(1), xs[0].dim(2)});
  std::int64_t off = 0;
  for (const auto& x : xs) {
    std::copy(x.data(), x.data() + x.numel(), out.data() + off);
    off += x.numel();
  }
  return out;
}

template <typename T>
inline Var<T> concat_ch(const std::vector<Var<T>>& xs) {
  std::vector<Tensor<T>> vals;
  vals.reserve(xs.size());
  for (const auto& x : xs) vals.push_back(x.value());
  Tensor<T> out = concat_ch(vals);
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& x : xs) nodes.push_back(x.node());
  return make_op_node<T>(std::move(out), xs, [nodes](const Tensor<T>& g, GradStore<T>& s) {
    std::int64_t off = 0;
    for (const auto& n : nodes) {
      const std::int64_t cnt = n->value.numel();
      if (n->requires_grad) {
        Tensor<T> gi(n->value.shape());
        std::copy(g.data() + off, g.data() + off + cnt, gi.data());
        s.add(n.get(), gi);
      }
      off += cnt;
    }
  });
}

template <typename T>
inline Tensor<T> sum_channels(const Tensor<T>& x) {
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  Tensor<T> out({1, x.dim(1), x.dim(2)});
  for (int c = 0; c < x.dim(0); ++c)
    for (std::int64_t i = 0; i < plane; ++i) out.data()[i] += x.data()[c * plane + i];
  return out;
}

template <typename T>
inline Var<T> sum_channels(const Var<T>& x) {
  Tensor<T> out = sum_channels(x.value());
  auto xn = x.node();
  return make_op_node<T>(std::move(out), {x}, [xn](const Tensor<T>& g, GradStore<T>& s) {
    const std::int64_t plane = static_cast<std::int64_t>(g.dim(1)) * g.dim(2);
    Tensor<T> gx(xn->value.shape());
    for (int c = 0; c < gx.dim(0); ++c)
      std::copy(g.data(), g.data() + plane, gx.data() + c * plane);
    s.add(xn.get(), gx);
  });
}

/// Softmax across the channel axis, independently per spatial position.
template <typename T>
inline Tensor<T> softmax_ch(const Tensor<T>& x) {
  const int k = x.dim(0);
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < plane; ++i) {
    T m = x.data()[i];
    for (int c = 1; c < k; ++c) m = std::max(m, x.data()[c * plane + i]);
    double z = 0.0;
    for (int c = 0; c < k; ++c) {
      const double e = std::exp(static_cast<double>(x.data()[c * plane + i] - m));
      out.data()[c * plane + i] = static_cast<T>(e);
      z += e;
    }
    for (int c = 0; c < k; ++c) out.data()[c * plane + i] = static_cast<T>(out.data()[c * plane + i] / z);
  }
  return out;
}

template <typename T>
inline Var<T> softmax_ch(const Var<T>& x) {
  Tensor<T> out = softmax_ch(x.value());
  auto xn = x.node();
  Tensor<T> saved = out;
  return make_op_node<T>(std::move(out), {x}, [xn, saved](const Tensor<T>& g, GradStore<T>& s) {
    const int k = saved.dim(0);
    const std::int64_t plane = static_cast<std::int64_t>(saved.dim(1)) * saved.dim(2);
    Tensor<T> gx(saved.shape());
    for (std::int64_t i = 0; i < plane; ++i) {
      double dot = 0.0;
      for (int c = 0; c < k; ++c)
        dot += static_cast<double>(g.data()[c * plane + i]) * static_cast<double>(saved.data()[c * plane + i]);
      for (int c = 0; c < k; ++c) {
        const double a = saved.data()[c * plane + i];
        gx.data()[c * plane + i] = static_cast<T>(a * (static_cast<double>(g.data()[c * plane + i]) - dot));
      }
    }
    s.add(xn.get(), gx);
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> sum_all(const Tensor<T>& x) {
  return Tensor<T>::scalar(static_cast<T>(x.sum()));
}

template <typename T>
inline Var<T> sum_all(const Var<T>& x) {
  Tensor<T> out = sum_all(x.value());
  auto xn = x.node();
  return make_op_node<T>(std::move(out), {x}, [xn](const Tensor<T>& g, GradStore<T>& s) {
    Tensor<T> gx(xn->value.shape(), g.at(0));
    s.add(xn.get(), gx);
  });
}

template <typename T>
inline Tensor<T> mean_all(const Tensor<T>& x) {
  return Tensor<T>::scalar(static_cast<T>(x.mean()));
}

template <typename T>
inline Var<T> mean_all(const Var<T>& x) {
  Tensor<T> out = mean_all(x.value());
  auto xn = x.node();
  const T inv = T(1) / static_cast<T>(x.value().numel());
  return make_op_node<T>(std::move(out), {x}, [xn, inv](const Tensor<T>& g, GradStore<T>& s) {
    Tensor<T> gx(xn->value.shape(), g.at(0) * inv);
    s.add(xn.get(), gx);
  });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                        int pad) {
  return kernels::conv2d_forward(x, w, &b, stride, pad);
}
template <typename T>
inline Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  return kernels::conv2d_forward<T>(x, w, nullptr, stride, pad);
}

template <typename T>
inline Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  Tensor<T> out = kernels::conv2d_forward(x.value(), w.value(), &b.value(), stride, pad);
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return make_op_node<T>(std::move(out), {x, w, b},
                         [xn, wn, bn, stride, pad](const Tensor<T>& g, GradStore<T>& s) {
                           Tensor<T> gx(xn->value.shape()), gw(wn->value.shape()), gb(bn->value.shape());
                           kernels::conv2d_backward(xn->value, wn->value, stride, pad, g,
                                                    xn->requires_grad ? &gx : nullptr,
                                                    wn->requires_grad ? &gw : nullptr,
                                                    bn->requires_grad ? &gb : nullptr);
                           if (xn->requires_grad) s.add(xn.get(), gx);
                           if (wn->requires_grad) s.add(wn.get(), gw);
                           if (bn->requires_grad) s.add(bn.get(), gb);
                         });
}

template <typename T>
inline Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride, int pad) {
  Tensor<T> out = kernels::conv2d_forward<T>(x.value(), w.value(), nullptr, stride, pad);
  auto xn = x.node(), wn = w.node();
  return make_op_node<T>(std::move(out), {x, w},
                         [xn, wn, stride, pad](const Tensor<T>& g, GradStore<T>& s) {
                           Tensor<T> gx(xn->value.shape()), gw(wn->value.shape());
                           kernels::conv2d_backward<T>(xn->value, wn->value, stride, pad, g,
                                                       xn->requires_grad ? &gx : nullptr,
                                                       wn->requires_grad ? &gw : nullptr, nullptr);
                           if (xn->requires_grad) s.add(xn.get(), gx);
                           if (wn->requires_grad) s.add(wn.get(), gw);
                         });
}

// ---------------------------------------------------------------------------
// Warping and resampling
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> warp(const Tensor<T>& x, const Tensor<T>& flow, Border border = Border::kClamp) {
  return kernels::warp_forward(x, flow, border);
}

template <typename T>
inline Var<T> warp(const Var<T>& x, const Var<T>& flow, Border border = Border::kClamp) {
  Tensor<T> out = kernels::warp_forward(x.value(), flow.value(), border);
  auto xn = x.node(), fn = flow.node();
  return make_op_node<T>(std::move(out), {x, flow},
                         [xn, fn, border](const Tensor<T>& g, GradStore<T>& s) {
                           Tensor<T> gx(xn->value.shape()), gf(fn->value.shape());
                           kernels::warp_backward(xn->value, fn->value, border, g,
                                                  xn->requires_grad ? &gx : nullptr,
                                                  fn->requires_grad ? &gf : nullptr);
                           if (xn->requires_grad) s.add(xn.get(), gx);
                           if (fn->requires_grad) s.add(fn.get(), gf);
                         });
}

/// Integer shift with zero fill: out(y,x) = in(y+dy, x+dx).
template <typename T>
inline Tensor<T> shift2d(const Tensor<T>& x, int dx, int dy) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> out(x.shape());
  for (int ch = 0; ch < c; ++ch) {
    const T* in = x.data() + static_cast<std::int64_t>(ch) * h * w;
    T* o = out.data() + static_cast<std::int64_t>(ch) * h * w;
    for (int y = 0; y < h; ++y) {
      const int sy = y + dy;
      if (sy < 0 || sy >= h) continue;
      for (int xx = 0; xx < w; ++xx) {
        const int sx = xx + dx;
        if (sx >= 0 && sx < w) o[y * w + xx] = in[sy * w + sx];
      }
    }
  }
  return out;
}

template <typename T>
inline Var<T> shift2d(const Var<T>& x, int dx, int dy) {
  Tensor<T> out = shift2d(x.value(), dx, dy);
  auto xn = x.node();
  return make_op_node<T>(std::move(out), {x}, [xn, dx, dy](const Tensor<T>& g, GradStore<T>& s) {
    const int c = g.dim(0), h = g.dim(1), w = g.dim(2);
    Tensor<T> gx(xn->value.shape());
    for (int ch = 0; ch < c; ++ch) {
      const T* gg = g.data() + static_cast<std::int64_t>(ch) * h * w;
      T* o = gx.data() + static_cast<std::int64_t>(ch) * h * w;
      for (int y = 0; y < h; ++y) {
        const int sy = y + dy;
        if (sy < 0 || sy >= h) continue;
        for (int xx = 0; xx < w; ++xx) {
          const int sx = xx + dx;
          if (sx >= 0 && sx < w) o[sy * w + sx] += gg[y * w + xx];
        }
      }
    }
    s.add(xn.get(), gx);
  });
}

namespace kernels {

// Half-pixel-center bilinear resize by an integer factor; constants are
// preserved exactly up to fp rounding.
template <typename T>
Tensor<T> upsample_forward(const Tensor<T>& x, int factor) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = h * factor, wo = w * factor;
  Tensor<T> out({c, ho, wo});
  for (int oy = 0; oy < ho; ++oy) {
    const double sy = (oy + 0.5) / factor - 0.5;
    const int y0 = static_cast<int>(std::floor(sy));
    const double wy = sy - y0;
    const int y0c = std::min(std::max(y0, 0), h - 1), y1c = std::min(std::max(y0 + 1, 0), h - 1);
    for (int ox = 0; ox < wo; ++ox) {
      const double sx = (ox + 0.5) / factor - 0.5;
      const int x0 = static_cast<int>(std::floor(sx));
      const double wx = sx - x0;
      const int x0c = std::min(std::max(x0, 0), w - 1), x1c = std::min(std::max(x0 + 1, 0), w - 1);
      for (int ch = 0; ch < c; ++ch) {
        const T* plane = x.data() + static_cast<std::int64_t>(ch) * h * w;
        const double top = plane[y0c * w + x0c] + wx * (static_cast<double>(plane[y0c * w + x1c]) - plane[y0c * w + x0c]);
        const double bot = plane[y1c * w + x0c] + wx * (static_cast<double>(plane[y1c * w + x1c]) - plane[y1c * w + x0c]);
        out.data()[(static_cast<std::int64_t>(ch) * ho + oy) * wo + ox] = static_cast<T>(top + wy * (bot - top));
      }
    }
  }
  return out;
}

template <typename T>
void upsample_backward(const std::vector<int>& in_shape, int factor, const Tensor<T>& g,
                       Tensor<T>& gx) {
  const int c = in_shape[0], h = in_shape[1], w = in_shape[2];
  const int ho = h * factor, wo = w * factor;
  for (int oy = 0; oy < ho; ++oy) {
    const double sy = (oy + 0.5) / factor - 0.5;
    const int y0 = static_cast<int>(std::floor(sy));
    const double wy = sy - y0;
    const int y0c = std::min(std::max(y0, 0), h - 1), y1c = std::min(std::max(y0 + 1, 0), h - 1);
    for (int ox = 0; ox < wo; ++ox) {
      const double sx = (ox + 0.5) / factor - 0.5;
      const int x0 = static_cast<int>(std::floor(sx));
      const double wx = sx - x0;
      const int x0c = std::min(std::max(x0, 0), w - 1), x1c = std::min(std::max(x0 + 1, 0), w - 1);
      for (int ch = 0; ch < c; ++ch) {
        const double gg = g.data()[(static_cast<std::int64_t>(ch) * ho + oy) * wo + ox];
        T* plane = gx.data() + static_cast<std::int64_t>(ch) * h * w;
        plane[y0c * w + x0c] += static_cast<T>(gg * (1 - wx) * (1 - wy));
        plane[y0c * w + x1c] += static_cast<T>(gg * wx * (1 - wy));
        plane[y1c * w + x0c] += static_cast<T>(gg * (1 - wx) * wy);
        plane[y1c * w + x1c] += static_cast<T>(gg * wx * wy);
      }
    }
  }
}

}  // namespace kernels

template <typename T>
inline Tensor<T> upsample_bilinear(const Tensor<T>& x, int factor) {
  require(factor >= 1, "upsample_bilinear: factor must be >= 1");
  if (factor == 1) return x;
  return kernels::upsample_forward(x, factor);
}

template <typename T>
inline Var<T> upsample_bilinear(const Var<T>& x, int factor) {
  require(factor >= 1, "upsample_bilinear: factor must be >= 1");
  if (factor == 1) return x;
  Tensor<T> out = kernels::upsample_forward(x.value(), factor);
  auto xn = x.node();
  return make_op_node<T>(std::move(out), {x}, [xn, factor](const Tensor<T>& g, GradStore<T>& s) {
    Tensor<T> gx(xn->value.shape());
    kernels::upsample_backward(xn->value.shape(), factor, g, gx);
    s.add(xn.get(), gx);
  });
}

/// [C*s*s,H,W] -> [C,H*s,W*s]; input channel c*s*s + dy*s + dx feeds output
/// subpixel (dy,dx) of channel c.
template <typename T>
inline Tensor<T> pixel_shuffle(const Tensor<T>& x, int s) {
  const int cs = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(cs % (s * s) == 0, "pixel_shuffle: channels not divisible by s^2");
  const int c = cs / (s * s);
  Tensor<T> out({c, h * s, w * s});
  for (int ch = 0; ch < c; ++ch)
    for (int dy = 0; dy < s; ++dy)
      for (int dx = 0; dx < s; ++dx) {
        const T* in = x.data() + static_cast<std::int64_t>(ch * s * s + dy * s + dx) * h * w;
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            out.data()[(static_cast<std::int64_t>(ch) * h * s + y * s + dy) * (w * s) + xx * s + dx] =
                in[y * w + xx];
      }
  return out;
}

template <typename T>
inline Var<T> pixel_shuffle(const Var<T>& x, int s) {
  Tensor<T> out = pixel_shuffle(x.value(), s);
  auto xn = x.node();
  return make_op_node<T>(std::move(out), {x}, [xn, s](const Tensor<T>& g, GradStore<T>& st) {
    const int c = g.dim(0), hs = g.dim(1), ws = g.dim(2);
    const int h = hs / s, w = ws / s;
    Tensor<T> gx(xn->value.shape());
    for (int ch = 0; ch < c; ++ch)
      for (int dy = 0; dy < s; ++dy)
        for (int dx = 0; dx < s; ++dx) {
          T* o = gx.data() + static_cast<std::int64_t>(ch * s * s + dy * s + dx) * h * w;
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
              o[y * w + xx] =
                  g.data()[(static_cast<std::int64_t>(ch) * hs + y * s + dy) * ws + xx * s + dx];
        }
    st.add(xn.get(), gx);
  });
}

// ---------------------------------------------------------------------------
// Spatial forward differences (smoothness terms)
// ---------------------------------------------------------------------------

/// Forward difference along x: out [C,H,W-1].
template <typename T>
inline Tensor<T> diff_x(const Tensor<T>& x) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(w >= 2, "diff_x: width must be >= 2");
  Tensor<T> out({c, h, w - 1});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx + 1 < w; ++xx)
        out.data()[(static_cast<std::int64_t>(ch) * h + y) * (w - 1) + xx] =
            x.data()[(static_cast<std::int64_t>(ch) * h + y) * w + xx + 1] -
            x.data()[(static_cast<std::int64_t>(ch) * h + y) * w + xx];
  return out;
}

template <typename T>
inline Var<T> diff_x(const Var<T>& x) {
  Tensor<T> out = diff_x(x.value());
  auto xn = x.node();
  return make_op_node<T>(std::move(out), {x}, [xn](const Tensor<T>& g, GradStore<T>& s) {
    const int c = g.dim(0), h = g.dim(1), wm = g.dim(2);
    Tensor<T> gx(xn->value.shape());
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < wm; ++xx) {
          const T gg = g.data()[(static_cast<std::int64_t>(ch) * h + y) * wm + xx];
          gx.data()[(static_cast<std::int64_t>(ch) * h + y) * (wm + 1) + xx + 1] += gg;
          gx.data()[(static_cast<std::int64_t>(ch) * h + y) * (wm + 1) + xx] -= gg;
        }
    s.add(xn.get(), gx);
  });
}

/// Forward difference along y: out [C,H-1,W].
template <typename T>
inline Tensor<T> diff_y(const Tensor<T>& x) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(h >= 2, "diff_y: height must be >= 2");
  Tensor<T> out({c, h - 1, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y + 1 < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out.data()[(static_cast<std::int64_t>(ch) * (h - 1) + y) * w + xx] =
            x.data()[(static_cast<std::int64_t>(ch) * h + y + 1) * w + xx] -
            x.data()[(static_cast<std::int64_t>(ch) * h + y) * w + xx];
  return out;
}

template <typename T>
inline Var<T> diff_y(const Var<T>& x) {
  Tensor<T> out = diff_y(x.value());
  auto xn = x.node();
  return make_op_node<T>(std::move(out), {x}, [xn](const Tensor<T>& g, GradStore<T>& s) {
    const int c = g.dim(0), hm = g.dim(1), w = g.dim(2);
    Tensor<T> gx(xn->value.shape());
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < hm; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const T gg = g.data()[(static_cast<std::int64_t>(ch) * hm + y) * w + xx];
          gx.data()[(static_cast<std::int64_t>(ch) * (hm + 1) + y + 1) * w + xx] += gg;
          gx.data()[(static_cast<std::int64_t>(ch) * (hm + 1) + y) * w + xx] -= gg;
        }
    s.add(xn.get(), gx);
  });
}

// ---------------------------------------------------------------------------
// Misc helpers
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> crop(const Tensor<T>& x, int y0, int x0, int h, int w) {
  require(y0 >= 0 && x0 >= 0 && y0 + h <= x.dim(1) && x0 + w <= x.dim(2), "crop: out of bounds");
  Tensor<T> out({x.dim(0), h, w});
  for (int c = 0; c < x.dim(0); ++c)
    for (int y = 0; y < h; ++y)
      std::copy(x.data() + (static_cast<std::int64_t>(c) * x.dim(1) + y0 + y) * x.dim(2) + x0,
                x.data() + (static_cast<std::int64_t>(c) * x.dim(1) + y0 + y) * x.dim(2) + x0 + w,
                out.data() + (static_cast<std::int64_t>(c) * h + y) * w);
  return out;
}

// Var/Tensor access shims so module forward code can be written once and
// instantiated for both the recorded (Var) and plain (Tensor) paths.
template <typename V, typename T>
struct AsOperand;

template <typename T>
struct AsOperand<Var<T>, T> {
  static const Var<T>& get(const Var<T>& p) { return p; }
};

template <typename T>
struct AsOperand<Tensor<T>, T> {
  static const Tensor<T>& get(const Var<T>& p) { return p.value(); }
};

template <typename V, typename T>
inline decltype(auto) as_operand(const Var<T>& p) {
  return AsOperand<V, T>::get(p);
}

template <typename T>
inline const Tensor<T>& value_of(const Tensor<T>& t) { return t; }
template <typename T>
inline const Tensor<T>& value_of(const Var<T>& v) { return v.value(); }

}  // namespace seqvr
