// Strided 2D convolution and its transpose, lowered to GEMM via im2col.
//
// Layouts: activations (N, C, H, W); conv weights (F, C, kh, kw); transposed
// conv weights (C, F, kh, kw). Output extent follows
// floor((H + 2*pad - kernel) / stride) + 1; the transpose inverts it.

#pragma once

#include "bevplan/autodiff.hpp"

namespace bevplan {

inline int conv_out_extent(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

inline int conv_transpose_out_extent(int in, int kernel, int stride, int pad) {
  return (in - 1) * stride - 2 * pad + kernel;
}

namespace detail {

// image (C, H, W) -> cols (C*kh*kw, oh*ow)
template <typename S>
void im2col(const S* img, int c, int h, int w, int kh, int kw, int stride, int pad, int oh,
            int ow, S* cols) {
  for (int ch = 0; ch < c; ++ch) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        S* dst = cols + ((static_cast<int64_t>(ch) * kh + ki) * kw + kj) *
                            (static_cast<int64_t>(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < ow; ++ox) *dst++ = S(0);
            continue;
          }
          const S* src_row = img + (static_cast<int64_t>(ch) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride + kj - pad;
            *dst++ = (ix >= 0 && ix < w) ? src_row[ix] : S(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: cols (C*kh*kw, oh*ow) scatter-added into image (C, H, W).
template <typename S>
void col2im(const S* cols, int c, int h, int w, int kh, int kw, int stride, int pad, int oh,
            int ow, S* img) {
  for (int ch = 0; ch < c; ++ch) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const S* src = cols + ((static_cast<int64_t>(ch) * kh + ki) * kw + kj) *
                                  (static_cast<int64_t>(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) {
            src += ow;
            continue;
          }
          S* dst_row = img + (static_cast<int64_t>(ch) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride + kj - pad;
            if (ix >= 0 && ix < w) dst_row[ix] += *src;
            ++src;
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: (N, C, H, W), w: (F, C, kh, kw), b: (F) or undefined for no bias.
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, int stride, int pad) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
    throw ShapeError("conv2d: input " + shape_str(xs) + " vs weight " + shape_str(ws));
  const int n = xs[0], c = xs[1], h = xs[2], wd = xs[3];
  const int f = ws[0], kh = ws[2], kw = ws[3];
  const bool has_bias = b.defined();
  if (has_bias && b.shape() != Shape{f})
    throw ShapeError("conv2d: bias shape " + shape_str(b.shape()) + " vs " +
                     std::to_string(f) + " filters");
  const int oh = conv_out_extent(h, kh, stride, pad);
  const int ow = conv_out_extent(wd, kw, stride, pad);
  if (oh <= 0 || ow <= 0)
    throw ShapeError("conv2d: empty output for input " + shape_str(xs));

  const int ck = c * kh * kw;
  const int64_t ospatial = static_cast<int64_t>(oh) * ow;
  Tensor<S> out({n, f, oh, ow});
  Tensor<S> cols({ck, static_cast<int>(ospatial)});
  for (int s0 = 0; s0 < n; ++s0) {
    detail::im2col(x.value().data() + static_cast<int64_t>(s0) * c * h * wd, c, h, wd, kh, kw,
                   stride, pad, oh, ow, cols.data());
    auto om = typename Tensor<S>::MatMap(out.data() + static_cast<int64_t>(s0) * f * ospatial,
                                         f, static_cast<int>(ospatial));
    om.noalias() = w.value().mat(f, ck) * cols.mat(ck, static_cast<int>(ospatial));
    if (has_bias)
      for (int fi = 0; fi < f; ++fi) om.row(fi).array() += b.value()[fi];
  }

  Var<S> r = has_bias ? detail::make_op(std::move(out), {x, w, b})
                      : detail::make_op(std::move(out), {x, w});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    Node<S>* wn = w.node();
    Node<S>* bn = has_bias ? b.node() : nullptr;
    rn->backward_fn = [rn, xn, wn, bn, n, c, h, wd, f, kh, kw, stride, pad, oh, ow, ck,
                       ospatial] {
      Tensor<S> cols({ck, static_cast<int>(ospatial)});
      for (int s0 = 0; s0 < n; ++s0) {
        auto gm = typename Tensor<S>::ConstMatMap(
            rn->grad.data() + static_cast<int64_t>(s0) * f * ospatial, f,
            static_cast<int>(ospatial));
        if (wn->requires_grad) {
          detail::im2col(xn->value.data() + static_cast<int64_t>(s0) * c * h * wd, c, h, wd, kh,
                         kw, stride, pad, oh, ow, cols.data());
          wn->grad.mat(f, ck).noalias() +=
              gm * cols.mat(ck, static_cast<int>(ospatial)).transpose();
        }
        if (bn && bn->requires_grad)
          for (int fi = 0; fi < f; ++fi) bn->grad[fi] += gm.row(fi).sum();
        if (xn->requires_grad) {
          cols.mat(ck, static_cast<int>(ospatial)).noalias() =
              wn->value.mat(f, ck).transpose() * gm;
          detail::col2im(cols.data(), c, h, wd, kh, kw, stride, pad, oh, ow,
                         xn->grad.data() + static_cast<int64_t>(s0) * c * h * wd);
        }
      }
    };
  }
  return r;
}

// x: (N, C, H, W), w: (C, F, kh, kw), b: (F) or undefined.
template <typename S>
Var<S> conv2d_transpose(const Var<S>& x, const Var<S>& w, const Var<S>& b, int stride, int pad) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[0])
    throw ShapeError("conv2d_transpose: input " + shape_str(xs) + " vs weight " + shape_str(ws));
  const int n = xs[0], c = xs[1], h = xs[2], wd = xs[3];
  const int f = ws[1], kh = ws[2], kw = ws[3];
  const bool has_bias = b.defined();
  if (has_bias && b.shape() != Shape{f})
    throw ShapeError("conv2d_transpose: bias shape " + shape_str(b.shape()) + " vs " +
                     std::to_string(f) + " filters");
  const int oh = conv_transpose_out_extent(h, kh, stride, pad);
  const int ow = conv_transpose_out_extent(wd, kw, stride, pad);
  if (oh <= 0 || ow <= 0)
    throw ShapeError("conv2d_transpose: empty output for input " + shape_str(xs));

  const int fk = f * kh * kw;
  const int64_t ispatial = static_cast<int64_t>(h) * wd;
  const int64_t ospatial = static_cast<int64_t>(oh) * ow;
  Tensor<S> out({n, f, oh, ow});
  Tensor<S> cols({fk, static_cast<int>(ispatial)});
  for (int s0 = 0; s0 < n; ++s0) {
    auto xm = typename Tensor<S>::ConstMatMap(
        x.value().data() + static_cast<int64_t>(s0) * c * ispatial, c,
        static_cast<int>(ispatial));
    cols.mat(fk, static_cast<int>(ispatial)).noalias() = w.value().mat(c, fk).transpose() * xm;
    S* optr = out.data() + static_cast<int64_t>(s0) * f * ospatial;
    detail::col2im(cols.data(), f, oh, ow, kh, kw, stride, pad, h, wd, optr);
    if (has_bias) {
      auto om = typename Tensor<S>::MatMap(optr, f, static_cast<int>(ospatial));
      for (int fi = 0; fi < f; ++fi) om.row(fi).array() += b.value()[fi];
    }
  }

  Var<S> r = has_bias ? detail::make_op(std::move(out), {x, w, b})
                      : detail::make_op(std::move(out), {x, w});
  if (r.requires_grad()) {
    Node<S>* rn = r.node();
    Node<S>* xn = x.node();
    Node<S>* wn = w.node();
    Node<S>* bn = has_bias ? b.node() : nullptr;
    rn->backward_fn = [rn, xn, wn, bn, n, c, h, wd, f, kh, kw, stride, pad, oh, ow, fk,
                       ispatial, ospatial] {
      Tensor<S> gcols({fk, static_cast<int>(ispatial)});
      for (int s0 = 0; s0 < n; ++s0) {
        const S* gptr = rn->grad.data() + static_cast<int64_t>(s0) * f * ospatial;
        detail::im2col(gptr, f, oh, ow, kh, kw, stride, pad, h, wd, gcols.data());
        if (bn && bn->requires_grad) {
          auto gm = typename Tensor<S>::ConstMatMap(gptr, f, static_cast<int>(ospatial));
          for (int fi = 0; fi < f; ++fi) bn->grad[fi] += gm.row(fi).sum();
        }
        if (wn->requires_grad) {
          auto xm = typename Tensor<S>::ConstMatMap(
              xn->value.data() + static_cast<int64_t>(s0) * c * ispatial, c,
              static_cast<int>(ispatial));
          wn->grad.mat(c, fk).noalias() +=
              xm * gcols.mat(fk, static_cast<int>(ispatial)).transpose();
        }
        if (xn->requires_grad) {
          auto gxm = typename Tensor<S>::MatMap(
              xn->grad.data() + static_cast<int64_t>(s0) * c * ispatial, c,
              static_cast<int>(ispatial));
          gxm.noalias() += wn->value.mat(c, fk) * gcols.mat(fk, static_cast<int>(ispatial));
        }
      }
    };
  }
  return r;
}

}  // namespace bevplan
