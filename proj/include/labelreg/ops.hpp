#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "labelreg/labels.hpp"
#include "labelreg/tensor.hpp"

namespace labelreg {

enum class PoolKind { kMax, kAvg };

namespace detail {

// Unrolls conv windows of one image into rows of a (ic*kh*kw) x row_stride
// matrix starting at column col0; out-of-range taps become zeros. Batch
// unrolling shares one matrix so each conv costs a single GEMM.
template <class S>
void im2col(const S* x, int ic, int h, int w, int kh, int kw, int stride, int pad, int oh, int ow,
            S* cols, std::int64_t row_stride, std::int64_t col0) {
  const std::int64_t plane = std::int64_t(h) * w;
  std::int64_t r = 0;
  for (int ci = 0; ci < ic; ++ci) {
    const S* xc = x + ci * plane;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++r) {
        S* dst = cols + r * row_stride + col0;
        // stride 1 rows are contiguous runs
        const int lo1 = std::max(0, pad - kx);
        const int hi1 = std::min(ow, w + pad - kx);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          S* row = dst + std::int64_t(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(row, row + ow, S(0));
            continue;
          }
          const S* src = xc + std::int64_t(iy) * w;
          if (stride == 1) {
            std::fill(row, row + lo1, S(0));
            if (hi1 > lo1) std::copy(src + (lo1 - pad + kx), src + (hi1 - pad + kx), row + lo1);
            std::fill(row + std::max(lo1, hi1), row + ow, S(0));
          } else {
            int ox = 0;
            int ix = -pad + kx;
            for (; ox < ow && ix < 0; ++ox, ix += stride) row[ox] = S(0);
            for (; ox < ow && ix < w; ++ox, ix += stride) row[ox] = src[ix];
            for (; ox < ow; ++ox) row[ox] = S(0);
          }
        }
      }
    }
  }
}

template <class S>
void col2im_add(const S* cols, int ic, int h, int w, int kh, int kw, int stride, int pad, int oh,
                int ow, S* x, std::int64_t row_stride, std::int64_t col0) {
  const std::int64_t plane = std::int64_t(h) * w;
  std::int64_t r = 0;
  for (int ci = 0; ci < ic; ++ci) {
    S* xc = x + ci * plane;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++r) {
        const S* src_r = cols + r * row_stride + col0;
        const int lo1 = std::max(0, pad - kx);
        const int hi1 = std::min(ow, w + pad - kx);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          S* dst = xc + std::int64_t(iy) * w;
          const S* src = src_r + std::int64_t(oy) * ow;
          if (stride == 1) {
            S* d = dst + (lo1 - pad + kx);
            for (int ox = lo1; ox < hi1; ++ox) d[ox - lo1] += src[ox];
          } else {
            int ox = 0;
            int ix = -pad + kx;
            for (; ox < ow && ix < 0; ++ox, ix += stride) {}
            for (; ox < ow && ix < w; ++ox, ix += stride) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation with zero padding. weight shape is (out_c, in_c, kh, kw),
// bias shape (1, out_c, 1, 1).
template <class S>
Tensor<S> conv2d(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& weight,
                 const Tensor<S>& bias, int stride, int pad) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (stride <= 0 || pad < 0)
    throw ConfigError("conv2d: stride must be positive and padding non-negative");
  if (ws.c != xs.c)
    throw ConfigError("conv2d: weight expects " + std::to_string(ws.c) + " input channels, got " +
                      std::to_string(xs.c));
  if (bias.shape().n != 1 || bias.shape().c != ws.n || bias.shape().h != 1 || bias.shape().w != 1)
    throw ConfigError("conv2d: bias shape " + bias.shape().str() + " does not match out channels " +
                      std::to_string(ws.n));
  const int oc = ws.n, ic = ws.c, kh = ws.h, kw = ws.w;
  const int oh = (xs.h + 2 * pad - kh) / stride + 1;
  const int ow = (xs.w + 2 * pad - kw) / stride + 1;
  if (xs.h + 2 * pad < kh || xs.w + 2 * pad < kw || oh < 1 || ow < 1)
    throw ConfigError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                      " does not fit input " + xs.str() + " with pad " + std::to_string(pad));

  Tensor<S> out({xs.n, oc, oh, ow});
  const std::int64_t K = std::int64_t(ic) * kh * kw;
  const std::int64_t P = std::int64_t(oh) * ow;
  const std::int64_t NP = std::int64_t(xs.n) * P;

  {
    VecX<S> cols(K * NP);
    for (int ni = 0; ni < xs.n; ++ni)
      detail::im2col(x.data() + x.image_offset(ni), ic, xs.h, xs.w, kh, kw, stride, pad, oh, ow,
                     cols.data(), NP, std::int64_t(ni) * P);
    VecX<S> prod(oc * NP);
    ConstMatMap<S> wm(weight.data(), oc, K);
    ConstMatMap<S> cm(cols.data(), K, NP);
    MatMap<S> pm(prod.data(), oc, NP);
    pm.noalias() = wm * cm;
    // scatter (oc, n*P) rows into the (n, oc, P) layout, adding bias
    for (int ni = 0; ni < xs.n; ++ni)
      for (int c = 0; c < oc; ++c) {
        const S* src = prod.data() + std::int64_t(c) * NP + std::int64_t(ni) * P;
        S* dst = out.data() + out.channel_offset(ni, c);
        const S b = bias.values()[c];
        for (std::int64_t p = 0; p < P; ++p) dst[p] = src[p] + b;
      }
  }

  const bool xg = x.requires_grad(), wg = weight.requires_grad(), bg = bias.requires_grad();
  if (tape.track(out, xg || wg || bg)) {
    const long oid = out.id(), xid = x.id(), wid = weight.id(), bid = bias.id();
    auto xv = x.storage();
    auto wv = weight.storage();
    tape.push_step(oid, [=, n = xs.n, h = xs.h, w = xs.w](GradMap<S>& g) {
      const VecX<S>& go = g.at(oid);
      const std::int64_t img = std::int64_t(ic) * h * w;
      // gather upstream grads into the (oc, n*P) layout used by the GEMMs
      VecX<S> gom_buf(oc * NP);
      for (int ni = 0; ni < n; ++ni)
        for (int c = 0; c < oc; ++c)
          std::copy_n(go.data() + (std::int64_t(ni) * oc + c) * P, P,
                      gom_buf.data() + std::int64_t(c) * NP + std::int64_t(ni) * P);
      ConstMatMap<S> gom(gom_buf.data(), oc, NP);

      if (wg || xg) {
        VecX<S> cols(K * NP);
        for (int ni = 0; ni < n; ++ni)
          detail::im2col(xv->data() + ni * img, ic, h, w, kh, kw, stride, pad, oh, ow, cols.data(),
                         NP, std::int64_t(ni) * P);
        if (wg) {
          VecX<S> dw(wv->size());
          MatMap<S> dwm(dw.data(), oc, K);
          ConstMatMap<S> cm(cols.data(), K, NP);
          dwm.noalias() = gom * cm.transpose();
          g.accum(wid, dw);
        }
        if (xg) {
          VecX<S>& dcols = cols;  // reuse the buffer
          ConstMatMap<S> wm(wv->data(), oc, K);
          MatMap<S> dcm(dcols.data(), K, NP);
          dcm.noalias() = wm.transpose() * gom;
          VecX<S> dx = VecX<S>::Zero(xv->size());
          for (int ni = 0; ni < n; ++ni)
            detail::col2im_add(dcols.data(), ic, h, w, kh, kw, stride, pad, oh, ow,
                               dx.data() + ni * img, NP, std::int64_t(ni) * P);
          g.accum(xid, dx);
        }
      }
      if (bg) {
        VecX<S> db(oc);
        for (int c = 0; c < oc; ++c) db[c] = gom.row(c).sum();
        g.accum(bid, db);
      }
    });
  }
  return out;
}

// Windowed max or mean. Max-pool backward routes gradient to the argmax
// element, first occurrence in row-major window order on ties. With padding,
// windows clip to the image: the max ignores padded taps and the mean divides
// by the valid count.
template <class S>
Tensor<S> pool2d(Tape<S>& tape, const Tensor<S>& x, PoolKind kind, int k, int stride,
                 int pad = 0) {
  const auto& xs = x.shape();
  if (k <= 0 || stride <= 0) throw ConfigError("pool2d: window and stride must be positive");
  if (pad < 0 || pad >= k) throw ConfigError("pool2d: padding must be in [0, k)");
  if (xs.h + 2 * pad < k || xs.w + 2 * pad < k)
    throw ConfigError("pool2d: window " + std::to_string(k) + " exceeds input " + xs.str());
  const int oh = (xs.h + 2 * pad - k) / stride + 1;
  const int ow = (xs.w + 2 * pad - k) / stride + 1;
  Tensor<S> out({xs.n, xs.c, oh, ow});

  const std::int64_t planes = std::int64_t(xs.n) * xs.c;
  const std::int64_t in_px = xs.pixels();
  const std::int64_t out_px = std::int64_t(oh) * ow;
  auto argmax = kind == PoolKind::kMax
                    ? std::make_shared<std::vector<std::int64_t>>(planes * out_px)
                    : nullptr;

  const S* xv = x.data();
  S* ov = out.data();
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const S* xp = xv + pl * in_px;
    S* op = ov + pl * out_px;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const int ylo = std::max(0, oy * stride - pad), xlo = std::max(0, ox * stride - pad);
        const int yhi = std::min(xs.h, oy * stride - pad + k);
        const int xhi = std::min(xs.w, ox * stride - pad + k);
        if (kind == PoolKind::kMax) {
          S best = xp[std::int64_t(ylo) * xs.w + xlo];
          std::int64_t best_at = std::int64_t(ylo) * xs.w + xlo;
          for (int iy = ylo; iy < yhi; ++iy)
            for (int ix = xlo; ix < xhi; ++ix) {
              const std::int64_t at = std::int64_t(iy) * xs.w + ix;
              if (xp[at] > best) {
                best = xp[at];
                best_at = at;
              }
            }
          op[std::int64_t(oy) * ow + ox] = best;
          (*argmax)[pl * out_px + oy * ow + ox] = pl * in_px + best_at;
        } else {
          double acc = 0;
          for (int iy = ylo; iy < yhi; ++iy)
            for (int ix = xlo; ix < xhi; ++ix) acc += double(xp[std::int64_t(iy) * xs.w + ix]);
          op[std::int64_t(oy) * ow + ox] = S(acc / (double(yhi - ylo) * (xhi - xlo)));
        }
      }
    }
  }

  if (tape.track(out, x.requires_grad())) {
    const long oid = out.id(), xid = x.id();
    const std::int64_t in_count = x.numel();
    if (kind == PoolKind::kMax) {
      tape.push_step(oid, [=](GradMap<S>& g) {
        const VecX<S>& go = g.at(oid);
        VecX<S> dx = VecX<S>::Zero(in_count);
        for (std::int64_t i = 0; i < go.size(); ++i) dx[(*argmax)[i]] += go[i];
        g.accum(xid, dx);
      });
    } else {
      const int w_in = xs.w, h_in = xs.h;
      tape.push_step(oid, [=](GradMap<S>& g) {
        const VecX<S>& go = g.at(oid);
        VecX<S> dx = VecX<S>::Zero(in_count);
        for (std::int64_t pl = 0; pl < planes; ++pl)
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
              const int ylo = std::max(0, oy * stride - pad), xlo = std::max(0, ox * stride - pad);
              const int yhi = std::min(h_in, oy * stride - pad + k);
              const int xhi = std::min(w_in, ox * stride - pad + k);
              const S gv = go[pl * out_px + std::int64_t(oy) * ow + ox] /
                           S(double(yhi - ylo) * (xhi - xlo));
              S* base = dx.data() + pl * in_px;
              for (int iy = ylo; iy < yhi; ++iy)
                for (int ix = xlo; ix < xhi; ++ix) base[std::int64_t(iy) * w_in + ix] += gv;
            }
        g.accum(xid, dx);
      });
    }
  }
  return out;
}

// Doubles H and W replicating each pixel.
template <class S>
Tensor<S> upsample_nearest2x(Tape<S>& tape, const Tensor<S>& x) {
  const auto& xs = x.shape();
  Tensor<S> out({xs.n, xs.c, 2 * xs.h, 2 * xs.w});
  const std::int64_t planes = std::int64_t(xs.n) * xs.c;
  const S* xv = x.data();
  S* ov = out.data();
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const S* xp = xv + pl * xs.pixels();
    S* op = ov + pl * 4 * xs.pixels();
    for (int y = 0; y < xs.h; ++y)
      for (int x2 = 0; x2 < xs.w; ++x2) {
        const S v = xp[std::int64_t(y) * xs.w + x2];
        S* o = op + std::int64_t(2 * y) * 2 * xs.w + 2 * x2;
        o[0] = v;
        o[1] = v;
        o[2 * xs.w] = v;
        o[2 * xs.w + 1] = v;
      }
  }
  if (tape.track(out, x.requires_grad())) {
    const long oid = out.id(), xid = x.id();
    const int h = xs.h, w = xs.w;
    const std::int64_t in_count = x.numel();
    tape.push_step(oid, [=](GradMap<S>& g) {
      const VecX<S>& go = g.at(oid);
      VecX<S> dx(in_count);
      for (std::int64_t pl = 0; pl < planes; ++pl) {
        const S* gp = go.data() + pl * 4 * std::int64_t(h) * w;
        S* dp = dx.data() + pl * std::int64_t(h) * w;
        for (int y = 0; y < h; ++y)
          for (int x2 = 0; x2 < w; ++x2) {
            const S* srow = gp + std::int64_t(2 * y) * 2 * w + 2 * x2;
            dp[std::int64_t(y) * w + x2] = srow[0] + srow[1] + srow[2 * w] + srow[2 * w + 1];
          }
      }
      g.accum(xid, dx);
    });
  }
  return out;
}

namespace detail {

struct BilinearAxis {
  std::vector<int> lo, hi;
  std::vector<double> t;
};

inline BilinearAxis bilinear_axis(int in, int out) {
  BilinearAxis a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.t.resize(out);
  const double scale = double(in) / double(out);
  for (int d = 0; d < out; ++d) {
    double src = (d + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int lo = int(src);
    if (lo > in - 1) lo = in - 1;
    a.lo[d] = lo;
    a.hi[d] = std::min(lo + 1, in - 1);
    a.t[d] = src - lo;
  }
  return a;
}

}  // namespace detail

// Align-corners-false bilinear resampling to (oh, ow); only upsampling (or
// identity) is supported. Constant inputs are preserved exactly. Runs as two
// separable lerp passes (vertical rows vectorize, horizontal works on a
// cached row).
template <class S>
Tensor<S> upsample_bilinear(Tape<S>& tape, const Tensor<S>& x, int oh, int ow) {
  const auto& xs = x.shape();
  if (oh < xs.h || ow < xs.w)
    throw ConfigError("upsample_bilinear: target " + std::to_string(oh) + "x" +
                      std::to_string(ow) + " smaller than input " + xs.str());
  const auto ay = detail::bilinear_axis(xs.h, oh);
  const auto ax = detail::bilinear_axis(xs.w, ow);

  Tensor<S> out({xs.n, xs.c, oh, ow});
  const std::int64_t planes = std::int64_t(xs.n) * xs.c;
  const std::int64_t in_px = xs.pixels();
  const std::int64_t out_px = std::int64_t(oh) * ow;
  const int w_in = xs.w;
  using RowMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
  using ConstRowMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;
  {
    const S* xv = x.data();
    S* ov = out.data();
    VecX<S> vrow(w_in);
    for (std::int64_t pl = 0; pl < planes; ++pl) {
      const S* xp = xv + pl * in_px;
      S* op = ov + pl * out_px;
      for (int y = 0; y < oh; ++y) {
        ConstRowMap r0(xp + std::int64_t(ay.lo[y]) * w_in, w_in);
        ConstRowMap r1(xp + std::int64_t(ay.hi[y]) * w_in, w_in);
        vrow = r0 + S(ay.t[y]) * (r1 - r0);
        S* orow = op + std::int64_t(y) * ow;
        const S* v = vrow.data();
        for (int x2 = 0; x2 < ow; ++x2) {
          const S v0 = v[ax.lo[x2]];
          orow[x2] = v0 + S(ax.t[x2]) * (v[ax.hi[x2]] - v0);
        }
      }
    }
  }

  if (tape.track(out, x.requires_grad())) {
    const long oid = out.id(), xid = x.id();
    const std::int64_t in_count = x.numel();
    tape.push_step(oid, [=](GradMap<S>& g) {
      const VecX<S>& go = g.at(oid);
      VecX<S> dx = VecX<S>::Zero(in_count);
      VecX<S> drow(w_in);
      for (std::int64_t pl = 0; pl < planes; ++pl) {
        const S* gp = go.data() + pl * out_px;
        S* dp = dx.data() + pl * in_px;
        for (int y = 0; y < oh; ++y) {
          drow.setZero();
          const S* grow = gp + std::int64_t(y) * ow;
          S* d = drow.data();
          for (int x2 = 0; x2 < ow; ++x2) {
            const S tx = S(ax.t[x2]);
            const S gv = grow[x2];
            d[ax.lo[x2]] += (S(1) - tx) * gv;
            d[ax.hi[x2]] += tx * gv;
          }
          // clamped rows collapse lo == hi; the full weight lands there
          if (ay.hi[y] == ay.lo[y]) {
            RowMap(dp + std::int64_t(ay.lo[y]) * w_in, w_in) += drow;
          } else {
            const S ty = S(ay.t[y]);
            RowMap(dp + std::int64_t(ay.lo[y]) * w_in, w_in) += (S(1) - ty) * drow;
            RowMap(dp + std::int64_t(ay.hi[y]) * w_in, w_in) += ty * drow;
          }
        }
      }
      g.accum(xid, dx);
    });
  }
  return out;
}

// Elementwise max(0, x). Subgradient at exactly 0 is 0.
template <class S>
Tensor<S> relu(Tape<S>& tape, const Tensor<S>& x) {
  Tensor<S> out(x.shape(), x.values().max(S(0)));
  if (tape.track(out, x.requires_grad())) {
    const long oid = out.id(), xid = x.id();
    auto xv = x.storage();
    tape.push_step(oid, [=](GradMap<S>& g) {
      g.accum(xid, (xv->array() > S(0)).template cast<S>() * g.at(oid));
    });
  }
  return out;
}

template <class S>
Tensor<S> concat_channels(Tape<S>& tape, const std::vector<Tensor<S>>& xs) {
  if (xs.empty()) throw ConfigError("concat_channels: no inputs");
  const auto& s0 = xs.front().shape();
  int total_c = 0;
  bool any_grad = false;
  for (const auto& t : xs) {
    const auto& s = t.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
      throw ConfigError("concat_channels: mismatched dims " + s.str() + " vs " + s0.str());
    total_c += s.c;
    any_grad = any_grad || t.requires_grad();
  }
  Tensor<S> out({s0.n, total_c, s0.h, s0.w});
  const std::int64_t px = s0.pixels();
  for (int ni = 0; ni < s0.n; ++ni) {
    S* dst = out.data() + out.image_offset(ni);
    for (const auto& t : xs) {
      const std::int64_t count = std::int64_t(t.shape().c) * px;
      std::copy_n(t.data() + t.image_offset(ni), count, dst);
      dst += count;
    }
  }
  if (tape.track(out, any_grad)) {
    const long oid = out.id();
    struct Piece {
      long id;
      int c;
      bool grad;
    };
    std::vector<Piece> pieces;
    for (const auto& t : xs) pieces.push_back({t.id(), t.shape().c, t.requires_grad()});
    tape.push_step(oid, [=, n = s0.n](GradMap<S>& g) {
      const VecX<S>& go = g.at(oid);
      std::int64_t base_c = 0;
      for (const auto& p : pieces) {
        if (p.grad) {
          VecX<S> dx(std::int64_t(n) * p.c * px);
          for (int ni = 0; ni < n; ++ni)
            std::copy_n(go.data() + (std::int64_t(ni) * total_c + base_c) * px,
                        std::int64_t(p.c) * px, dx.data() + std::int64_t(ni) * p.c * px);
          g.accum(p.id, dx);
        }
        base_c += p.c;
      }
    });
  }
  return out;
}

// Channels [c0, c1) of x as a new tensor.
template <class S>
Tensor<S> slice_channels(Tape<S>& tape, const Tensor<S>& x, int c0, int c1) {
  const auto& xs = x.shape();
  if (c0 < 0 || c1 <= c0 || c1 > xs.c)
    throw ConfigError("slice_channels: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                      ") invalid for " + std::to_string(xs.c) + " channels");
  const int sc = c1 - c0;
  const std::int64_t px = xs.pixels();
  Tensor<S> out({xs.n, sc, xs.h, xs.w});
  for (int ni = 0; ni < xs.n; ++ni)
    std::copy_n(x.data() + x.channel_offset(ni, c0), std::int64_t(sc) * px,
                out.data() + out.image_offset(ni));
  if (tape.track(out, x.requires_grad())) {
    const long oid = out.id(), xid = x.id();
    const std::int64_t in_count = x.numel();
    tape.push_step(oid, [=, n = xs.n, xc = xs.c](GradMap<S>& g) {
      const VecX<S>& go = g.at(oid);
      VecX<S> dx = VecX<S>::Zero(in_count);
      for (int ni = 0; ni < n; ++ni)
        std::copy_n(go.data() + std::int64_t(ni) * sc * px, std::int64_t(sc) * px,
                    dx.data() + (std::int64_t(ni) * xc + c0) * px);
      g.accum(xid, dx);
    });
  }
  return out;
}

template <class S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  if (!(a.shape() == b.shape()))
    throw ConfigError("add: shapes " + a.shape().str() + " vs " + b.shape().str());
  Tensor<S> out(a.shape(), a.values() + b.values());
  if (tape.track(out, a.requires_grad() || b.requires_grad())) {
    const long oid = out.id(), aid = a.id(), bid = b.id();
    const bool ag = a.requires_grad(), bg = b.requires_grad();
    tape.push_step(oid, [=](GradMap<S>& g) {
      if (ag) g.accum(aid, g.at(oid));
      if (bg) g.accum(bid, g.at(oid));
    });
  }
  return out;
}

template <class S>
Tensor<S> mul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  if (!(a.shape() == b.shape()))
    throw ConfigError("mul: shapes " + a.shape().str() + " vs " + b.shape().str());
  Tensor<S> out(a.shape(), a.values() * b.values());
  if (tape.track(out, a.requires_grad() || b.requires_grad())) {
    const long oid = out.id(), aid = a.id(), bid = b.id();
    const bool ag = a.requires_grad(), bg = b.requires_grad();
    auto av = a.storage(), bv = b.storage();
    tape.push_step(oid, [=](GradMap<S>& g) {
      if (ag) g.accum(aid, g.at(oid) * bv->array());
      if (bg) g.accum(bid, g.at(oid) * av->array());
    });
  }
  return out;
}

template <class S>
Tensor<S> scale(Tape<S>& tape, const Tensor<S>& a, S k) {
  Tensor<S> out(a.shape(), a.values() * k);
  if (tape.track(out, a.requires_grad())) {
    const long oid = out.id(), aid = a.id();
    tape.push_step(oid, [=](GradMap<S>& g) { g.accum(aid, g.at(oid) * k); });
  }
  return out;
}

// Sum of all elements as a (1,1,1,1) tensor.
template <class S>
Tensor<S> sum_all(Tape<S>& tape, const Tensor<S>& a) {
  double acc = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) acc += double(a.values()[i]);
  Tensor<S> out({1, 1, 1, 1}, VecX<S>::Constant(1, S(acc)));
  if (tape.track(out, a.requires_grad())) {
    const long oid = out.id(), aid = a.id();
    const std::int64_t count = a.numel();
    tape.push_step(oid, [=](GradMap<S>& g) {
      g.accum(aid, VecX<S>::Constant(count, g.at(oid)[0]));
    });
  }
  return out;
}

// Mean over non-void pixels of -log softmax(logits)[target]. Void pixels
// contribute nothing to the value or the gradient.
template <class S>
Tensor<S> softmax_ce_loss(Tape<S>& tape, const Tensor<S>& logits, const LabelMap& target,
                          int void_id = kVoidId) {
  const auto& ls = logits.shape();
  if (target.n != ls.n || target.h != ls.h || target.w != ls.w)
    throw ConfigError("softmax_ce_loss: label dims (" + std::to_string(target.n) + "," +
                      std::to_string(target.h) + "," + std::to_string(target.w) +
                      ") do not match logits " + ls.str());
  const int K = ls.c;
  const std::int64_t px = ls.pixels();

  auto probs = std::make_shared<VecX<S>>(logits.numel());
  double total = 0;
  std::int64_t support = 0;
  for (int ni = 0; ni < ls.n; ++ni) {
    const S* z = logits.data() + logits.image_offset(ni);
    S* pr = probs->data() + logits.image_offset(ni);
    const std::uint8_t* ids = target.ids.data() + std::int64_t(ni) * px;
    for (std::int64_t p = 0; p < px; ++p) {
      const int t = ids[p];
      if (t != void_id && t >= K)
        throw DataError("softmax_ce_loss: label id " + std::to_string(t) + " out of range (K=" +
                        std::to_string(K) + ")");
      double m = double(z[p]);
      for (int k = 1; k < K; ++k) m = std::max(m, double(z[std::int64_t(k) * px + p]));
      double sum = 0;
      for (int k = 0; k < K; ++k) {
        const double e = std::exp(double(z[std::int64_t(k) * px + p]) - m);
        pr[std::int64_t(k) * px + p] = S(e);  // normalized below
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (int k = 0; k < K; ++k) pr[std::int64_t(k) * px + p] = S(double(pr[std::int64_t(k) * px + p]) * inv);
      if (t == void_id) continue;
      total += std::log(sum) - (double(z[std::int64_t(t) * px + p]) - m);
      ++support;
    }
  }
  if (support == 0) throw DataError("softmax_ce_loss: empty loss support (all pixels void)");
  Tensor<S> out({1, 1, 1, 1}, VecX<S>::Constant(1, S(total / double(support))));

  if (tape.track(out, logits.requires_grad())) {
    const long oid = out.id(), lid = logits.id();
    auto ids = std::make_shared<std::vector<std::uint8_t>>(target.ids);
    tape.push_step(oid, [=, n = ls.n](GradMap<S>& g) {
      const S go = g.at(oid)[0];
      const S inv_m = go / S(double(support));
      VecX<S> dz = VecX<S>::Zero(probs->size());
      for (int ni = 0; ni < n; ++ni) {
        const S* pr = probs->data() + std::int64_t(ni) * K * px;
        S* dst = dz.data() + std::int64_t(ni) * K * px;
        const std::uint8_t* tp = ids->data() + std::int64_t(ni) * px;
        for (std::int64_t p = 0; p < px; ++p) {
          const int t = tp[p];
          if (t == void_id) continue;
          for (int k = 0; k < K; ++k) {
            const std::int64_t at = std::int64_t(k) * px + p;
            dst[at] = (pr[at] - S(k == t ? 1 : 0)) * inv_m;
          }
        }
      }
      g.accum(lid, dz);
    });
  }
  return out;
}

// Mean squared difference over unmasked elements. `mask`, when present, holds
// one byte per pixel (nonzero = include); it applies to every channel of the
// pixel.
template <class S>
Tensor<S> mse_loss(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target,
                   const std::vector<std::uint8_t>* mask = nullptr) {
  if (!(pred.shape() == target.shape()))
    throw ConfigError("mse_loss: shapes " + pred.shape().str() + " vs " + target.shape().str());
  const auto& s = pred.shape();
  const std::int64_t px = s.pixels();
  if (mask && std::int64_t(mask->size()) != std::int64_t(s.n) * px)
    throw ConfigError("mse_loss: mask size " + std::to_string(mask->size()) +
                      " does not match pixel count");

  std::int64_t included_px = 0;
  if (mask) {
    for (auto m : *mask) included_px += m ? 1 : 0;
  } else {
    included_px = std::int64_t(s.n) * px;
  }
  const std::int64_t support = included_px * s.c;
  if (support == 0) throw DataError("mse_loss: empty mask support");

  double total = 0;
  for (int ni = 0; ni < s.n; ++ni) {
    const S* p = pred.data() + pred.image_offset(ni);
    const S* t = target.data() + target.image_offset(ni);
    const std::uint8_t* mk = mask ? mask->data() + std::int64_t(ni) * px : nullptr;
    for (int c = 0; c < s.c; ++c)
      for (std::int64_t i = 0; i < px; ++i) {
        if (mk && !mk[i]) continue;
        const double d = double(p[std::int64_t(c) * px + i]) - double(t[std::int64_t(c) * px + i]);
        total += d * d;
      }
  }
  Tensor<S> out({1, 1, 1, 1}, VecX<S>::Constant(1, S(total / double(support))));

  if (tape.track(out, pred.requires_grad() || target.requires_grad())) {
    const long oid = out.id(), pid = pred.id(), tid = target.id();
    const bool pg = pred.requires_grad(), tg = target.requires_grad();
    auto pv = pred.storage(), tv = target.storage();
    auto mk = mask ? std::make_shared<std::vector<std::uint8_t>>(*mask) : nullptr;
    tape.push_step(oid, [=, n = s.n, c = s.c](GradMap<S>& g) {
      const S coef = g.at(oid)[0] * S(2) / S(double(support));
      VecX<S> d(pv->size());
      if (mk) {
        d.setZero();
        for (int ni = 0; ni < n; ++ni) {
          const std::uint8_t* m = mk->data() + std::int64_t(ni) * px;
          for (int ci = 0; ci < c; ++ci) {
            const std::int64_t base = (std::int64_t(ni) * c + ci) * px;
            for (std::int64_t i = 0; i < px; ++i)
              if (m[i]) d[base + i] = ((*pv)[base + i] - (*tv)[base + i]) * coef;
          }
        }
      } else {
        d = (pv->array() - tv->array()) * coef;
      }
      if (pg) g.accum(pid, d);
      if (tg) g.accum(tid, -d);
    });
  }
  return out;
}

// Per-channel affine standardization with fixed statistics; divisors are
// floored at eps so constant channels map to zero.
template <class S>
Tensor<S> standardize_channels(Tape<S>& tape, const Tensor<S>& x, const VecX<S>& mean,
                               const VecX<S>& stddev, S eps = S(1e-5)) {
  const auto& xs = x.shape();
  if (mean.size() != xs.c || stddev.size() != xs.c)
    throw ConfigError("standardize_channels: stats cover " + std::to_string(mean.size()) +
                      " channels, input has " + std::to_string(xs.c));
  Tensor<S> out(xs);
  const std::int64_t px = xs.pixels();
  VecX<S> inv(xs.c);
  for (int c = 0; c < xs.c; ++c) inv[c] = S(1) / std::max(stddev[c], eps);
  for (int ni = 0; ni < xs.n; ++ni)
    for (int c = 0; c < xs.c; ++c) {
      const std::int64_t base = x.channel_offset(ni, c);
      for (std::int64_t i = 0; i < px; ++i)
        out.data()[base + i] = (x.data()[base + i] - mean[c]) * inv[c];
    }
  if (tape.track(out, x.requires_grad())) {
    const long oid = out.id(), xid = x.id();
    auto invp = std::make_shared<VecX<S>>(inv);
    tape.push_step(oid, [=, n = xs.n, c = xs.c](GradMap<S>& g) {
      const VecX<S>& go = g.at(oid);
      VecX<S> dx(go.size());
      for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
          const std::int64_t base = (std::int64_t(ni) * c + ci) * px;
          for (std::int64_t i = 0; i < px; ++i) dx[base + i] = go[base + i] * (*invp)[ci];
        }
      g.accum(xid, dx);
    });
  }
  return out;
}

// Streaming per-channel moment accumulator for standardization calibration.
template <class S>
class ChannelStatsAccum {
 public:
  explicit ChannelStatsAccum(int channels)
      : sum_(VecX<double>::Zero(channels)), sumsq_(VecX<double>::Zero(channels)), count_(0) {}

  void add(const Tensor<S>& x) {
    const auto& s = x.shape();
    if (s.c != sum_.size()) throw ConfigError("ChannelStatsAccum: channel count changed");
    const std::int64_t px = s.pixels();
    for (int ni = 0; ni < s.n; ++ni)
      for (int c = 0; c < s.c; ++c) {
        const S* p = x.data() + x.channel_offset(ni, c);
        double a = 0, b = 0;
        for (std::int64_t i = 0; i < px; ++i) {
          a += double(p[i]);
          b += double(p[i]) * double(p[i]);
        }
        sum_[c] += a;
        sumsq_[c] += b;
      }
    count_ += std::int64_t(s.n) * px;
  }

  VecX<S> mean() const { return (sum_ / double(count_)).template cast<S>(); }
  VecX<S> stddev() const {
    VecX<double> m = sum_ / double(count_);
    VecX<double> var = (sumsq_ / double(count_) - m.square()).max(0.0);
    return var.sqrt().template cast<S>();
  }

 private:
  VecX<double> sum_, sumsq_;
  std::int64_t count_;
};

}  // namespace labelreg
