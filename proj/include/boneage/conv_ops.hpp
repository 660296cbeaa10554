#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "boneage/tensor.hpp"

namespace boneage {

/// 2-D cross-correlation (no kernel flip) over NCHW input.
/// x: [N,C,H,W], w: [F,C,kh,kw], bias: [F] or undefined for none.
template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias,
                  std::size_t stride, std::size_t padding) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d needs NCHW input and FCkhkw weights, got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t F = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (w.shape()[1] != C)
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) +
                     ", weights " + shape_str(w.shape()));
  if (stride == 0) throw ValueError("conv2d: stride must be positive");
  if (kh > H + 2 * padding || kw > W + 2 * padding)
    throw ShapeError("conv2d kernel " + shape_str(w.shape()) + " exceeds padded input " +
                     shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.shape()[0] != F))
    throw ShapeError("conv2d bias must be [F], got " + shape_str(bias.shape()));

  const std::size_t OH = (H + 2 * padding - kh) / stride + 1;
  const std::size_t OW = (W + 2 * padding - kw) / stride + 1;

  std::vector<S> out(N * F * OH * OW, S(0));
  const S* xv = x.values().data();
  const S* wv = w.values().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f) {
      S* orow0 = out.data() + ((n * F + f) * OH) * OW;
      if (has_bias) {
        const S b = bias.values()[f];
        for (std::size_t i = 0; i < OH * OW; ++i) orow0[i] = b;
      }
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const S wgt = wv[((f * C + c) * kh + ky) * kw + kx];
            if (wgt == S(0)) continue;
            for (std::size_t oy = 0; oy < OH; ++oy) {
              const std::ptrdiff_t iy =
                  static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              const S* xrow = xv + ((n * C + c) * H + iy) * W;
              S* orow = orow0 + oy * OW;
              for (std::size_t ox = 0; ox < OW; ++ox) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                orow[ox] += wgt * xrow[ix];
              }
            }
          }
    }

  auto xn = x.node();
  auto wn = w.node();
  auto bn = has_bias ? bias.node() : nullptr;
  std::vector<TensorT<S>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return TensorT<S>::make_op(
      "conv2d", {N, F, OH, OW}, std::move(out), std::move(inputs),
      [xn, wn, bn, N, C, H, W, F, kh, kw, OH, OW, stride, padding](detail::Node<S>& o) {
        const S* g = o.grad.data();
        if (bn && bn->requires_grad) {
          std::vector<S> gb(F, S(0));
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t f = 0; f < F; ++f) {
              const S* grow = g + ((n * F + f) * OH) * OW;
              S acc = S(0);
              for (std::size_t i = 0; i < OH * OW; ++i) acc += grow[i];
              gb[f] += acc;
            }
          bn->accumulate(gb);
        }
        if (wn->requires_grad) {
          std::vector<S> gw(F * C * kh * kw, S(0));
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t f = 0; f < F; ++f)
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t ky = 0; ky < kh; ++ky)
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    S acc = S(0);
                    for (std::size_t oy = 0; oy < OH; ++oy) {
                      const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                static_cast<std::ptrdiff_t>(padding);
                      if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                      const S* xrow = xn->values.data() + ((n * C + c) * H + iy) * W;
                      const S* grow = g + ((n * F + f) * OH + oy) * OW;
                      for (std::size_t ox = 0; ox < OW; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                  static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                        acc += grow[ox] * xrow[ix];
                      }
                    }
                    gw[((f * C + c) * kh + ky) * kw + kx] += acc;
                  }
          wn->accumulate(gw);
        }
        if (xn->requires_grad) {
          std::vector<S> gx(N * C * H * W, S(0));
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t f = 0; f < F; ++f)
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t ky = 0; ky < kh; ++ky)
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const S wgt = wn->values[((f * C + c) * kh + ky) * kw + kx];
                    if (wgt == S(0)) continue;
                    for (std::size_t oy = 0; oy < OH; ++oy) {
                      const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                static_cast<std::ptrdiff_t>(padding);
                      if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                      S* gxrow = gx.data() + ((n * C + c) * H + iy) * W;
                      const S* grow = g + ((n * F + f) * OH + oy) * OW;
                      for (std::size_t ox = 0; ox < OW; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                  static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                        gxrow[ix] += wgt * grow[ox];
                      }
                    }
                  }
          xn->accumulate(gx);
        }
      });
}

template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, std::size_t stride,
                  std::size_t padding) {
  return conv2d(x, w, TensorT<S>(), stride, padding);
}

/// Max pooling over NCHW. Gradient goes to the first maximum in row-major
/// window order; padding cells (treated as -inf) never win.
template <class S>
TensorT<S> maxpool2d(const TensorT<S>& x, std::size_t window, std::size_t stride,
                     std::size_t padding = 0) {
  if (x.rank() != 4) throw ShapeError("maxpool2d needs NCHW input, got " + shape_str(x.shape()));
  if (window == 0 || stride == 0) throw ValueError("maxpool2d: window and stride must be positive");
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (window > H + 2 * padding || window > W + 2 * padding)
    throw ShapeError("maxpool2d window " + std::to_string(window) + " exceeds padded input " +
                     shape_str(x.shape()));
  if (padding >= window) throw ValueError("maxpool2d: padding must be smaller than window");
  const std::size_t OH = (H + 2 * padding - window) / stride + 1;
  const std::size_t OW = (W + 2 * padding - window) / stride + 1;

  std::vector<S> out(N * C * OH * OW);
  std::vector<std::uint32_t> argmax(out.size());
  const S* xv = x.values().data();
  std::size_t oi = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const S* plane = xv + (n * C + c) * H * W;
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox, ++oi) {
          S best = -std::numeric_limits<S>::infinity();
          std::uint32_t best_at = 0;
          for (std::size_t ky = 0; ky < window; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                      static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t kx = 0; kx < window; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
              const S v = plane[iy * static_cast<std::ptrdiff_t>(W) + ix];
              if (v > best) {  // strict: ties keep the first row-major hit
                best = v;
                best_at = static_cast<std::uint32_t>(iy * static_cast<std::ptrdiff_t>(W) + ix);
              }
            }
          }
          out[oi] = best;
          argmax[oi] = best_at;
        }
    }

  auto xn = x.node();
  return TensorT<S>::make_op(
      "maxpool2d", {N, C, OH, OW}, std::move(out), {x},
      [xn, argmax = std::move(argmax), N, C, H, W, OH, OW](detail::Node<S>& o) {
        std::vector<S> gx(N * C * H * W, S(0));
        std::size_t oi = 0;
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          S* plane = gx.data() + nc * H * W;
          for (std::size_t i = 0; i < OH * OW; ++i, ++oi) plane[argmax[oi]] += o.grad[oi];
        }
        xn->accumulate(gx);
      });
}

namespace detail {

// Corner-aligned source coordinate: out index i maps to i*(in-1)/(out-1);
// a single output sample reads index 0.
inline double corner_aligned_coord(std::size_t i, std::size_t in, std::size_t out) {
  if (out <= 1 || in <= 1) return 0.0;
  return static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
}

}  // namespace detail

/// Bilinear resize of NCHW maps with corner-aligned sampling.
template <class S>
TensorT<S> upsample_bilinear(const TensorT<S>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4) throw ShapeError("upsample_bilinear needs NCHW input, got " + shape_str(x.shape()));
  if (out_h == 0 || out_w == 0) throw ValueError("upsample_bilinear: output extents must be >= 1");
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];

  struct Lerp {
    std::size_t lo, hi;
    S frac;
  };
  std::vector<Lerp> ys(out_h), xs(out_w);
  for (std::size_t i = 0; i < out_h; ++i) {
    const double sy = detail::corner_aligned_coord(i, H, out_h);
    const std::size_t lo = static_cast<std::size_t>(sy);
    ys[i] = {lo, std::min(lo + 1, H - 1), static_cast<S>(sy - static_cast<double>(lo))};
  }
  for (std::size_t i = 0; i < out_w; ++i) {
    const double sx = detail::corner_aligned_coord(i, W, out_w);
    const std::size_t lo = static_cast<std::size_t>(sx);
    xs[i] = {lo, std::min(lo + 1, W - 1), static_cast<S>(sx - static_cast<double>(lo))};
  }

  std::vector<S> out(N * C * out_h * out_w);
  const S* xv = x.values().data();
  std::size_t oi = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const S* plane = xv + nc * H * W;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& ly = ys[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox, ++oi) {
        const auto& lx = xs[ox];
        const S top = plane[ly.lo * W + lx.lo] * (S(1) - lx.frac) + plane[ly.lo * W + lx.hi] * lx.frac;
        const S bot = plane[ly.hi * W + lx.lo] * (S(1) - lx.frac) + plane[ly.hi * W + lx.hi] * lx.frac;
        out[oi] = top * (S(1) - ly.frac) + bot * ly.frac;
      }
    }
  }

  auto xn = x.node();
  return TensorT<S>::make_op(
      "upsample_bilinear", {N, C, out_h, out_w}, std::move(out), {x},
      [xn, ys = std::move(ys), xs = std::move(xs), N, C, H, W, out_h, out_w](detail::Node<S>& o) {
        std::vector<S> gx(N * C * H * W, S(0));
        std::size_t oi = 0;
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          S* plane = gx.data() + nc * H * W;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const auto& ly = ys[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox, ++oi) {
              const auto& lx = xs[ox];
              const S g = o.grad[oi];
              plane[ly.lo * W + lx.lo] += g * (S(1) - ly.frac) * (S(1) - lx.frac);
              plane[ly.lo * W + lx.hi] += g * (S(1) - ly.frac) * lx.frac;
              plane[ly.hi * W + lx.lo] += g * ly.frac * (S(1) - lx.frac);
              plane[ly.hi * W + lx.hi] += g * ly.frac * lx.frac;
            }
          }
        }
        xn->accumulate(gx);
      });
}

/// Per-channel running statistics owned by the layer, not the graph.
template <class S>
struct BatchNormStats {
  std::vector<S> running_mean;
  std::vector<S> running_var;

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(channels, S(0)), running_var(channels, S(1)) {}
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel standardization of NCHW input. Training mode normalizes by
/// batch statistics and folds them into the running estimates; eval mode
/// normalizes by the running estimates.
template <class S>
TensorT<S> batchnorm2d(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                       BatchNormStats<S>& stats, bool training) {
  if (x.rank() != 4) throw ShapeError("batchnorm2d needs NCHW input, got " + shape_str(x.shape()));
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (gamma.size() != C || beta.size() != C || stats.running_mean.size() != C)
    throw ShapeError("batchnorm2d: per-channel parameters do not match C=" + std::to_string(C));
  const std::size_t m = N * H * W;
  const S eps = static_cast<S>(kBatchNormEps);

  std::vector<S> mean(C, S(0)), invstd(C, S(0));
  const S* xv = x.values().data();
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      S acc = S(0);
      for (std::size_t n = 0; n < N; ++n) {
        const S* plane = xv + (n * C + c) * H * W;
        for (std::size_t i = 0; i < H * W; ++i) acc += plane[i];
      }
      const S mu = acc / static_cast<S>(m);
      S var = S(0);
      for (std::size_t n = 0; n < N; ++n) {
        const S* plane = xv + (n * C + c) * H * W;
        for (std::size_t i = 0; i < H * W; ++i) {
          const S d = plane[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<S>(m);
      mean[c] = mu;
      invstd[c] = S(1) / std::sqrt(var + eps);
      const S mom = static_cast<S>(kBatchNormMomentum);
      const S unbiased = m > 1 ? var * static_cast<S>(m) / static_cast<S>(m - 1) : var;
      stats.running_mean[c] = (S(1) - mom) * stats.running_mean[c] + mom * mu;
      stats.running_var[c] = (S(1) - mom) * stats.running_var[c] + mom * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = stats.running_mean[c];
      invstd[c] = S(1) / std::sqrt(stats.running_var[c] + eps);
    }
  }

  std::vector<S> out(x.size());
  const S* gv = gamma.values().data();
  const S* bv = beta.values().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const S* plane = xv + (n * C + c) * H * W;
      S* oplane = out.data() + (n * C + c) * H * W;
      const S mu = mean[c], is = invstd[c], ga = gv[c], be = bv[c];
      for (std::size_t i = 0; i < H * W; ++i) oplane[i] = (plane[i] - mu) * is * ga + be;
    }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return TensorT<S>::make_op(
      "batchnorm2d", x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, mean = std::move(mean), invstd = std::move(invstd), N, C, H, W, m,
       training](detail::Node<S>& o) {
        const S* g = o.grad.data();
        // Per-channel reductions shared by all three gradients.
        std::vector<S> sum_g(C, S(0)), sum_gxhat(C, S(0));
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const S* gplane = g + (n * C + c) * H * W;
            const S* xplane = xn->values.data() + (n * C + c) * H * W;
            const S mu = mean[c], is = invstd[c];
            S sg = S(0), sgx = S(0);
            for (std::size_t i = 0; i < H * W; ++i) {
              sg += gplane[i];
              sgx += gplane[i] * (xplane[i] - mu) * is;
            }
            sum_g[c] += sg;
            sum_gxhat[c] += sgx;
          }
        if (gn->requires_grad) gn->accumulate(sum_gxhat);
        if (bn->requires_grad) bn->accumulate(sum_g);
        if (xn->requires_grad) {
          std::vector<S> gx(xn->values.size());
          const S invm = S(1) / static_cast<S>(m);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
              const S* gplane = g + (n * C + c) * H * W;
              const S* xplane = xn->values.data() + (n * C + c) * H * W;
              S* gxplane = gx.data() + (n * C + c) * H * W;
              const S mu = mean[c], is = invstd[c], ga = gn->values[c];
              if (training) {
                // dL/dx via the batch-statistics Jacobian.
                for (std::size_t i = 0; i < H * W; ++i) {
                  const S xhat = (xplane[i] - mu) * is;
                  gxplane[i] = ga * is * (gplane[i] - sum_g[c] * invm - xhat * sum_gxhat[c] * invm);
                }
              } else {
                for (std::size_t i = 0; i < H * W; ++i) gxplane[i] = gplane[i] * ga * is;
              }
            }
          xn->accumulate(gx);
        }
      });
}

}  // namespace boneage
