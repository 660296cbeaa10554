#pragma once

#include <array>
#include <cmath>

#include "boneage/image.hpp"
#include "boneage/tensor.hpp"

namespace boneage {

/// Continuous box in feature-map coordinates (pixel centers at integers).
struct RoiBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  bool valid() const { return x2 >= x1 && y2 >= y1; }
};

/// Ground truth for one detection: class, box deltas and a mask crop.
struct DetectionTarget {
  int class_label = 0;
  RoiBox box;
  BinaryMask mask;
};

namespace detail {

// Bilinear weights at a continuous point, coordinates clamped to the map
// border so samples outside stay defined.
template <class S>
struct BilinearTap {
  std::size_t idx[4];
  S w[4];
};

template <class S>
BilinearTap<S> bilinear_tap(double x, double y, std::size_t W, std::size_t H) {
  x = std::clamp(x, 0.0, static_cast<double>(W - 1));
  y = std::clamp(y, 0.0, static_cast<double>(H - 1));
  const std::size_t x0 = static_cast<std::size_t>(x);
  const std::size_t y0 = static_cast<std::size_t>(y);
  const std::size_t x1 = std::min(x0 + 1, W - 1);
  const std::size_t y1 = std::min(y0 + 1, H - 1);
  const S fx = static_cast<S>(x - static_cast<double>(x0));
  const S fy = static_cast<S>(y - static_cast<double>(y0));
  BilinearTap<S> t;
  t.idx[0] = y0 * W + x0;
  t.idx[1] = y0 * W + x1;
  t.idx[2] = y1 * W + x0;
  t.idx[3] = y1 * W + x1;
  t.w[0] = (S(1) - fy) * (S(1) - fx);
  t.w[1] = (S(1) - fy) * fx;
  t.w[2] = fy * (S(1) - fx);
  t.w[3] = fy * fx;
  return t;
}

}  // namespace detail

/// Quantization-free RoI pooling: each output bin averages samples_per_bin^2
/// bilinearly interpolated points on a regular grid inside the bin. A
/// degenerate (zero-area) box collapses every sample onto one point.
template <class S>
TensorT<S> roi_align(const TensorT<S>& feat, const RoiBox& roi, std::size_t out_h,
                     std::size_t out_w, std::size_t samples_per_bin = 2) {
  if (feat.rank() != 3)
    throw ShapeError("roi_align needs a [C,H,W] feature map, got " + shape_str(feat.shape()));
  if (!roi.valid()) throw ValueError("roi_align: box must satisfy x2 >= x1, y2 >= y1");
  if (out_h == 0 || out_w == 0 || samples_per_bin == 0)
    throw ValueError("roi_align: output extents and samples_per_bin must be >= 1");
  const std::size_t C = feat.shape()[0], H = feat.shape()[1], W = feat.shape()[2];

  const double bin_h = (roi.y2 - roi.y1) / static_cast<double>(out_h);
  const double bin_w = (roi.x2 - roi.x1) / static_cast<double>(out_w);
  const std::size_t s = samples_per_bin;

  // The sample grid only depends on the box, not the channel: build taps once.
  std::vector<detail::BilinearTap<S>> taps(out_h * out_w * s * s);
  {
    std::size_t t = 0;
    for (std::size_t by = 0; by < out_h; ++by)
      for (std::size_t bx = 0; bx < out_w; ++bx)
        for (std::size_t iy = 0; iy < s; ++iy)
          for (std::size_t ix = 0; ix < s; ++ix, ++t) {
            const double y = roi.y1 + (static_cast<double>(by) + (iy + 0.5) / s) * bin_h;
            const double x = roi.x1 + (static_cast<double>(bx) + (ix + 0.5) / s) * bin_w;
            taps[t] = detail::bilinear_tap<S>(x, y, W, H);
          }
  }
  const S inv_samples = S(1) / static_cast<S>(s * s);

  std::vector<S> out(C * out_h * out_w, S(0));
  const S* fv = feat.values().data();
  for (std::size_t c = 0; c < C; ++c) {
    const S* plane = fv + c * H * W;
    S* oplane = out.data() + c * out_h * out_w;
    std::size_t t = 0;
    for (std::size_t b = 0; b < out_h * out_w; ++b) {
      S acc = S(0);
      for (std::size_t k = 0; k < s * s; ++k, ++t) {
        const auto& tap = taps[t];
        acc += tap.w[0] * plane[tap.idx[0]] + tap.w[1] * plane[tap.idx[1]] +
               tap.w[2] * plane[tap.idx[2]] + tap.w[3] * plane[tap.idx[3]];
      }
      oplane[b] = acc * inv_samples;
    }
  }

  auto fn = feat.node();
  return TensorT<S>::make_op(
      "roi_align", {C, out_h, out_w}, std::move(out), {feat},
      [fn, taps = std::move(taps), C, H, W, out_h, out_w, s, inv_samples](detail::Node<S>& o) {
        std::vector<S> gf(fn->values.size(), S(0));
        for (std::size_t c = 0; c < C; ++c) {
          S* gplane = gf.data() + c * H * W;
          const S* gout = o.grad.data() + c * out_h * out_w;
          std::size_t t = 0;
          for (std::size_t b = 0; b < out_h * out_w; ++b) {
            const S g = gout[b] * inv_samples;
            for (std::size_t k = 0; k < s * s; ++k, ++t) {
              const auto& tap = taps[t];
              gplane[tap.idx[0]] += g * tap.w[0];
              gplane[tap.idx[1]] += g * tap.w[1];
              gplane[tap.idx[2]] += g * tap.w[2];
              gplane[tap.idx[3]] += g * tap.w[3];
            }
          }
        }
        fn->accumulate(gf);
      });
}

/// Softmax cross-entropy of a logit vector against one class index,
/// stabilized by max subtraction.
template <class S>
TensorT<S> cls_loss(const TensorT<S>& logits, int true_class) {
  if (logits.rank() != 1)
    throw ShapeError("cls_loss needs a [K] logit vector, got " + shape_str(logits.shape()));
  const std::size_t K = logits.shape()[0];
  if (true_class < 0 || static_cast<std::size_t>(true_class) >= K)
    throw ValueError("cls_loss: class " + std::to_string(true_class) + " out of range for K=" +
                     std::to_string(K));

  const auto lv = logits.values();
  S mx = lv[0];
  for (S v : lv) mx = std::max(mx, v);
  S sum = S(0);
  std::vector<S> softmax(K);
  for (std::size_t k = 0; k < K; ++k) {
    softmax[k] = std::exp(lv[k] - mx);
    sum += softmax[k];
  }
  for (S& v : softmax) v /= sum;
  const S loss = std::log(sum) + mx - lv[static_cast<std::size_t>(true_class)];

  auto ln = logits.node();
  return TensorT<S>::make_op(
      "cls_loss", {}, {loss}, {logits},
      [ln, softmax = std::move(softmax), true_class](detail::Node<S>& o) {
        const S g = o.grad[0];
        std::vector<S> gl(softmax.size());
        for (std::size_t k = 0; k < softmax.size(); ++k)
          gl[k] = g * (softmax[k] - (k == static_cast<std::size_t>(true_class) ? S(1) : S(0)));
        ln->accumulate(gl);
      });
}

/// Smooth-L1 box regression loss, averaged over the 4 coordinates.
template <class S>
TensorT<S> box_loss(const TensorT<S>& pred, const std::array<S, 4>& target) {
  if (pred.rank() != 1 || pred.shape()[0] != 4)
    throw ShapeError("box_loss needs 4 predicted deltas, got " + shape_str(pred.shape()));
  const auto pv = pred.values();
  S loss = S(0);
  for (std::size_t i = 0; i < 4; ++i) {
    const S d = pv[i] - target[i];
    const S a = std::fabs(d);
    loss += a < S(1) ? S(0.5) * d * d : a - S(0.5);
  }
  loss /= S(4);

  auto pn = pred.node();
  return TensorT<S>::make_op("box_loss", {}, {loss}, {pred},
                             [pn, target](detail::Node<S>& o) {
                               const S g = o.grad[0] / S(4);
                               std::vector<S> gp(4);
                               for (std::size_t i = 0; i < 4; ++i) {
                                 const S d = pn->values[i] - target[i];
                                 gp[i] = g * std::clamp(d, S(-1), S(1));
                               }
                               pn->accumulate(gp);
                             });
}

/// Mean per-pixel binary cross-entropy of mask logits against a binary
/// target, computed in the numerically safe log1p(exp(-|x|)) form.
template <class S>
TensorT<S> mask_loss(const TensorT<S>& pred_logits, const BinaryMask& target) {
  if (pred_logits.rank() != 2 ||
      pred_logits.shape()[0] != static_cast<std::size_t>(target.height) ||
      pred_logits.shape()[1] != static_cast<std::size_t>(target.width))
    throw ShapeError("mask_loss: logits " + shape_str(pred_logits.shape()) + " vs mask " +
                     std::to_string(target.width) + "x" + std::to_string(target.height));
  const std::size_t n = pred_logits.size();
  if (n == 0) throw ValueError("mask_loss: empty mask");

  const auto lv = pred_logits.values();
  S loss = S(0);
  for (std::size_t i = 0; i < n; ++i) {
    const S x = lv[i];
    const S t = target.bits[i] ? S(1) : S(0);
    loss += std::max(x, S(0)) - x * t + std::log1p(std::exp(-std::fabs(x)));
  }
  loss /= static_cast<S>(n);

  auto ln = pred_logits.node();
  std::vector<std::uint8_t> tbits(target.bits);
  return TensorT<S>::make_op(
      "mask_loss", {}, {loss}, {pred_logits},
      [ln, tbits = std::move(tbits), n](detail::Node<S>& o) {
        const S g = o.grad[0] / static_cast<S>(n);
        std::vector<S> gl(n);
        for (std::size_t i = 0; i < n; ++i) {
          const S p = S(1) / (S(1) + std::exp(-ln->values[i]));
          gl[i] = g * (p - (tbits[i] ? S(1) : S(0)));
        }
        ln->accumulate(gl);
      });
}

/// Unweighted sum of the four task losses.
template <class S>
TensorT<S> composite_loss(const TensorT<S>& cls, const TensorT<S>& box, const TensorT<S>& mask,
                          const TensorT<S>& reg) {
  for (const TensorT<S>* t : {&cls, &box, &mask, &reg})
    if (t->size() != 1)
      throw ShapeError("composite_loss terms must be scalars, got " + shape_str(t->shape()));
  const S total = cls.value() + box.value() + mask.value() + reg.value();
  auto cn = cls.node(), bn = box.node(), mn = mask.node(), rn = reg.node();
  return TensorT<S>::make_op("composite_loss", {}, {total}, {cls, box, mask, reg},
                             [cn, bn, mn, rn](detail::Node<S>& o) {
                               for (auto& n : {cn, bn, mn, rn})
                                 if (n->requires_grad) n->accumulate(o.grad);
                             });
}

}  // namespace boneage
