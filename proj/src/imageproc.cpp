#include "boneage/imageproc.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

namespace boneage {

namespace {

inline std::uint8_t clamp_u8(long v) {
  return static_cast<std::uint8_t>(std::clamp(v, 0L, 255L));
}

// Replicate-border pixel fetch.
inline double px(const std::vector<double>& buf, int w, int h, int x, int y) {
  x = std::clamp(x, 0, w - 1);
  y = std::clamp(y, 0, h - 1);
  return buf[static_cast<std::size_t>(y) * w + x];
}

std::vector<double> gaussian_blur(const std::vector<double>& src, int w, int h, double sigma) {
  if (sigma <= 0.0) return src;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;

  std::vector<double> tmp(src.size()), out(src.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * px(src, w, h, x + i, y);
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * px(tmp, w, h, x, y + i);
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  return out;
}

}  // namespace

GrayImage histogram_equalize(const GrayImage& img) {
  const std::size_t n = img.size();
  if (n == 0) return img;

  std::size_t hist[256] = {0};
  for (std::uint8_t p : img.pixels) ++hist[p];

  std::size_t cdf[256];
  std::size_t acc = 0;
  for (int v = 0; v < 256; ++v) {
    acc += hist[v];
    cdf[v] = acc;
  }
  std::size_t cdf_min = 0;
  for (int v = 0; v < 256; ++v)
    if (hist[v]) {
      cdf_min = cdf[v];
      break;
    }
  if (cdf_min == n) return img;  // constant image: mapping is degenerate

  std::uint8_t lut[256];
  const double denom = static_cast<double>(n - cdf_min);
  for (int v = 0; v < 256; ++v) {
    const double h = (static_cast<double>(cdf[v]) - static_cast<double>(cdf_min)) / denom * 255.0;
    lut[v] = clamp_u8(std::lround(h));
  }

  GrayImage out(img.width, img.height);
  for (std::size_t i = 0; i < n; ++i) out.pixels[i] = lut[img.pixels[i]];
  return out;
}

BinaryMask canny(const GrayImage& img, double sigma, double low, double high) {
  if (low <= 0.0 || high <= 0.0 || low > high)
    throw ValueError("canny thresholds must satisfy 0 < low <= high");
  const int w = img.width, h = img.height;
  BinaryMask edges(w, h);
  if (w == 0 || h == 0) return edges;

  std::vector<double> gray(img.size());
  for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = img.pixels[i];
  const std::vector<double> blurred = gaussian_blur(gray, w, h, sigma);

  // Sobel gradients with replicate borders.
  std::vector<double> gx(gray.size()), gy(gray.size()), mag(gray.size());
  double max_mag = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double tl = px(blurred, w, h, x - 1, y - 1), tc = px(blurred, w, h, x, y - 1),
                   tr = px(blurred, w, h, x + 1, y - 1), ml = px(blurred, w, h, x - 1, y),
                   mr = px(blurred, w, h, x + 1, y), bl = px(blurred, w, h, x - 1, y + 1),
                   bc = px(blurred, w, h, x, y + 1), br = px(blurred, w, h, x + 1, y + 1);
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      gx[i] = (tr + 2 * mr + br) - (tl + 2 * ml + bl);
      gy[i] = (bl + 2 * bc + br) - (tl + 2 * tc + tr);
      mag[i] = std::hypot(gx[i], gy[i]);
      max_mag = std::max(max_mag, mag[i]);
    }
  if (max_mag == 0.0) return edges;  // flat image, no gradient anywhere

  const double t_low = low * max_mag;
  const double t_high = high * max_mag;

  // Non-maximum suppression quantized to 4 directions. On exact ties the
  // pixel whose "previous" neighbor equals it is suppressed, so a plateau
  // thins to a single line.
  auto mag_at = [&](int x, int y) -> double {
    if (x < 0 || x >= w || y < 0 || y >= h) return 0.0;
    return mag[static_cast<std::size_t>(y) * w + x];
  };
  std::vector<std::uint8_t> keep(gray.size(), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double m = mag[i];
      if (m < t_low) continue;
      int dx = 1, dy = 0;
      const double ax = std::fabs(gx[i]), ay = std::fabs(gy[i]);
      // tan(22.5 deg) and tan(67.5 deg) split the quadrant into the 4 bins
      constexpr double tan225 = 0.41421356237309503;
      constexpr double tan675 = 2.41421356237309503;
      if (ay <= ax * tan225) {
        dx = 1, dy = 0;
      } else if (ay >= ax * tan675) {
        dx = 0, dy = 1;
      } else if ((gx[i] > 0) == (gy[i] > 0)) {
        dx = 1, dy = 1;
      } else {
        dx = 1, dy = -1;
      }
      const double before = mag_at(x - dx, y - dy);
      const double after = mag_at(x + dx, y + dy);
      if (m > before && m >= after) keep[i] = 1;
    }

  // Double threshold + hysteresis via 8-connected BFS from strong pixels.
  std::deque<std::pair<int, int>> frontier;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (keep[i] && mag[i] >= t_high) {
        edges.bits[i] = 1;
        frontier.emplace_back(x, y);
      }
    }
  while (!frontier.empty()) {
    const auto [cx, cy] = frontier.front();
    frontier.pop_front();
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int nx = cx + dx, ny = cy + dy;
        if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
        const std::size_t ni = static_cast<std::size_t>(ny) * w + nx;
        if (edges.bits[ni] || !keep[ni]) continue;
        if (mag[ni] >= t_low) {
          edges.bits[ni] = 1;
          frontier.emplace_back(nx, ny);
        }
      }
  }
  return edges;
}

BinaryMask largest_component_mask(const BinaryMask& edges) {
  const int w = edges.width, h = edges.height;
  if (edges.count() == 0) throw EmptyForegroundError("no edges: cannot extract a foreground mask");

  // 3x3 dilation bridges 1-px gaps left by non-maximum suppression.
  BinaryMask dilated(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool on = false;
      for (int dy = -1; dy <= 1 && !on; ++dy)
        for (int dx = -1; dx <= 1 && !on; ++dx) {
          const int nx = x + dx, ny = y + dy;
          if (nx >= 0 && nx < w && ny >= 0 && ny < h && edges.at(nx, ny)) on = true;
        }
      if (on) dilated.at(x, y) = 1;
    }

  // 8-connected labeling; keep the biggest component (first wins ties).
  std::vector<int> label(dilated.bits.size(), 0);
  int next_label = 0;
  int best_label = 0;
  std::size_t best_size = 0;
  std::deque<std::pair<int, int>> queue;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (!dilated.bits[i] || label[i]) continue;
      const int cur = ++next_label;
      std::size_t size = 0;
      label[i] = cur;
      queue.emplace_back(x, y);
      while (!queue.empty()) {
        const auto [cx, cy] = queue.front();
        queue.pop_front();
        ++size;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = cx + dx, ny = cy + dy;
            if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
            const std::size_t ni = static_cast<std::size_t>(ny) * w + nx;
            if (dilated.bits[ni] && !label[ni]) {
              label[ni] = cur;
              queue.emplace_back(nx, ny);
            }
          }
      }
      if (size > best_size) {
        best_size = size;
        best_label = cur;
      }
    }

  // Fill interior holes: 4-connected background flood from the border;
  // anything unreachable that is not the component is enclosed by it.
  std::vector<std::uint8_t> outside(label.size(), 0);
  auto try_seed = [&](int x, int y) {
    const std::size_t i = static_cast<std::size_t>(y) * w + x;
    if (label[i] != best_label && !outside[i]) {
      outside[i] = 1;
      queue.emplace_back(x, y);
    }
  };
  for (int x = 0; x < w; ++x) {
    try_seed(x, 0);
    try_seed(x, h - 1);
  }
  for (int y = 0; y < h; ++y) {
    try_seed(0, y);
    try_seed(w - 1, y);
  }
  while (!queue.empty()) {
    const auto [cx, cy] = queue.front();
    queue.pop_front();
    constexpr int nbr[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    for (const auto& d : nbr) {
      const int nx = cx + d[0], ny = cy + d[1];
      if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
      const std::size_t ni = static_cast<std::size_t>(ny) * w + nx;
      if (label[ni] != best_label && !outside[ni]) {
        outside[ni] = 1;
        queue.emplace_back(nx, ny);
      }
    }
  }

  BinaryMask mask(w, h);
  for (std::size_t i = 0; i < mask.bits.size(); ++i)
    mask.bits[i] = (label[i] == best_label || !outside[i]) ? 1 : 0;
  return mask;
}

GrayImage apply_mask(const GrayImage& img, const BinaryMask& mask) {
  if (img.width != mask.width || img.height != mask.height)
    throw ShapeError("apply_mask: image " + std::to_string(img.width) + "x" +
                     std::to_string(img.height) + " vs mask " + std::to_string(mask.width) + "x" +
                     std::to_string(mask.height));
  GrayImage out(img.width, img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    out.pixels[i] = mask.bits[i] ? img.pixels[i] : 0;
  return out;
}

namespace {

// out index -> source coordinate, corner aligned.
inline double src_coord(int i, double origin, double extent, int out) {
  if (out <= 1) return origin;
  return origin + static_cast<double>(i) * (extent - 1.0) / static_cast<double>(out - 1);
}

inline double bilinear_sample(const GrayImage& img, double x, double y) {
  if (x < -0.5 || y < -0.5 || x > img.width - 0.5 || y > img.height - 0.5) return 0.0;
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  auto at = [&](int xx, int yy) -> double {
    xx = std::clamp(xx, 0, img.width - 1);
    yy = std::clamp(yy, 0, img.height - 1);
    return img.at(xx, yy);
  };
  const double top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
  const double bot = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
  return top * (1.0 - fy) + bot * fy;
}

// Output pixel -> source pixel under the sampled transform.
inline void draw_coords(const AugmentDraw& d, int src_w, int src_h, int ox, int oy, double& sx,
                        double& sy) {
  double u = src_coord(ox, d.crop_x, d.crop_w, d.out_width);
  double v = src_coord(oy, d.crop_y, d.crop_h, d.out_height);
  if (d.angle_rad != 0.0) {
    const double cx = (src_w - 1) * 0.5, cy = (src_h - 1) * 0.5;
    const double ca = std::cos(d.angle_rad), sa = std::sin(d.angle_rad);
    const double du = u - cx, dv = v - cy;
    u = cx + ca * du - sa * dv;
    v = cy + sa * du + ca * dv;
  }
  if (d.mirror) u = (src_w - 1) - u;
  sx = u;
  sy = v;
}

}  // namespace

GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) throw ValueError("resize_bilinear: output extents must be >= 1");
  GrayImage out(out_w, out_h);
  for (int oy = 0; oy < out_h; ++oy)
    for (int ox = 0; ox < out_w; ++ox) {
      const double sx = src_coord(ox, 0.0, img.width, out_w);
      const double sy = src_coord(oy, 0.0, img.height, out_h);
      out.at(ox, oy) = clamp_u8(std::lround(bilinear_sample(img, sx, sy)));
    }
  return out;
}

AugmentDraw sample_augment(const AugmentParams& p, int img_w, int img_h, Rng& rng) {
  if (p.crop_min <= 0.0 || p.crop_max > 1.0 || p.crop_min > p.crop_max)
    throw ValueError("augment: crop fraction range must lie in (0,1]");
  if (p.mirror_prob < 0.0 || p.mirror_prob > 1.0)
    throw ValueError("augment: mirror probability must lie in [0,1]");

  AugmentDraw d;
  d.mirror = rand_bernoulli(rng, p.mirror_prob);
  const double rot = p.rotation_deg * 3.14159265358979323846 / 180.0;
  d.angle_rad = rand_uniform(rng, -rot, rot);
  const double frac = rand_uniform(rng, p.crop_min, p.crop_max);
  d.crop_w = frac * img_w;
  d.crop_h = frac * img_h;
  d.crop_x = rand_uniform(rng, 0.0, img_w - d.crop_w);
  d.crop_y = rand_uniform(rng, 0.0, img_h - d.crop_h);
  d.out_width = p.out_width;
  d.out_height = p.out_height;
  return d;
}

GrayImage warp_gray(const GrayImage& img, const AugmentDraw& d) {
  GrayImage out(d.out_width, d.out_height);
  for (int oy = 0; oy < d.out_height; ++oy)
    for (int ox = 0; ox < d.out_width; ++ox) {
      double sx = 0, sy = 0;
      draw_coords(d, img.width, img.height, ox, oy, sx, sy);
      out.at(ox, oy) = clamp_u8(std::lround(bilinear_sample(img, sx, sy)));
    }
  return out;
}

BinaryMask warp_mask(const BinaryMask& mask, const AugmentDraw& d) {
  BinaryMask out(d.out_width, d.out_height);
  for (int oy = 0; oy < d.out_height; ++oy)
    for (int ox = 0; ox < d.out_width; ++ox) {
      double sx = 0, sy = 0;
      draw_coords(d, mask.width, mask.height, ox, oy, sx, sy);
      const int nx = static_cast<int>(std::lround(sx));
      const int ny = static_cast<int>(std::lround(sy));
      if (nx >= 0 && nx < mask.width && ny >= 0 && ny < mask.height)
        out.at(ox, oy) = mask.at(nx, ny);
    }
  return out;
}

std::pair<GrayImage, BinaryMask> augment(const GrayImage& img, const BinaryMask& mask,
                                         const AugmentParams& p, Rng& rng) {
  if (img.width != mask.width || img.height != mask.height)
    throw ShapeError("augment: image and mask dimensions differ");
  const AugmentDraw d = sample_augment(p, img.width, img.height, rng);
  return {warp_gray(img, d), warp_mask(mask, d)};
}

GrayImage augment_image(const GrayImage& img, const AugmentParams& p, Rng& rng) {
  const AugmentDraw d = sample_augment(p, img.width, img.height, rng);
  return warp_gray(img, d);
}

}  // namespace boneage
