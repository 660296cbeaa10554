#pragma once

#include <utility>

#include "boneage/image.hpp"
#include "boneage/rng.hpp"

namespace boneage {

/// Classic CDF equalization. Constant images come back unchanged; the
/// intensity mapping is monotone non-decreasing for every input.
GrayImage histogram_equalize(const GrayImage& img);

/// Canny edge detection: Gaussian blur (radius ceil(3*sigma)), Sobel
/// gradients, 4-direction non-maximum suppression, double threshold and
/// 8-connected hysteresis. low/high are fractions of the maximum post-blur
/// gradient magnitude, 0 < low <= high.
BinaryMask canny(const GrayImage& img, double sigma, double low, double high);

/// One 3x3 dilation to bridge single-pixel gaps, then the largest
/// 8-connected foreground component with its interior holes filled.
/// Throws EmptyForegroundError when the edge set is empty.
BinaryMask largest_component_mask(const BinaryMask& edges);

/// Zeroes every pixel outside the mask.
GrayImage apply_mask(const GrayImage& img, const BinaryMask& mask);

/// Corner-aligned bilinear resize, rounded to 8 bits.
GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h);

struct AugmentParams {
  double crop_min = 0.85;      // crop side as a fraction of the source side
  double crop_max = 1.0;
  double rotation_deg = 20.0;  // angle drawn uniformly in +-rotation_deg
  double mirror_prob = 0.5;
  int out_width = 64;
  int out_height = 64;
};

/// One sampled geometric transform, shared by image and mask so the pair
/// stays aligned.
struct AugmentDraw {
  bool mirror = false;
  double angle_rad = 0.0;
  double crop_x = 0.0, crop_y = 0.0;  // top-left of the crop window
  double crop_w = 0.0, crop_h = 0.0;
  int out_width = 0, out_height = 0;
};

AugmentDraw sample_augment(const AugmentParams& p, int img_w, int img_h, Rng& rng);

/// Bilinear resampling for the image, nearest-neighbor for the mask.
GrayImage warp_gray(const GrayImage& img, const AugmentDraw& d);
BinaryMask warp_mask(const BinaryMask& mask, const AugmentDraw& d);

/// Draws crop/rotation/mirror from rng and applies them to both rasters.
std::pair<GrayImage, BinaryMask> augment(const GrayImage& img, const BinaryMask& mask,
                                         const AugmentParams& p, Rng& rng);

/// Same draws as augment(), image only (mask not needed once applied).
GrayImage augment_image(const GrayImage& img, const AugmentParams& p, Rng& rng);

}  // namespace boneage
