#pragma once

#include <cstdint>
#include <vector>

#include "cmcrl/rng.hpp"

namespace cmcrl {

// CHW float image in [0,1]. Square after the resize stage of augmentation.
struct Image {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<float> data;  // 3 * height * width
  int label = -1;

  float& at(int64_t c, int64_t y, int64_t x) {
    return data[static_cast<size_t>((c * height + y) * width + x)];
  }
  float at(int64_t c, int64_t y, int64_t x) const {
    return data[static_cast<size_t>((c * height + y) * width + x)];
  }
};

Image make_image(int64_t height, int64_t width, float fill = 0.0f);

// Multiplies the first L1 samples by a 0→1 ramp and the last L2 by a 1→0
// ramp, with L1 then L2 drawn uniformly from [0, max_fade_frac·len]. The
// endpoint samples hit exactly 0 whenever the corresponding length is > 0.
void fade_in_out(std::vector<float>& samples, Rng& rng, double max_fade_frac = 0.5);

// Zeroes one contiguous segment [s, s+m): m drawn uniformly from
// [0, max_mask_frac·len], then s uniformly from [0, len−m].
void time_mask(std::vector<float>& samples, Rng& rng, double max_mask_frac = 0.125);

// Bilinear resize with corners aligned to pixel centers (the output corner
// pixels reproduce the input corner pixels exactly).
Image resize(const Image& img, int64_t out_h, int64_t out_w);

// One draw of the image pipeline's random decisions. Draw order is fixed:
// crop_y, crop_x, flip, brightness, contrast, saturation, grayscale.
struct ImageAugmentParams {
  int64_t crop_y = 0;
  int64_t crop_x = 0;
  bool flip = false;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  bool grayscale = false;
};

ImageAugmentParams draw_image_augment(Rng& rng, int64_t base_size, int64_t out_size,
                                      double jitter_lo = 0.6, double jitter_hi = 1.4,
                                      double grayscale_prob = 0.2);

// Deterministic core: crop → flip → brightness → contrast → saturation →
// grayscale → clamp. Expects an image already resized to base_size.
Image apply_image_augment(const Image& base_sized, const ImageAugmentParams& p, int64_t out_size);

// Full pipeline: resize to base_size, then the randomized stages above.
Image image_augment(const Image& img, Rng& rng, int64_t out_size, int64_t base_size);

}  // namespace cmcrl
