#include "cmcrl/augment.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cmcrl/error.hpp"

namespace cmcrl {

namespace {

constexpr double kLumaR = 0.299, kLumaG = 0.587, kLumaB = 0.114;

void check_image(const Image& img, const char* op) {
  if (img.height <= 0 || img.width <= 0) {
    throw ContractError(std::string(op) + ": image dims must be positive, got " +
                        std::to_string(img.height) + "x" + std::to_string(img.width));
  }
  if (img.data.size() != static_cast<size_t>(3 * img.height * img.width)) {
    throw ContractError(std::string(op) + ": image buffer size does not match 3xHxW");
  }
}

}  // namespace

Image make_image(int64_t height, int64_t width, float fill) {
  Image img;
  img.height = height;
  img.width = width;
  img.data.assign(static_cast<size_t>(3 * height * width), fill);
  return img;
}

void fade_in_out(std::vector<float>& samples, Rng& rng, double max_fade_frac) {
  if (!(max_fade_frac >= 0.0 && max_fade_frac <= 0.5)) {
    throw ContractError("fade_in_out: max_fade_frac must lie in [0, 0.5], got " +
                        std::to_string(max_fade_frac));
  }
  const int64_t len = static_cast<int64_t>(samples.size());
  if (len == 0) return;
  const int64_t max_fade = static_cast<int64_t>(max_fade_frac * static_cast<double>(len));
  const int64_t l1 = rng.uniform_int(0, max_fade);
  const int64_t l2 = rng.uniform_int(0, max_fade);
  for (int64_t i = 0; i < l1; ++i) {
    samples[static_cast<size_t>(i)] *=
        static_cast<float>(static_cast<double>(i) / static_cast<double>(l1));
  }
  for (int64_t j = 0; j < l2; ++j) {
    samples[static_cast<size_t>(len - 1 - j)] *=
        static_cast<float>(static_cast<double>(j) / static_cast<double>(l2));
  }
}

void time_mask(std::vector<float>& samples, Rng& rng, double max_mask_frac) {
  if (!(max_mask_frac >= 0.0 && max_mask_frac <= 1.0)) {
    throw ContractError("time_mask: max_mask_frac must lie in [0, 1], got " +
                        std::to_string(max_mask_frac));
  }
  const int64_t len = static_cast<int64_t>(samples.size());
  if (len == 0) return;
  const int64_t m = rng.uniform_int(0, static_cast<int64_t>(max_mask_frac * static_cast<double>(len)));
  const int64_t s = rng.uniform_int(0, len - m);
  std::fill(samples.begin() + s, samples.begin() + s + m, 0.0f);
}

Image resize(const Image& img, int64_t out_h, int64_t out_w) {
  check_image(img, "resize");
  if (out_h <= 0 || out_w <= 0) {
    throw ContractError("resize: output dims must be positive, got " + std::to_string(out_h) +
                        "x" + std::to_string(out_w));
  }
  Image out = make_image(out_h, out_w);
  out.label = img.label;
  const double sy = out_h > 1 ? static_cast<double>(img.height - 1) / static_cast<double>(out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(img.width - 1) / static_cast<double>(out_w - 1) : 0.0;
  for (int64_t y = 0; y < out_h; ++y) {
    const double fy = static_cast<double>(y) * sy;
    const int64_t y0 = std::min(static_cast<int64_t>(fy), img.height - 1);
    const int64_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (int64_t x = 0; x < out_w; ++x) {
      const double fx = static_cast<double>(x) * sx;
      const int64_t x0 = std::min(static_cast<int64_t>(fx), img.width - 1);
      const int64_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (int64_t c = 0; c < 3; ++c) {
        const double top = (1.0 - wx) * img.at(c, y0, x0) + wx * img.at(c, y0, x1);
        const double bot = (1.0 - wx) * img.at(c, y1, x0) + wx * img.at(c, y1, x1);
        out.at(c, y, x) = static_cast<float>((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

ImageAugmentParams draw_image_augment(Rng& rng, int64_t base_size, int64_t out_size,
                                      double jitter_lo, double jitter_hi,
                                      double grayscale_prob) {
  if (out_size > base_size) {
    throw ContractError("image_augment: crop size " + std::to_string(out_size) +
                        " exceeds resized base " + std::to_string(base_size));
  }
  ImageAugmentParams p;
  p.crop_y = rng.uniform_int(0, base_size - out_size);
  p.crop_x = rng.uniform_int(0, base_size - out_size);
  p.flip = rng.uniform() < 0.5;
  p.brightness = rng.uniform(jitter_lo, jitter_hi);
  p.contrast = rng.uniform(jitter_lo, jitter_hi);
  p.saturation = rng.uniform(jitter_lo, jitter_hi);
  p.grayscale = rng.uniform() < grayscale_prob;
  return p;
}

Image apply_image_augment(const Image& base_sized, const ImageAugmentParams& p, int64_t out_size) {
  check_image(base_sized, "image_augment");
  if (base_sized.height != base_sized.width) {
    throw ContractError("image_augment: expected a square base image, got " +
                        std::to_string(base_sized.height) + "x" + std::to_string(base_sized.width));
  }
  const int64_t base = base_sized.height;
  if (out_size > base) {
    throw ContractError("image_augment: crop size " + std::to_string(out_size) +
                        " exceeds resized base " + std::to_string(base));
  }
  if (p.crop_y < 0 || p.crop_x < 0 || p.crop_y + out_size > base || p.crop_x + out_size > base) {
    throw ContractError("image_augment: crop offset out of range");
  }

  Image out = make_image(out_size, out_size);
  out.label = base_sized.label;
  for (int64_t c = 0; c < 3; ++c) {
    for (int64_t y = 0; y < out_size; ++y) {
      for (int64_t x = 0; x < out_size; ++x) {
        const int64_t sx = p.flip ? out_size - 1 - x : x;
        out.at(c, y, x) = base_sized.at(c, p.crop_y + y, p.crop_x + sx);
      }
    }
  }

  const int64_t plane = out_size * out_size;
  // Contrast is anchored at the mean luma of the (brightness-adjusted) crop,
  // saturation blends each pixel with its own luma.
  std::vector<double> luma(static_cast<size_t>(plane));
  double mean_luma = 0.0;
  for (int64_t i = 0; i < plane; ++i) {
    const double r = out.data[static_cast<size_t>(i)] * p.brightness;
    const double g = out.data[static_cast<size_t>(plane + i)] * p.brightness;
    const double b = out.data[static_cast<size_t>(2 * plane + i)] * p.brightness;
    out.data[static_cast<size_t>(i)] = static_cast<float>(r);
    out.data[static_cast<size_t>(plane + i)] = static_cast<float>(g);
    out.data[static_cast<size_t>(2 * plane + i)] = static_cast<float>(b);
    luma[static_cast<size_t>(i)] = kLumaR * r + kLumaG * g + kLumaB * b;
    mean_luma += luma[static_cast<size_t>(i)];
  }
  mean_luma /= static_cast<double>(plane);

  for (int64_t i = 0; i < plane; ++i) {
    double rgb[3];
    for (int64_t c = 0; c < 3; ++c) {
      rgb[c] = (out.data[static_cast<size_t>(c * plane + i)] - mean_luma) * p.contrast + mean_luma;
    }
    const double l = kLumaR * rgb[0] + kLumaG * rgb[1] + kLumaB * rgb[2];
    for (int64_t c = 0; c < 3; ++c) rgb[c] = l + (rgb[c] - l) * p.saturation;
    if (p.grayscale) {
      const double gray = kLumaR * rgb[0] + kLumaG * rgb[1] + kLumaB * rgb[2];
      rgb[0] = rgb[1] = rgb[2] = gray;
    }
    for (int64_t c = 0; c < 3; ++c) {
      out.data[static_cast<size_t>(c * plane + i)] = static_cast<float>(std::clamp(rgb[c], 0.0, 1.0));
    }
  }
  return out;
}

Image image_augment(const Image& img, Rng& rng, int64_t out_size, int64_t base_size) {
  check_image(img, "image_augment");
  const Image base = resize(img, base_size, base_size);
  const ImageAugmentParams p = draw_image_augment(rng, base_size, out_size);
  return apply_image_augment(base, p, out_size);
}

}  // namespace cmcrl
