#include <cmath>
#include <cstring>
#include <vector>

#include "cmcrl/audio.hpp"
#include "cmcrl/error.hpp"
#include "cmcrl/rng.hpp"
#include "cmcrl/tensor.hpp"
#include "doctest.h"

using namespace cmcrl;
using namespace cmcrl::audio;

namespace {

constexpr double kPi = 3.14159265358979323846;

int64_t reflect_oracle(int64_t i, int64_t len) {
  while (i < 0 || i >= len) {
    if (i < 0) i = -i;
    if (i >= len) i = 2 * (len - 1) - i;
  }
  return i;
}

// Direct per-definition evaluation of one STFT cell:
//   X[b][t] = sum_n w[n] * x[t*hop + n - n_fft/2] * e^{-i 2 pi b n / n_fft}
// with reflect indexing. O(n_fft) per cell, no precomputed matrices.
void naive_dft_cell(const std::vector<float>& x, int64_t b, int64_t t, double& re, double& im) {
  re = 0.0;
  im = 0.0;
  const int64_t len = static_cast<int64_t>(x.size());
  for (int64_t n = 0; n < kNfft; ++n) {
    const double w = 0.5 * (1.0 - std::cos(2.0 * kPi * static_cast<double>(n) / static_cast<double>(kNfft)));
    const double v = w * static_cast<double>(x[static_cast<size_t>(reflect_oracle(t * kHop + n - kNfft / 2, len))]);
    const double angle = 2.0 * kPi * static_cast<double>(b) * static_cast<double>(n) / static_cast<double>(kNfft);
    re += v * std::cos(angle);
    im -= v * std::sin(angle);
  }
}

AudioClip noise_clip(uint64_t seed) {
  Rng rng(seed);
  AudioClip clip;
  clip.samples.resize(static_cast<size_t>(kClipLen));
  for (auto& s : clip.samples) s = static_cast<float>(rng.uniform(-1.0, 1.0));
  return clip;
}

AudioClip tone_clip(int64_t bin) {
  // Frequency placed exactly on the requested analysis bin.
  AudioClip clip;
  clip.samples.resize(static_cast<size_t>(kClipLen));
  for (int64_t j = 0; j < kClipLen; ++j) {
    clip.samples[static_cast<size_t>(j)] = static_cast<float>(
        0.8 * std::sin(2.0 * kPi * static_cast<double>(bin) * static_cast<double>(j) / static_cast<double>(kNfft)));
  }
  return clip;
}

}  // namespace

TEST_CASE("pad_or_trim follows the center rule") {
  std::vector<float> exact(static_cast<size_t>(kClipLen), 0.5f);
  CHECK(pad_or_trim(exact) == exact);

  std::vector<float> longer(22052);
  for (size_t i = 0; i < longer.size(); ++i) longer[i] = static_cast<float>(i);
  auto trimmed = pad_or_trim(longer);
  REQUIRE(trimmed.size() == 22050);
  CHECK(trimmed.front() == 1.0f);   // one dropped in front
  CHECK(trimmed.back() == 22050.0f);  // one dropped in back

  std::vector<float> shorter(22000, 1.0f);
  auto padded = pad_or_trim(shorter);
  REQUIRE(padded.size() == 22050);
  for (int i = 0; i < 25; ++i) {
    CHECK(padded[static_cast<size_t>(i)] == 0.0f);
    CHECK(padded[static_cast<size_t>(22049 - i)] == 0.0f);
  }
  CHECK(padded[25] == 1.0f);
  CHECK(padded[22024] == 1.0f);

  // Odd differences put the extra sample/zero at the back.
  std::vector<float> odd_long(22053);
  for (size_t i = 0; i < odd_long.size(); ++i) odd_long[i] = static_cast<float>(i);
  auto odd_trim = pad_or_trim(odd_long);
  CHECK(odd_trim.front() == 1.0f);
  CHECK(odd_trim.back() == 22050.0f);
  std::vector<float> odd_short(22049, 1.0f);
  auto odd_pad = pad_or_trim(odd_short);
  CHECK(odd_pad.front() == 1.0f);
  CHECK(odd_pad.back() == 0.0f);

  CHECK_THROWS_AS(pad_or_trim({}), ContractError);
}

TEST_CASE("stft of the zero clip is exactly zero") {
  AudioClip clip;
  clip.samples.assign(static_cast<size_t>(kClipLen), 0.0f);
  const Spectrum spec = stft(clip);
  REQUIRE(spec.re.size() == static_cast<size_t>(kBins * kFrames));
  for (size_t i = 0; i < spec.re.size(); ++i) {
    CHECK(spec.re[i] == 0.0);
    CHECK(spec.im[i] == 0.0);
  }
}

TEST_CASE("stft rejects wrong clip lengths") {
  AudioClip clip;
  clip.samples.assign(100, 0.0f);
  CHECK_THROWS_AS(stft(clip), ContractError);
}

TEST_CASE("on-bin sinusoid peaks at its bin in every interior frame") {
  const AudioClip clip = tone_clip(10);
  const Spectrum spec = stft(clip);
  std::vector<double> mag, phase;
  mag_phase(spec, mag, phase);
  for (int64_t t = 1; t < kFrames - 1; ++t) {
    int64_t argmax = 0;
    double best = -1.0;
    for (int64_t b = 0; b < kBins; ++b) {
      const double m = mag[static_cast<size_t>(b * kFrames + t)];
      if (m > best) {
        best = m;
        argmax = b;
      }
    }
    CHECK(argmax == 10);
  }
}

TEST_CASE("stft matches the naive per-definition DFT on seeded noise") {
  const AudioClip clip = noise_clip(2024);
  const Spectrum spec = stft(clip);
  double worst = 0.0;
  for (int64_t b = 0; b < kBins; ++b) {
    for (int64_t t = 0; t < kFrames; ++t) {
      double re, im;
      naive_dft_cell(clip.samples, b, t, re, im);
      worst = std::max(worst, std::abs(re - spec.re[static_cast<size_t>(b * kFrames + t)]));
      worst = std::max(worst, std::abs(im - spec.im[static_cast<size_t>(b * kFrames + t)]));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("stft is linear in the input") {
  const AudioClip clip = noise_clip(7);
  AudioClip half = clip;
  for (auto& s : half.samples) s *= 0.5f;  // exact in binary floating point
  const Spectrum a = stft(clip);
  const Spectrum b = stft(half);
  for (size_t i = 0; i < a.re.size(); ++i) {
    CHECK(std::abs(0.5 * a.re[i] - b.re[i]) <= 1e-6 * (std::abs(b.re[i]) + 1e-12));
    CHECK(std::abs(0.5 * a.im[i] - b.im[i]) <= 1e-6 * (std::abs(b.im[i]) + 1e-12));
  }
}

TEST_CASE("per-frame energy obeys Parseval with one-sided doubling") {
  // For the unnormalized DFT, sum_k |X_k|^2 == n_fft * sum_n (w x)_n^2; the
  // one-sided bins cover the full sum once non-DC/non-Nyquist bins are
  // doubled. The 1/n_fft factor below accounts for the unnormalized forward
  // transform this module uses.
  const AudioClip clip = noise_clip(99);
  const Spectrum spec = stft(clip);
  for (int64_t t : {2, 11, 23, 40}) {
    double lhs = 0.0;
    for (int64_t b = 0; b < kBins; ++b) {
      const double re = spec.re[static_cast<size_t>(b * kFrames + t)];
      const double im = spec.im[static_cast<size_t>(b * kFrames + t)];
      const double weight = (b == 0 || b == kBins - 1) ? 1.0 : 2.0;
      lhs += weight * (re * re + im * im);
    }
    lhs /= static_cast<double>(kNfft);
    double rhs = 0.0;
    for (int64_t n = 0; n < kNfft; ++n) {
      const double w = 0.5 * (1.0 - std::cos(2.0 * kPi * static_cast<double>(n) / static_cast<double>(kNfft)));
      const double v = w * static_cast<double>(
                               clip.samples[static_cast<size_t>(reflect_oracle(t * kHop + n - kNfft / 2, kClipLen))]);
      rhs += v * v;
    }
    CHECK(std::abs(lhs - rhs) <= 1e-3 * rhs);
  }
}

TEST_CASE("mag_phase handles the axis and zero conventions") {
  Spectrum spec;
  spec.re = {0.0, -1.0, 3.0, -1.0};
  spec.im = {0.0, 0.0, 4.0, -0.0};
  std::vector<double> mag, phase;
  mag_phase(spec, mag, phase);
  CHECK(mag[0] == 0.0);
  CHECK(phase[0] == 0.0);
  CHECK(mag[1] == doctest::Approx(1.0));
  CHECK(phase[1] == doctest::Approx(kPi));
  CHECK(mag[2] == doctest::Approx(5.0));
  CHECK(phase[2] == doctest::Approx(std::atan2(4.0, 3.0)));
  // A negative-zero imaginary part folds to +pi, keeping phase in (-pi, pi].
  CHECK(phase[3] == doctest::Approx(kPi));
}

TEST_CASE("mel filterbank rows are nonnegative, unimodal, normalized") {
  const auto bank = mel_filterbank();
  REQUIRE(bank.size() == static_cast<size_t>(kMels * kBins));
  int64_t nonzero_rows = 0;
  for (int64_t m = 0; m < kMels; ++m) {
    const double* row = bank.data() + m * kBins;
    double sum = 0.0;
    int64_t peak = 0;
    for (int64_t i = 0; i < kBins; ++i) {
      CHECK(row[i] >= 0.0);
      sum += row[i];
      if (row[i] > row[peak]) peak = i;
    }
    if (sum > 0.0) {
      ++nonzero_rows;
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
      for (int64_t i = 1; i <= peak; ++i) CHECK(row[i] >= row[i - 1]);
      for (int64_t i = peak + 1; i < kBins; ++i) CHECK(row[i] <= row[i - 1]);
    }
  }
  // The top of the band must be well covered even though the narrow
  // low-frequency triangles fall between bins.
  CHECK(nonzero_rows > kMels / 2);
}

TEST_CASE("mel filter centers are strictly increasing") {
  auto mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  auto hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  const double hi = mel(22050.0);
  double prev = -1.0;
  for (int64_t m = 1; m <= kMels; ++m) {
    const double center = hz(hi * static_cast<double>(m) / static_cast<double>(kMels + 1));
    CHECK(center > prev);
    prev = center;
  }
}

TEST_CASE("mel filterbank matches an independent triangle oracle") {
  const auto bank = mel_filterbank();
  auto mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  auto hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  const double hi = mel(22050.0);
  double worst = 0.0;
  double worst_row_apply = 0.0;
  for (int64_t m = 0; m < kMels; ++m) {
    const double left = hz(hi * static_cast<double>(m) / static_cast<double>(kMels + 1));
    const double center = hz(hi * static_cast<double>(m + 1) / static_cast<double>(kMels + 1));
    const double right = hz(hi * static_cast<double>(m + 2) / static_cast<double>(kMels + 1));
    std::vector<double> row(static_cast<size_t>(kBins), 0.0);
    double area = 0.0;
    for (int64_t i = 0; i < kBins; ++i) {
      const double f = static_cast<double>(i) * 22050.0 / static_cast<double>(kBins - 1);
      double w = 0.0;
      if (f > left && f < center) w = (f - left) / (center - left);
      if (f >= center && f < right) w = (right - f) / (right - center);
      row[static_cast<size_t>(i)] = w;
      area += w;
    }
    double applied = 0.0;  // bank row times an all-ones power spectrum
    for (int64_t i = 0; i < kBins; ++i) {
      const double expect = area > 0.0 ? row[static_cast<size_t>(i)] / area : 0.0;
      worst = std::max(worst, std::abs(expect - bank[static_cast<size_t>(m * kBins + i)]));
      applied += bank[static_cast<size_t>(m * kBins + i)];
    }
    const double applied_expect = area > 0.0 ? 1.0 : 0.0;
    worst_row_apply = std::max(worst_row_apply, std::abs(applied - applied_expect));
  }
  CHECK(worst < 1e-6);
  CHECK(worst_row_apply < 1e-6);
}

TEST_CASE("mel filterbank rejects invalid bands") {
  CHECK_THROWS_AS(mel_filterbank(128, 128, 44100.0, 100.0, 100.0), ContractError);
  CHECK_THROWS_AS(mel_filterbank(128, 128, 44100.0, 0.0, 30000.0), ContractError);
  CHECK_THROWS_AS(mel_filterbank(0, 128, 44100.0, 0.0, 22050.0), ContractError);
}

TEST_CASE("featurize of the zero clip is the zero feature") {
  AudioClip clip;
  clip.samples.assign(static_cast<size_t>(kClipLen), 0.0f);
  Tensor f = featurize(clip);
  REQUIRE(f.shape() == Shape{3, kBins, kFrames});
  const float* d = f.data<float>();
  for (int64_t i = 0; i < f.numel(); ++i) CHECK(d[i] == 0.0f);
}

TEST_CASE("featurize is a pure function of the clip") {
  const AudioClip clip = noise_clip(5);
  Tensor a = featurize(clip);
  Tensor b = featurize(clip);
  CHECK(std::memcmp(a.data<float>(), b.data<float>(), sizeof(float) * static_cast<size_t>(a.numel())) == 0);
}

TEST_CASE("featurize planes satisfy the range invariants") {
  const AudioClip clip = noise_clip(31);
  Tensor f = featurize(clip);
  const float* d = f.data<float>();
  const int64_t plane = kBins * kFrames;
  for (int64_t i = 0; i < plane; ++i) {
    CHECK(d[i] >= 0.0f);  // log1p(magnitude)
    // Phase is (-pi, pi] in f64; the stored f32 plane adds one rounding ulp.
    CHECK(d[plane + i] > -kPi - 1e-6);
    CHECK(d[plane + i] <= kPi + 1e-6);
    CHECK(d[2 * plane + i] >= 0.0f);           // log1p(mel power)
  }
}

TEST_CASE("pure tone lands in the mel band predicted by the filterbank") {
  const AudioClip clip = tone_clip(10);
  Tensor f = featurize(clip);
  const Spectrum spec = stft(clip);
  const auto bank = mel_filterbank();

  const int64_t plane = kBins * kFrames;
  const float* melplane = f.data<float>() + 2 * plane;
  for (int64_t t : {5, 20, 38}) {
    // Oracle: push this frame's power spectrum through the bank directly.
    int64_t expect = 0;
    double best = -1.0;
    for (int64_t m = 0; m < kMels; ++m) {
      double acc = 0.0;
      for (int64_t b = 0; b < kBins; ++b) {
        const double re = spec.re[static_cast<size_t>(b * kFrames + t)];
        const double im = spec.im[static_cast<size_t>(b * kFrames + t)];
        acc += bank[static_cast<size_t>(m * kBins + b)] * (re * re + im * im);
      }
      if (acc > best) {
        best = acc;
        expect = m;
      }
    }
    int64_t got = 0;
    for (int64_t m = 0; m < kMels; ++m) {
      if (melplane[m * kFrames + t] > melplane[got * kFrames + t]) got = m;
    }
    CHECK(got == expect);
    // The winning band must actually cover the tone's bin.
    CHECK(bank[static_cast<size_t>(got * kBins + 10)] > 0.0);
  }
}

TEST_CASE("featurize applies per-channel standardization when stats are given") {
  const AudioClip clip = noise_clip(77);
  Tensor raw = featurize(clip);
  FeatureStats stats;
  stats.mean = {0.5, 0.0, 1.5};
  stats.stddev = {2.0, 0.5, 4.0};
  Tensor norm = featurize(clip, &stats);
  const int64_t plane = kBins * kFrames;
  const float* r = raw.data<float>();
  const float* n = norm.data<float>();
  for (int64_t i = 0; i < plane; i += 997) {
    CHECK(n[i] == doctest::Approx((r[i] - 0.5) / 2.0).epsilon(1e-5));
    CHECK(n[plane + i] == doctest::Approx(r[plane + i] / 0.5).epsilon(1e-5));
    CHECK(n[2 * plane + i] == doctest::Approx((r[2 * plane + i] - 1.5) / 4.0).epsilon(1e-5));
  }
}
