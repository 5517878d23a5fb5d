#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cmcrl/tensor.hpp"

namespace cmcrl::audio {

// Fixed front-end geometry: 0.5 s at 44.1 kHz analyzed with a 254-point FFT
// (128 one-sided bins) and hop 512 gives exactly 44 frames, i.e. a 128×44
// time-frequency image.
constexpr int64_t kClipLen = 22050;
constexpr int64_t kSampleRate = 44100;
constexpr int64_t kNfft = 254;
constexpr int64_t kBins = kNfft / 2 + 1;  // 128
constexpr int64_t kHop = 512;
constexpr int64_t kFrames = 44;
constexpr int64_t kMels = 128;

struct AudioClip {
  std::vector<float> samples;  // in [-1, 1], length kClipLen
  int sample_rate = kSampleRate;
  int label = -1;
};

// Complex one-sided spectrum, bin-major: plane[b * kFrames + t].
struct Spectrum {
  std::vector<double> re, im;
};

// Longer inputs are center-trimmed (extra sample dropped at the back),
// shorter ones zero-padded symmetrically (extra zero at the back).
std::vector<float> pad_or_trim(const std::vector<float>& samples, int64_t target = kClipLen);

// Reflect-padded periodic-Hann STFT per the geometry above. The transform is
// unnormalized: X[b][t] = Σ_n w[n]·x[t·hop + n − n_fft/2]·e^(−i2πbn/n_fft).
Spectrum stft(const AudioClip& clip);

// magnitude = |z|, phase = atan2(im, re) with atan2(0,0) := 0 and the
// principal value folded into (−π, π].
void mag_phase(const Spectrum& spec, std::vector<double>& magnitude, std::vector<double>& phase);

// Triangular filters with centers equally spaced in mel(f)=2595·log10(1+f/700).
// Rows are normalized to sum 1 over the bins they cover; a triangle narrower
// than the bin spacing covers no bin and its row stays zero.
std::vector<double> mel_filterbank(int64_t n_mels = kMels, int64_t n_bins = kBins,
                                   double sample_rate = kSampleRate, double f_min = 0.0,
                                   double f_max = kSampleRate / 2.0);

// Per-channel standardization statistics estimated on a training set.
struct FeatureStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
};

// 3×128×44 feature: [log1p(|X|), phase(X), log1p(mel·|X|²)], standardized
// per channel when stats are supplied. Output tensor is f32.
Tensor featurize(const AudioClip& clip, const FeatureStats* stats = nullptr);

}  // namespace cmcrl::audio
