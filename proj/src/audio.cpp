#include "cmcrl/audio.hpp"

#include <cmath>
#include <cstddef>
#include <string>

#include "cmcrl/error.hpp"
#include "cmcrl/gemm.hpp"

namespace cmcrl::audio {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Reflect indexing without edge duplication: x[-1] -> x[1], x[len] -> x[len-2].
int64_t reflect_index(int64_t i, int64_t len) {
  while (i < 0 || i >= len) {
    if (i < 0) i = -i;
    if (i >= len) i = 2 * (len - 1) - i;
  }
  return i;
}

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

}  // namespace

std::vector<float> pad_or_trim(const std::vector<float>& samples, int64_t target) {
  if (samples.empty()) throw ContractError("pad_or_trim: input is empty");
  if (target <= 0) throw ContractError("pad_or_trim: target length must be positive, got " + std::to_string(target));
  const int64_t len = static_cast<int64_t>(samples.size());
  if (len == target) return samples;
  std::vector<float> out(static_cast<size_t>(target), 0.0f);
  if (len > target) {
    const int64_t front = (len - target) / 2;
    for (int64_t i = 0; i < target; ++i) out[static_cast<size_t>(i)] = samples[static_cast<size_t>(front + i)];
  } else {
    const int64_t front = (target - len) / 2;
    for (int64_t i = 0; i < len; ++i) out[static_cast<size_t>(front + i)] = samples[static_cast<size_t>(i)];
  }
  return out;
}

Spectrum stft(const AudioClip& clip) {
  const int64_t len = static_cast<int64_t>(clip.samples.size());
  if (len != kClipLen) {
    throw ContractError("stft: clip must hold " + std::to_string(kClipLen) + " samples, got " +
                        std::to_string(len));
  }

  // Periodic Hann window.
  std::vector<double> window(kNfft);
  for (int64_t n = 0; n < kNfft; ++n) {
    window[static_cast<size_t>(n)] = 0.5 * (1.0 - std::cos(2.0 * kPi * static_cast<double>(n) / static_cast<double>(kNfft)));
  }

  // Windowed frames as a kNfft x kFrames matrix (frame index is the column),
  // with the signal reflect-padded by n_fft/2 on each side.
  std::vector<double> frames(static_cast<size_t>(kNfft * kFrames));
  for (int64_t t = 0; t < kFrames; ++t) {
    for (int64_t n = 0; n < kNfft; ++n) {
      const int64_t src = reflect_index(t * kHop + n - kNfft / 2, len);
      frames[static_cast<size_t>(n * kFrames + t)] =
          window[static_cast<size_t>(n)] * static_cast<double>(clip.samples[static_cast<size_t>(src)]);
    }
  }

  // One-sided DFT via two real matrix products: Re = C * F, Im = S * F with
  // C[b][n] = cos(2πbn/n_fft) and S[b][n] = -sin(2πbn/n_fft).
  std::vector<double> dft_cos(static_cast<size_t>(kBins * kNfft));
  std::vector<double> dft_sin(static_cast<size_t>(kBins * kNfft));
  for (int64_t b = 0; b < kBins; ++b) {
    for (int64_t n = 0; n < kNfft; ++n) {
      const double angle = 2.0 * kPi * static_cast<double>(b) * static_cast<double>(n) / static_cast<double>(kNfft);
      dft_cos[static_cast<size_t>(b * kNfft + n)] = std::cos(angle);
      dft_sin[static_cast<size_t>(b * kNfft + n)] = -std::sin(angle);
    }
  }

  Spectrum spec;
  spec.re.assign(static_cast<size_t>(kBins * kFrames), 0.0);
  spec.im.assign(static_cast<size_t>(kBins * kFrames), 0.0);
  gemm_nn<double>(kBins, kFrames, kNfft, dft_cos.data(), frames.data(), spec.re.data());
  gemm_nn<double>(kBins, kFrames, kNfft, dft_sin.data(), frames.data(), spec.im.data());
  return spec;
}

void mag_phase(const Spectrum& spec, std::vector<double>& magnitude, std::vector<double>& phase) {
  if (spec.re.size() != spec.im.size()) throw ContractError("mag_phase: mismatched re/im planes");
  const size_t n = spec.re.size();
  magnitude.resize(n);
  phase.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const double re = spec.re[i];
    const double im = spec.im[i];
    magnitude[i] = std::hypot(re, im);
    double p = (re == 0.0 && im == 0.0) ? 0.0 : std::atan2(im, re);
    if (p <= -kPi) p = kPi;  // fold the principal value into (-pi, pi]
    phase[i] = p;
  }
}

std::vector<double> mel_filterbank(int64_t n_mels, int64_t n_bins, double sample_rate,
                                   double f_min, double f_max) {
  if (n_mels < 1 || n_bins < 2) throw ContractError("mel_filterbank: need n_mels >= 1 and n_bins >= 2");
  if (!(f_min >= 0.0) || !(f_max > f_min) || f_max > sample_rate / 2.0 + 1e-9) {
    throw ContractError("mel_filterbank: need 0 <= f_min < f_max <= sample_rate/2");
  }

  // n_mels + 2 break points equally spaced on the mel scale; triangle m spans
  // [edge[m], edge[m+2]] with its peak at edge[m+1].
  std::vector<double> edges(static_cast<size_t>(n_mels + 2));
  const double mel_lo = hz_to_mel(f_min);
  const double mel_hi = hz_to_mel(f_max);
  for (int64_t i = 0; i < n_mels + 2; ++i) {
    edges[static_cast<size_t>(i)] =
        mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }

  // Bin i sits at i * sample_rate / n_fft = i * (sample_rate/2) / (n_bins - 1),
  // so the last one-sided bin lands exactly on Nyquist.
  std::vector<double> bank(static_cast<size_t>(n_mels * n_bins), 0.0);
  for (int64_t m = 0; m < n_mels; ++m) {
    const double left = edges[static_cast<size_t>(m)];
    const double center = edges[static_cast<size_t>(m + 1)];
    const double right = edges[static_cast<size_t>(m + 2)];
    double row_sum = 0.0;
    for (int64_t i = 0; i < n_bins; ++i) {
      const double f = static_cast<double>(i) * (sample_rate / 2.0) / static_cast<double>(n_bins - 1);
      double w = 0.0;
      if (f > left && f < right) {
        w = f <= center ? (f - left) / (center - left) : (right - f) / (right - center);
      }
      bank[static_cast<size_t>(m * n_bins + i)] = w;
      row_sum += w;
    }
    if (row_sum > 0.0) {
      for (int64_t i = 0; i < n_bins; ++i) bank[static_cast<size_t>(m * n_bins + i)] /= row_sum;
    }
  }
  return bank;
}

Tensor featurize(const AudioClip& clip, const FeatureStats* stats) {
  const Spectrum spec = stft(clip);
  std::vector<double> magnitude, phase;
  mag_phase(spec, magnitude, phase);

  static const std::vector<double> bank = mel_filterbank();

  // Mel energies: bank (n_mels x n_bins) times the power spectrum (n_bins x frames).
  std::vector<double> power(magnitude.size());
  for (size_t i = 0; i < magnitude.size(); ++i) power[i] = magnitude[i] * magnitude[i];
  std::vector<double> mel(static_cast<size_t>(kMels * kFrames), 0.0);
  gemm_nn<double>(kMels, kFrames, kBins, bank.data(), power.data(), mel.data());

  const int64_t plane = kBins * kFrames;
  Tensor out = Tensor::zeros({3, kBins, kFrames});
  float* o = out.data<float>();
  for (int64_t i = 0; i < plane; ++i) {
    double c0 = std::log1p(magnitude[static_cast<size_t>(i)]);
    double c1 = phase[static_cast<size_t>(i)];
    double c2 = std::log1p(mel[static_cast<size_t>(i)]);
    if (stats != nullptr) {
      c0 = (c0 - stats->mean[0]) / stats->stddev[0];
      c1 = (c1 - stats->mean[1]) / stats->stddev[1];
      c2 = (c2 - stats->mean[2]) / stats->stddev[2];
    }
    o[i] = static_cast<float>(c0);
    o[plane + i] = static_cast<float>(c1);
    o[2 * plane + i] = static_cast<float>(c2);
  }
  return out;
}

}  // namespace cmcrl::audio
