#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cmcrl/audio.hpp"
#include "cmcrl/augment.hpp"
#include "cmcrl/tensor.hpp"
#include "json.hpp"

namespace cmcrl {

// ---------------------------------------------------------------------------
// CMT1 tensor format: "CMT1" magic, u8 dtype (0=f32, 1=f64), u8 rank,
// rank x u64 little-endian dims, raw little-endian payload.
// ---------------------------------------------------------------------------

std::vector<uint8_t> tensor_to_bytes(const Tensor& t);
Tensor tensor_from_bytes(const uint8_t* data, size_t size, size_t* consumed = nullptr);

void tensor_write(const Tensor& t, const std::string& path);
Tensor tensor_read(const std::string& path);

// ---------------------------------------------------------------------------
// Audio/image files. WAV is mono PCM16 at 44.1 kHz only; anything else is an
// unsupported-format error, never silently resampled. PPM is binary P6 with
// maxval 255 and round-half-up quantization.
// ---------------------------------------------------------------------------

audio::AudioClip wav_read(const std::string& path);
void wav_write(const std::vector<float>& samples, const std::string& path);

void ppm_write(const Image& img, const std::string& path);
Image ppm_read(const std::string& path);

// ---------------------------------------------------------------------------
// Checkpoint container: "CMCK" magic, u32 version, u64 JSON length, JSON
// metadata, u32 tensor count, then per tensor u16 name length, name bytes,
// u64 blob length, CMT1 blob. Round-trips are bit-exact.
// ---------------------------------------------------------------------------

constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json metadata;
  // Ordered by name so saving is deterministic.
  std::map<std::string, Tensor> tensors;

  const Tensor& require(const std::string& name) const;
  // Throws listing every missing name at once.
  void require_all(const std::vector<std::string>& names) const;
};

void checkpoint_save(const Checkpoint& ckpt, const std::string& path);
Checkpoint checkpoint_load(const std::string& path);

// ---------------------------------------------------------------------------
// Paired dataset: synthetic generation, manifest, loading.
// ---------------------------------------------------------------------------

struct LabeledPair {
  audio::AudioClip clip;
  Image image;
  int label = -1;
};

struct DatasetManifest {
  std::string root;
  int64_t num_classes = 0;
  int64_t per_class = 0;
  uint64_t seed = 0;
  double train_fraction = 0.8;
  int64_t image_size = 80;
  int64_t format_version = 1;

  int64_t train_per_class() const;
  std::string wav_path(int64_t cls, int64_t index) const;
  std::string ppm_path(int64_t cls, int64_t index) const;
};

// Writes WAV/PPM pairs plus manifest.json under root. Class k audio is a
// harmonic tone at 220·2^(k/K) Hz with a class-specific harmonic profile and
// per-sample phase/frequency/noise nuisance; class k images are procedural
// patterns (class hue plus stripes/circles/checkers) with translation and
// brightness nuisance. Fully deterministic in (K, n, seed).
DatasetManifest synth_dataset(const std::string& root, int64_t num_classes, int64_t per_class,
                              uint64_t seed, double train_fraction = 0.8);

void manifest_save(const DatasetManifest& m, const std::string& path);
DatasetManifest manifest_load(const std::string& path);

// Loads the pairs for one split. The split is by per-class index: the first
// train_per_class() samples are train, the rest test (disjoint by index).
std::vector<LabeledPair> load_split(const DatasetManifest& m, bool train);

}  // namespace cmcrl
