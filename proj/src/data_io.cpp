#include "cmcrl/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cmcrl/error.hpp"
#include "cmcrl/rng.hpp"

namespace cmcrl {

namespace {

constexpr double kPi = 3.14159265358979323846;

void append_bytes(std::vector<uint8_t>& out, const void* src, size_t n) {
  const auto* p = static_cast<const uint8_t*>(src);
  out.insert(out.end(), p, p + n);
}

template <class T>
void append_le(std::vector<uint8_t>& out, T value) {
  uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  append_bytes(out, raw, sizeof(T));
}

template <class T>
T read_le(const uint8_t* data, size_t size, size_t& offset, const char* what) {
  if (offset + sizeof(T) > size) {
    throw FormatError(std::string("truncated while reading ") + what + " at byte " +
                      std::to_string(offset) + ": need " + std::to_string(sizeof(T)) +
                      " bytes, have " + std::to_string(size - offset));
  }
  T value;
  std::memcpy(&value, data + offset, sizeof(T));
  offset += sizeof(T);
  return value;
}

std::vector<uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path + " for reading");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void spit(const std::string& path, const void* data, size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw IoError("short write to " + path);
}

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = h - std::floor(h);  // wrap to [0,1)
  const double f = h * 6.0;
  const int sector = static_cast<int>(f) % 6;
  const double frac = f - std::floor(f);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * frac);
  const double t = v * (1.0 - s * (1.0 - frac));
  switch (sector) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

std::string zero_pad(int64_t value, int width) {
  std::string s = std::to_string(value);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// CMT1
// ---------------------------------------------------------------------------

std::vector<uint8_t> tensor_to_bytes(const Tensor& t) {
  std::vector<uint8_t> out;
  append_bytes(out, "CMT1", 4);
  append_le<uint8_t>(out, t.dtype() == Dtype::F32 ? 0 : 1);
  append_le<uint8_t>(out, static_cast<uint8_t>(t.rank()));
  for (int64_t d : t.shape()) append_le<uint64_t>(out, static_cast<uint64_t>(d));
  if (t.dtype() == Dtype::F32) {
    append_bytes(out, t.data<float>(), sizeof(float) * static_cast<size_t>(t.numel()));
  } else {
    append_bytes(out, t.data<double>(), sizeof(double) * static_cast<size_t>(t.numel()));
  }
  return out;
}

Tensor tensor_from_bytes(const uint8_t* data, size_t size, size_t* consumed) {
  size_t off = 0;
  if (size < 4 || std::memcmp(data, "CMT1", 4) != 0) {
    throw FormatError("bad tensor magic at byte 0: expected \"CMT1\"");
  }
  off = 4;
  const uint8_t dtype_code = read_le<uint8_t>(data, size, off, "dtype");
  if (dtype_code > 1) {
    throw FormatError("unknown dtype code " + std::to_string(dtype_code) + " at byte 4");
  }
  const Dtype dt = dtype_code == 0 ? Dtype::F32 : Dtype::F64;
  const uint8_t rank = read_le<uint8_t>(data, size, off, "rank");
  if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank) + " at byte 5");
  Shape shape(rank);
  int64_t numel = 1;
  for (int i = 0; i < rank; ++i) {
    const uint64_t d = read_le<uint64_t>(data, size, off, "dim");
    if (d == 0 || d > (1ull << 32)) throw FormatError("implausible dim " + std::to_string(d));
    shape[static_cast<size_t>(i)] = static_cast<int64_t>(d);
    numel *= shape[static_cast<size_t>(i)];
  }
  const size_t payload = static_cast<size_t>(numel) * dtype_size(dt);
  if (size - off < payload) {
    throw FormatError("truncated tensor payload at byte " + std::to_string(off) + ": expected " +
                      std::to_string(payload) + " bytes, have " + std::to_string(size - off));
  }
  Tensor t = Tensor::zeros(shape, dt);
  if (dt == Dtype::F32) {
    std::memcpy(t.data<float>(), data + off, payload);
  } else {
    std::memcpy(t.data<double>(), data + off, payload);
  }
  off += payload;
  if (consumed != nullptr) *consumed = off;
  return t;
}

void tensor_write(const Tensor& t, const std::string& path) {
  const auto bytes = tensor_to_bytes(t);
  spit(path, bytes.data(), bytes.size());
}

Tensor tensor_read(const std::string& path) {
  const auto bytes = slurp(path);
  return tensor_from_bytes(bytes.data(), bytes.size());
}

// ---------------------------------------------------------------------------
// WAV (mono PCM16 @ 44.1 kHz)
// ---------------------------------------------------------------------------

audio::AudioClip wav_read(const std::string& path) {
  const auto bytes = slurp(path);
  size_t off = 0;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError(path + ": not a RIFF/WAVE file");
  }
  off = 12;
  bool have_fmt = false;
  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  std::vector<int16_t> pcm;
  bool have_data = false;
  while (off + 8 <= bytes.size()) {
    char id[5] = {0};
    std::memcpy(id, bytes.data() + off, 4);
    off += 4;
    const uint32_t chunk_size = read_le<uint32_t>(bytes.data(), bytes.size(), off, "chunk size");
    if (off + chunk_size > bytes.size()) {
      throw FormatError(path + ": chunk \"" + id + "\" overruns file at byte " + std::to_string(off));
    }
    if (std::strcmp(id, "fmt ") == 0) {
      if (chunk_size < 16) throw FormatError(path + ": fmt chunk too small");
      size_t f = off;
      format = read_le<uint16_t>(bytes.data(), bytes.size(), f, "format");
      channels = read_le<uint16_t>(bytes.data(), bytes.size(), f, "channels");
      rate = read_le<uint32_t>(bytes.data(), bytes.size(), f, "rate");
      f += 6;  // byte rate + block align
      bits = read_le<uint16_t>(bytes.data(), bytes.size(), f, "bits");
      have_fmt = true;
    } else if (std::strcmp(id, "data") == 0) {
      pcm.resize(chunk_size / 2);
      std::memcpy(pcm.data(), bytes.data() + off, pcm.size() * 2);
      have_data = true;
    }
    off += chunk_size + (chunk_size % 2);  // chunks are word-aligned
  }
  if (!have_fmt || !have_data) throw FormatError(path + ": missing fmt or data chunk");
  if (format != 1 || bits != 16) {
    throw FormatError(path + ": unsupported encoding (need PCM16, got format " +
                      std::to_string(format) + ", " + std::to_string(bits) + " bits)");
  }
  if (channels != 1) {
    throw FormatError(path + ": unsupported channel count " + std::to_string(channels) + " (need mono)");
  }
  if (rate != 44100) {
    throw FormatError(path + ": unsupported sample rate " + std::to_string(rate) +
                      " (need 44100, no resampling)");
  }

  audio::AudioClip clip;
  clip.samples.resize(pcm.size());
  for (size_t i = 0; i < pcm.size(); ++i) {
    clip.samples[i] = static_cast<float>(pcm[i]) / 32768.0f;
  }
  clip.samples = audio::pad_or_trim(clip.samples);
  return clip;
}

void wav_write(const std::vector<float>& samples, const std::string& path) {
  if (samples.empty()) throw ContractError("wav_write: no samples");
  std::vector<uint8_t> out;
  const uint32_t data_size = static_cast<uint32_t>(samples.size() * 2);
  append_bytes(out, "RIFF", 4);
  append_le<uint32_t>(out, 36 + data_size);
  append_bytes(out, "WAVE", 4);
  append_bytes(out, "fmt ", 4);
  append_le<uint32_t>(out, 16);
  append_le<uint16_t>(out, 1);       // PCM
  append_le<uint16_t>(out, 1);       // mono
  append_le<uint32_t>(out, 44100);
  append_le<uint32_t>(out, 44100 * 2);
  append_le<uint16_t>(out, 2);
  append_le<uint16_t>(out, 16);
  append_bytes(out, "data", 4);
  append_le<uint32_t>(out, data_size);
  for (float s : samples) {
    const long q = std::lround(static_cast<double>(s) * 32768.0);
    append_le<int16_t>(out, static_cast<int16_t>(std::clamp(q, -32767l, 32767l)));
  }
  spit(path, out.data(), out.size());
}

// ---------------------------------------------------------------------------
// PPM (binary P6, maxval 255)
// ---------------------------------------------------------------------------

void ppm_write(const Image& img, const std::string& path) {
  if (img.height <= 0 || img.width <= 0 ||
      img.data.size() != static_cast<size_t>(3 * img.height * img.width)) {
    throw ContractError("ppm_write: malformed image");
  }
  std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + static_cast<size_t>(3 * img.height * img.width));
  for (int64_t y = 0; y < img.height; ++y) {
    for (int64_t x = 0; x < img.width; ++x) {
      for (int64_t c = 0; c < 3; ++c) {
        const float v = img.at(c, y, x);
        if (!(v >= 0.0f && v <= 1.0f)) {
          throw ContractError("ppm_write: value " + std::to_string(v) + " outside [0,1] at pixel (" +
                              std::to_string(y) + "," + std::to_string(x) + ")");
        }
        // round-half-up on v*255
        out.push_back(static_cast<uint8_t>(std::floor(static_cast<double>(v) * 255.0 + 0.5)));
      }
    }
  }
  spit(path, out.data(), out.size());
}

Image ppm_read(const std::string& path) {
  const auto bytes = slurp(path);
  size_t off = 0;
  auto skip_space = [&]() {
    while (off < bytes.size()) {
      if (std::isspace(bytes[off])) {
        ++off;
      } else if (bytes[off] == '#') {
        while (off < bytes.size() && bytes[off] != '\n') ++off;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) -> int64_t {
    skip_space();
    int64_t v = 0;
    bool any = false;
    while (off < bytes.size() && std::isdigit(bytes[off])) {
      v = v * 10 + (bytes[off] - '0');
      ++off;
      any = true;
    }
    if (!any) throw FormatError(path + ": expected " + std::string(what) + " at byte " + std::to_string(off));
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw FormatError(path + ": not a binary P6 PPM");
  }
  off = 2;
  const int64_t w = read_int("width");
  const int64_t h = read_int("height");
  const int64_t maxval = read_int("maxval");
  if (w <= 0 || h <= 0) throw FormatError(path + ": bad dimensions");
  if (maxval != 255) throw FormatError(path + ": unsupported maxval " + std::to_string(maxval));
  ++off;  // the single whitespace byte after maxval
  const size_t payload = static_cast<size_t>(3 * w * h);
  if (bytes.size() - off < payload) {
    throw FormatError(path + ": truncated payload, expected " + std::to_string(payload) +
                      " bytes, have " + std::to_string(bytes.size() - off));
  }
  Image img = make_image(h, w);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < 3; ++c) {
        img.at(c, y, x) = static_cast<float>(bytes[off + static_cast<size_t>((y * w + x) * 3 + c)]) / 255.0f;
      }
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const Tensor& Checkpoint::require(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw FormatError("checkpoint is missing tensor \"" + name + "\"");
  return it->second;
}

void Checkpoint::require_all(const std::vector<std::string>& names) const {
  std::string missing;
  for (const auto& n : names) {
    if (tensors.find(n) == tensors.end()) {
      if (!missing.empty()) missing += ", ";
      missing += n;
    }
  }
  if (!missing.empty()) throw FormatError("checkpoint is missing tensors: " + missing);
}

void checkpoint_save(const Checkpoint& ckpt, const std::string& path) {
  std::vector<uint8_t> out;
  append_bytes(out, "CMCK", 4);
  append_le<uint32_t>(out, kCheckpointVersion);
  const std::string meta = ckpt.metadata.dump();
  append_le<uint64_t>(out, meta.size());
  append_bytes(out, meta.data(), meta.size());
  append_le<uint32_t>(out, static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    if (name.size() > 0xFFFF) throw ContractError("checkpoint tensor name too long: " + name);
    append_le<uint16_t>(out, static_cast<uint16_t>(name.size()));
    append_bytes(out, name.data(), name.size());
    const auto blob = tensor_to_bytes(tensor);
    append_le<uint64_t>(out, blob.size());
    append_bytes(out, blob.data(), blob.size());
  }
  spit(path, out.data(), out.size());
}

Checkpoint checkpoint_load(const std::string& path) {
  const auto bytes = slurp(path);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "CMCK", 4) != 0) {
    throw FormatError(path + ": bad checkpoint magic, expected \"CMCK\"");
  }
  size_t off = 4;
  const uint32_t version = read_le<uint32_t>(bytes.data(), bytes.size(), off, "version");
  if (version != kCheckpointVersion) {
    throw FormatError(path + ": checkpoint version " + std::to_string(version) +
                      " needs migration (this build reads version " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const uint64_t meta_len = read_le<uint64_t>(bytes.data(), bytes.size(), off, "metadata length");
  if (off + meta_len > bytes.size()) throw FormatError(path + ": truncated metadata block");
  Checkpoint ckpt;
  try {
    ckpt.metadata = nlohmann::json::parse(bytes.begin() + static_cast<ptrdiff_t>(off),
                                          bytes.begin() + static_cast<ptrdiff_t>(off + meta_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": invalid metadata JSON: " + e.what());
  }
  off += meta_len;
  const uint32_t count = read_le<uint32_t>(bytes.data(), bytes.size(), off, "tensor count");
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = read_le<uint16_t>(bytes.data(), bytes.size(), off, "name length");
    if (off + name_len > bytes.size()) throw FormatError(path + ": truncated tensor name");
    std::string name(reinterpret_cast<const char*>(bytes.data() + off), name_len);
    off += name_len;
    const uint64_t blob_len = read_le<uint64_t>(bytes.data(), bytes.size(), off, "tensor blob length");
    if (off + blob_len > bytes.size()) {
      throw FormatError(path + ": truncated tensor blob for \"" + name + "\": expected " +
                        std::to_string(blob_len) + " bytes, have " + std::to_string(bytes.size() - off));
    }
    size_t consumed = 0;
    ckpt.tensors.emplace(std::move(name), tensor_from_bytes(bytes.data() + off, blob_len, &consumed));
    off += blob_len;
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Synthetic paired dataset
// ---------------------------------------------------------------------------

int64_t DatasetManifest::train_per_class() const {
  return static_cast<int64_t>(std::llround(static_cast<double>(per_class) * train_fraction));
}

std::string DatasetManifest::wav_path(int64_t cls, int64_t index) const {
  return root + "/audio/class_" + std::to_string(cls) + "/sample_" + zero_pad(index, 4) + ".wav";
}

std::string DatasetManifest::ppm_path(int64_t cls, int64_t index) const {
  return root + "/images/class_" + std::to_string(cls) + "/sample_" + zero_pad(index, 4) + ".ppm";
}

namespace {

// Class k tone: fundamental 220·2^(k/K) with a class-specific harmonic
// profile (spectral tilt + odd/even emphasis), shared ±3% frequency jitter,
// random phases, and light uniform noise; peak-normalized to 0.75.
std::vector<float> synth_audio(int64_t cls, int64_t num_classes, Rng& rng) {
  const double f0 = 220.0 * std::pow(2.0, static_cast<double>(cls) / static_cast<double>(num_classes));
  const double tilt = 0.35 + 1.1 * static_cast<double>(cls) / static_cast<double>(num_classes);
  constexpr int kHarmonics = 6;
  double amp[kHarmonics];
  double phase[kHarmonics];
  for (int h = 0; h < kHarmonics; ++h) {
    amp[h] = std::exp(-tilt * h);
    if (h > 0 && ((h + 1 + cls) % 2) == 1) amp[h] *= 0.4;  // parity emphasis, fundamental untouched
    phase[h] = rng.uniform(0.0, 2.0 * kPi);
  }
  const double jitter = 1.0 + rng.uniform(-0.03, 0.03);

  std::vector<double> x(static_cast<size_t>(audio::kClipLen), 0.0);
  for (int64_t n = 0; n < audio::kClipLen; ++n) {
    double v = 0.0;
    for (int h = 0; h < kHarmonics; ++h) {
      const double f = f0 * jitter * static_cast<double>(h + 1);
      v += amp[h] * std::sin(2.0 * kPi * f * static_cast<double>(n) / 44100.0 + phase[h]);
    }
    x[static_cast<size_t>(n)] = v + rng.uniform(-0.01, 0.01);
  }
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  std::vector<float> out(x.size());
  const double scale = peak > 0.0 ? 0.75 / peak : 0.0;
  for (size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i] * scale);
  return out;
}

// Class k image: class hue + one of three pattern families (stripes, rings,
// checkers) whose scale also varies with k, under translation and brightness
// nuisance on a dark background.
Image synth_image(int64_t cls, int64_t num_classes, int64_t size, Rng& rng) {
  const double hue = (static_cast<double>(cls) + 0.5) / static_cast<double>(num_classes);
  const double brightness = rng.uniform(0.7, 1.0);
  const int64_t max_shift = size / 8;
  const int64_t dy = rng.uniform_int(-max_shift, max_shift);
  const int64_t dx = rng.uniform_int(-max_shift, max_shift);
  const int64_t family = cls % 3;
  const int64_t scale = 6 + 3 * (cls / 3);

  double fg[3], bg[3];
  hsv_to_rgb(hue, 0.85, brightness, fg);
  hsv_to_rgb(hue, 0.15, 0.12, bg);

  Image img = make_image(size, size);
  img.label = static_cast<int>(cls);
  // Shift pattern coordinates well into the positives (by an even multiple of
  // the cell size) so integer division keeps the pattern periodic under the
  // random translation.
  const int64_t origin = scale * 4096;
  for (int64_t y = 0; y < size; ++y) {
    for (int64_t x = 0; x < size; ++x) {
      const int64_t u = y - dy + origin;
      const int64_t v = x - dx + origin;
      bool on = false;
      if (family == 0) {
        on = ((u + v) / scale) % 2 == 0;  // diagonal stripes
      } else if (family == 1) {
        const double cy = static_cast<double>(origin) + static_cast<double>(size) / 2.0;
        const double r = std::hypot(static_cast<double>(u) - cy, static_cast<double>(v) - cy);
        on = (static_cast<int64_t>(r) / scale) % 2 == 0;  // concentric rings
      } else {
        on = (((u / scale) % 2) ^ ((v / scale) % 2)) == 0;  // checkers
      }
      for (int64_t c = 0; c < 3; ++c) {
        img.at(c, y, x) = static_cast<float>(std::clamp(on ? fg[c] : bg[c], 0.0, 1.0));
      }
    }
  }
  return img;
}

}  // namespace

DatasetManifest synth_dataset(const std::string& root, int64_t num_classes, int64_t per_class,
                              uint64_t seed, double train_fraction) {
  if (num_classes < 2) throw ContractError("synth_dataset: need at least 2 classes");
  if (per_class < 4) throw ContractError("synth_dataset: need at least 4 samples per class");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ContractError("synth_dataset: train_fraction must lie in (0,1)");
  }
  DatasetManifest m;
  m.root = root;
  m.num_classes = num_classes;
  m.per_class = per_class;
  m.seed = seed;
  m.train_fraction = train_fraction;

  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw IoError("cannot create dataset root " + root + ": " + ec.message());
  for (int64_t k = 0; k < num_classes; ++k) {
    std::filesystem::create_directories(root + "/audio/class_" + std::to_string(k), ec);
    std::filesystem::create_directories(root + "/images/class_" + std::to_string(k), ec);
    if (ec) throw IoError("cannot create class directories under " + root);
    for (int64_t i = 0; i < per_class; ++i) {
      Rng audio_rng(Rng::derive(seed, 0xA, static_cast<uint64_t>(k), static_cast<uint64_t>(i)));
      Rng image_rng(Rng::derive(seed, 0xB, static_cast<uint64_t>(k), static_cast<uint64_t>(i)));
      wav_write(synth_audio(k, num_classes, audio_rng), m.wav_path(k, i));
      ppm_write(synth_image(k, num_classes, m.image_size, image_rng), m.ppm_path(k, i));
    }
  }
  manifest_save(m, root + "/manifest.json");
  return m;
}

void manifest_save(const DatasetManifest& m, const std::string& path) {
  nlohmann::json j;
  j["format_version"] = m.format_version;
  j["num_classes"] = m.num_classes;
  j["per_class"] = m.per_class;
  j["seed"] = m.seed;
  j["train_fraction"] = m.train_fraction;
  j["image_size"] = m.image_size;
  const std::string text = j.dump(2) + "\n";
  spit(path, text.data(), text.size());
}

DatasetManifest manifest_load(const std::string& path) {
  const auto bytes = slurp(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": invalid manifest JSON: " + e.what());
  }
  DatasetManifest m;
  m.root = std::filesystem::path(path).parent_path().string();
  try {
    m.format_version = j.at("format_version").get<int64_t>();
    m.num_classes = j.at("num_classes").get<int64_t>();
    m.per_class = j.at("per_class").get<int64_t>();
    m.seed = j.at("seed").get<uint64_t>();
    m.train_fraction = j.at("train_fraction").get<double>();
    m.image_size = j.at("image_size").get<int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": manifest missing required key: " + e.what());
  }
  if (m.format_version != 1) {
    throw FormatError(path + ": manifest format_version " + std::to_string(m.format_version) +
                      " needs migration");
  }
  return m;
}

std::vector<LabeledPair> load_split(const DatasetManifest& m, bool train) {
  const int64_t n_train = m.train_per_class();
  std::vector<LabeledPair> out;
  for (int64_t k = 0; k < m.num_classes; ++k) {
    const int64_t lo = train ? 0 : n_train;
    const int64_t hi = train ? n_train : m.per_class;
    for (int64_t i = lo; i < hi; ++i) {
      LabeledPair pair;
      pair.clip = wav_read(m.wav_path(k, i));
      pair.clip.label = static_cast<int>(k);
      pair.image = ppm_read(m.ppm_path(k, i));
      pair.image.label = static_cast<int>(k);
      pair.label = static_cast<int>(k);
      out.push_back(std::move(pair));
    }
  }
  return out;
}

}  // namespace cmcrl
