#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "cmcrl/cmcrl.hpp"
#include "cmcrl/gradcheck.hpp"
#include "doctest.h"

using namespace cmcrl;

namespace {

// Direct summation of the loss definition, no stabilization. Safe for the
// small magnitudes used in tests; frozen independently of the library path.
double loss_oracle(const std::vector<std::vector<double>>& z, const std::vector<int64_t>& y,
                   double tau) {
  const size_t n = z.size();
  double total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    std::vector<size_t> positives;
    for (size_t j = 0; j < n; ++j) {
      if (j != i && y[j] == y[i]) positives.push_back(j);
    }
    REQUIRE(!positives.empty());
    double denom = 0.0;
    for (size_t t = 0; t < n; ++t) {
      if (t == i) continue;
      double dot = 0.0;
      for (size_t k = 0; k < z[i].size(); ++k) dot += z[i][k] * z[t][k];
      denom += std::exp(dot / tau);
    }
    double anchor = 0.0;
    for (size_t p : positives) {
      double dot = 0.0;
      for (size_t k = 0; k < z[i].size(); ++k) dot += z[i][k] * z[p][k];
      anchor += std::log(std::exp(dot / tau) / denom);
    }
    total += -anchor / static_cast<double>(positives.size());
  }
  return total;
}

std::vector<std::vector<double>> random_unit_rows(int64_t n, int64_t d, Rng& rng) {
  std::vector<std::vector<double>> z(static_cast<size_t>(n), std::vector<double>(d));
  for (auto& row : z) {
    double norm2 = 0.0;
    for (double& v : row) {
      v = rng.normal(0.0, 1.0);
      norm2 += v * v;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& v : row) v *= inv;
  }
  return z;
}

Tensor rows_to_tensor(const std::vector<std::vector<double>>& z, Dtype dt = Dtype::F64) {
  const int64_t n = static_cast<int64_t>(z.size());
  const int64_t d = static_cast<int64_t>(z.front().size());
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(n * d));
  for (const auto& row : z) flat.insert(flat.end(), row.begin(), row.end());
  return Tensor::from_values({n, d}, flat, dt);
}

// Applies a product of random Givens rotations to every row (an exactly
// orthogonal map up to rounding), in place.
void rotate_rows(std::vector<std::vector<double>>& z, Rng& rng, int sweeps) {
  const int64_t d = static_cast<int64_t>(z.front().size());
  for (int s = 0; s < sweeps; ++s) {
    const int64_t i = rng.uniform_int(0, d - 1);
    int64_t j = rng.uniform_int(0, d - 2);
    if (j >= i) ++j;
    const double theta = rng.uniform(0.0, 6.283185307179586);
    const double c = std::cos(theta), sn = std::sin(theta);
    for (auto& row : z) {
      const double a = row[static_cast<size_t>(i)], b = row[static_cast<size_t>(j)];
      row[static_cast<size_t>(i)] = c * a - sn * b;
      row[static_cast<size_t>(j)] = sn * a + c * b;
    }
  }
}

double loss_value(const Tensor& t) {
  if (t.dtype() == Dtype::F64) return t.data<double>()[0];
  return static_cast<double>(t.data<float>()[0]);
}

// In-memory synthetic pair: class-dependent tone and flat-color image with
// per-sample nuisance, enough structure for tiny training runs.
LabeledPair make_test_pair(Rng& rng, int label) {
  LabeledPair p;
  p.label = label;
  p.clip.label = label;
  p.clip.samples.resize(static_cast<size_t>(audio::kClipLen));
  const double freq = 220.0 * (1 + label);
  const double phase = rng.uniform(0.0, 6.28);
  for (int64_t i = 0; i < audio::kClipLen; ++i) {
    const double t = static_cast<double>(i) / audio::kSampleRate;
    p.clip.samples[static_cast<size_t>(i)] =
        static_cast<float>(0.5 * std::sin(6.283185307179586 * freq * t + phase) +
                           0.02 * rng.normal(0.0, 1.0));
  }
  p.image = make_image(20, 20);
  p.image.label = label;
  const float base[4][3] = {{0.9f, 0.2f, 0.1f}, {0.1f, 0.8f, 0.3f},
                            {0.2f, 0.3f, 0.9f}, {0.8f, 0.8f, 0.1f}};
  const double shift = rng.uniform(0.0, 6.28);
  for (int64_t c = 0; c < 3; ++c) {
    for (int64_t y = 0; y < 20; ++y) {
      for (int64_t x = 0; x < 20; ++x) {
        // Class hue modulated by a stripe pattern so every channel keeps
        // spatial variance (flat images starve batch norm).
        const double wave = 0.5 + 0.5 * std::sin(0.9 * (x + 2.0 * y + label) + shift);
        const float v = base[label % 4][c] * static_cast<float>(0.35 + 0.65 * wave) +
                        0.05f * static_cast<float>(rng.uniform(-1.0, 1.0));
        p.image.at(c, y, x) = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  return p;
}

std::vector<LabeledPair> make_test_dataset(int64_t classes, int64_t per_class, uint64_t seed) {
  Rng rng(seed);
  std::vector<LabeledPair> out;
  for (int64_t k = 0; k < classes; ++k) {
    for (int64_t i = 0; i < per_class; ++i) {
      out.push_back(make_test_pair(rng, static_cast<int>(k)));
    }
  }
  return out;
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::vector<char> param_bytes(const nn::ParamList& state) {
  std::vector<char> out;
  for (const NamedParam& p : state.params) {
    const char* raw = nullptr;
    size_t len = 0;
    if (p.value.dtype() == Dtype::F32) {
      raw = reinterpret_cast<const char*>(p.value.data<float>());
      len = sizeof(float) * static_cast<size_t>(p.value.numel());
    } else {
      raw = reinterpret_cast<const char*>(p.value.data<double>());
      len = sizeof(double) * static_cast<size_t>(p.value.numel());
    }
    out.insert(out.end(), raw, raw + len);
  }
  return out;
}

}  // namespace

TEST_CASE("cmcrl_loss: paired two-row batch is exactly zero") {
  Rng rng(11);
  for (Dtype dt : {Dtype::F32, Dtype::F64}) {
    auto z = random_unit_rows(2, 5, rng);
    Tensor zt = rows_to_tensor(z, dt);
    Tensor loss = cmcrl_loss(zt, {3, 3}, 0.1);
    CHECK(loss_value(loss) == 0.0);
  }
}

TEST_CASE("cmcrl_loss: identical rows with two classes give 4 log 3") {
  std::vector<std::vector<double>> z(4, std::vector<double>{1.0, 0.0, 0.0});
  Tensor zt = rows_to_tensor(z);
  const double got = loss_value(cmcrl_loss(zt, {0, 1, 0, 1}, 0.1));
  CHECK(std::abs(got - loss_oracle(z, {0, 1, 0, 1}, 0.1)) < 1e-9);
  CHECK(std::abs(got - 4.0 * std::log(3.0)) < 1e-9);
}

TEST_CASE("cmcrl_loss: constant similarity hits 2N log(2N-1)") {
  // Orthonormal rows: every off-diagonal similarity is the same constant 0.
  const int64_t n = 8;
  std::vector<std::vector<double>> z(n, std::vector<double>(n, 0.0));
  for (int64_t i = 0; i < n; ++i) z[static_cast<size_t>(i)][static_cast<size_t>(i)] = 1.0;
  std::vector<int64_t> labels{0, 1, 2, 3, 0, 1, 2, 3};
  const double got = loss_value(cmcrl_loss(rows_to_tensor(z), labels, 0.25));
  CHECK(std::abs(got - 8.0 * std::log(7.0)) < 1e-6);
  CHECK(std::abs(got - loss_oracle(z, labels, 0.25)) < 1e-9);
}

TEST_CASE("cmcrl_loss: stabilized path matches the naive oracle on random batches") {
  Rng rng(29);
  for (int trial = 0; trial < 6; ++trial) {
    const int64_t pairs = 2 + rng.uniform_int(1, 4);  // N in [3,6]
    std::vector<int64_t> labels;
    for (int64_t i = 0; i < pairs; ++i) labels.push_back(rng.uniform_int(0, 2));
    // Pair layout: audio rows then image rows share labels, so every class
    // present appears at least twice.
    std::vector<int64_t> both = labels;
    both.insert(both.end(), labels.begin(), labels.end());
    auto z = random_unit_rows(2 * pairs, 6, rng);
    const double tau = 0.05 + 0.2 * rng.uniform(0.0, 1.0);
    const double want = loss_oracle(z, both, tau);
    const double got = loss_value(cmcrl_loss(rows_to_tensor(z), both, tau));
    CHECK(std::abs(got - want) < 1e-6 * std::max(1.0, std::abs(want)));
  }
}

TEST_CASE("cmcrl_loss: invariant under simultaneous row/label permutation") {
  Rng rng(31);
  auto z = random_unit_rows(10, 7, rng);
  std::vector<int64_t> labels{0, 0, 1, 1, 2, 2, 2, 1, 0, 2};
  const double base = loss_value(cmcrl_loss(rows_to_tensor(z), labels, 0.1));
  std::vector<size_t> perm(z.size());
  std::iota(perm.begin(), perm.end(), size_t{0});
  for (int trial = 0; trial < 4; ++trial) {
    std::vector<int64_t> pi(perm.begin(), perm.end());
    rng.shuffle(pi);
    std::vector<std::vector<double>> zp(z.size());
    std::vector<int64_t> lp(labels.size());
    for (size_t i = 0; i < z.size(); ++i) {
      zp[i] = z[static_cast<size_t>(pi[i])];
      lp[i] = labels[static_cast<size_t>(pi[i])];
    }
    const double got = loss_value(cmcrl_loss(rows_to_tensor(zp), lp, 0.1));
    CHECK(std::abs(got - base) < 1e-6);
  }
}

TEST_CASE("cmcrl_loss: invariant under orthogonal rotation of the embedding space") {
  Rng rng(37);
  auto z = random_unit_rows(8, 6, rng);
  std::vector<int64_t> labels{0, 1, 2, 3, 0, 1, 2, 3};
  const double base = loss_value(cmcrl_loss(rows_to_tensor(z), labels, 0.1));
  for (int trial = 0; trial < 3; ++trial) {
    auto zr = z;
    rotate_rows(zr, rng, 40);
    const double got = loss_value(cmcrl_loss(rows_to_tensor(zr), labels, 0.1));
    CHECK(std::abs(got - base) < 1e-6);
  }
}

TEST_CASE("cmcrl_loss: gradient matches finite differences") {
  Rng rng(41);
  auto z = random_unit_rows(8, 5, rng);
  Tensor zt = rows_to_tensor(z);
  zt.set_requires_grad(true);
  std::vector<int64_t> labels{0, 1, 0, 2, 1, 2, 0, 1};
  GradcheckOptions opt;
  auto report = gradcheck([&] { return cmcrl_loss(zt, labels, 0.1); }, {zt}, opt);
  CHECK(report.max_rel_err <= 1e-4);
  CHECK(report.compared == 40);
}

TEST_CASE("cmcrl_loss: contract violations") {
  Rng rng(43);
  auto z = random_unit_rows(4, 3, rng);
  Tensor zt = rows_to_tensor(z);
  // Class 5 appears once: the error must name it.
  try {
    cmcrl_loss(zt, {0, 0, 1, 1}, -0.5);
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    CHECK(std::string(e.what()).find("temperature") != std::string::npos);
  }
  try {
    cmcrl_loss(zt, {0, 0, 5, 0}, 0.1);
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("5") != std::string::npos);
    CHECK(std::string(e.what()).find("positive") != std::string::npos);
  }
  CHECK_THROWS_AS(cmcrl_loss(zt, {0, 0, 1}, 0.1), DimensionError);
  CHECK_THROWS_AS(cmcrl_loss(rows_to_tensor(random_unit_rows(1, 3, rng)), {0}, 0.1),
                  ContractError);
  CHECK_THROWS_AS(cmcrl_loss(Tensor::zeros({4}), {0, 0, 1, 1}, 0.1), DimensionError);
}

TEST_CASE("make_batch: deterministic, aligned, and positive-complete") {
  auto pairs = make_test_dataset(3, 3, 101);
  std::vector<int64_t> idx{0, 3, 6, 1, 4};
  audio::FeatureStats stats = estimate_feature_stats(pairs);
  BatchInputs a = make_batch(pairs, idx, 16, stats, 777);
  BatchInputs b = make_batch(pairs, idx, 16, stats, 777);

  CHECK(a.audio.shape() == Shape{5, 3, 128, 44});
  CHECK(a.image.shape() == Shape{5, 3, 16, 16});
  REQUIRE(a.labels.size() == 10);
  // Audio row l and image row N+l carry the same label.
  for (size_t l = 0; l < 5; ++l) CHECK(a.labels[l] == a.labels[5 + l]);
  // Paired construction: every label present in the 2N rows appears >= 2x.
  for (int64_t y : a.labels) {
    CHECK(std::count(a.labels.begin(), a.labels.end(), y) >= 2);
  }
  // Bitwise reproducible under the same batch seed.
  CHECK(std::memcmp(a.audio.data<float>(), b.audio.data<float>(),
                    sizeof(float) * static_cast<size_t>(a.audio.numel())) == 0);
  CHECK(std::memcmp(a.image.data<float>(), b.image.data<float>(),
                    sizeof(float) * static_cast<size_t>(a.image.numel())) == 0);
  // A different seed draws different augmentations.
  BatchInputs c = make_batch(pairs, idx, 16, stats, 778);
  CHECK(std::memcmp(a.audio.data<float>(), c.audio.data<float>(),
                    sizeof(float) * static_cast<size_t>(a.audio.numel())) != 0);
  // Images live in [-1, 1].
  const float* iv = a.image.data<float>();
  for (int64_t i = 0; i < a.image.numel(); ++i) {
    CHECK(iv[i] >= -1.0f);
    CHECK(iv[i] <= 1.0f);
  }
  CHECK_THROWS_AS(make_batch(pairs, {0, 99}, 16, stats, 1), ContractError);
  CHECK_THROWS_AS(make_batch(pairs, {}, 16, stats, 1), ContractError);
}

TEST_CASE("eval batches skip augmentation and match featurize directly") {
  auto pairs = make_test_dataset(2, 2, 103);
  audio::FeatureStats stats = estimate_feature_stats(pairs);
  Tensor batch = audio_eval_batch(pairs, {2, 0}, stats);
  Tensor direct = audio::featurize(pairs[2].clip, &stats);
  CHECK(std::memcmp(batch.data<float>(), direct.data<float>(),
                    sizeof(float) * static_cast<size_t>(direct.numel())) == 0);

  Tensor imgs = image_eval_batch(pairs, {1}, 24);
  CHECK(imgs.shape() == Shape{1, 3, 24, 24});
  Image resized = resize(pairs[1].image, 24, 24);
  const float* got = imgs.data<float>();
  for (size_t i = 0; i < resized.data.size(); ++i) {
    CHECK(got[i] == doctest::Approx(resized.data[i] * 2.0f - 1.0f).epsilon(1e-7));
  }
}

TEST_CASE("estimate_feature_stats standardizes the estimation set") {
  auto pairs = make_test_dataset(2, 4, 107);
  audio::FeatureStats stats = estimate_feature_stats(pairs);
  for (size_t c = 0; c < 3; ++c) CHECK(stats.stddev[c] > 0.0);

  // Re-featurizing with the estimated stats must leave each channel with
  // mean ~0 and stddev ~1 over the same set.
  std::array<double, 3> sum{}, sumsq{};
  const int64_t plane = audio::kMels * audio::kFrames;
  for (const LabeledPair& p : pairs) {
    Tensor feat = audio::featurize(p.clip, &stats);
    const float* v = feat.data<float>();
    for (int64_t c = 0; c < 3; ++c) {
      for (int64_t i = 0; i < plane; ++i) {
        const double x = v[c * plane + i];
        sum[static_cast<size_t>(c)] += x;
        sumsq[static_cast<size_t>(c)] += x * x;
      }
    }
  }
  const double count = static_cast<double>(pairs.size()) * static_cast<double>(plane);
  for (size_t c = 0; c < 3; ++c) {
    const double mean = sum[c] / count;
    const double var = sumsq[c] / count - mean * mean;
    CHECK(std::abs(mean) < 5e-2);
    CHECK(std::abs(std::sqrt(std::max(var, 0.0)) - 1.0) < 5e-2);
  }
}

TEST_CASE("embed_audio/embed_image: unit rows, purity, contracts") {
  Rng rng(211);
  Encoder enc;
  enc.init(16, rng, Dtype::F32);
  ProjectionHead head;
  head.init(16, 8, rng, Dtype::F32);

  Tensor feats = Tensor::normal({3, 3, 128, 44}, 0.0, 1.0, rng);
  Tensor z = embed_audio(enc, head, feats, false);
  CHECK(z.shape() == Shape{3, 8});
  const float* zv = z.data<float>();
  for (int64_t r = 0; r < 3; ++r) {
    double norm2 = 0.0;
    for (int64_t c = 0; c < 8; ++c) norm2 += static_cast<double>(zv[r * 8 + c]) * zv[r * 8 + c];
    CHECK(std::abs(std::sqrt(norm2) - 1.0) < 1e-6);
  }
  // Purity: the same input twice gives bitwise equal rows.
  Tensor z2 = embed_audio(enc, head, feats, false);
  CHECK(std::memcmp(zv, z2.data<float>(), sizeof(float) * 24) == 0);

  Tensor imgs = Tensor::normal({2, 3, 16, 16}, 0.0, 1.0, rng);
  Tensor zi = embed_image(enc, head, imgs, false);
  const float* ziv = zi.data<float>();
  for (int64_t r = 0; r < 2; ++r) {
    double norm2 = 0.0;
    for (int64_t c = 0; c < 8; ++c) norm2 += static_cast<double>(ziv[r * 8 + c]) * ziv[r * 8 + c];
    CHECK(std::abs(std::sqrt(norm2) - 1.0) < 1e-6);
  }

  CHECK_THROWS_AS(embed_audio(enc, head, Tensor::zeros({2, 3, 64, 44}), false), DimensionError);
  CHECK_THROWS_AS(embed_audio(enc, head, Tensor::zeros({3, 128, 44}), false), DimensionError);
  CHECK_THROWS_AS(embed_image(enc, head, Tensor::zeros({2, 3, 16, 12}), false), DimensionError);
  CHECK_THROWS_AS(embed_image(enc, head, Tensor::zeros({2, 1, 16, 16}), false), DimensionError);
}

TEST_CASE("composite gradcheck: loss through both towers") {
  Rng rng(223);
  CmcrlModel model;
  model.init(8, 4, rng, Dtype::F64);
  Tensor feats = Tensor::normal({3, 3, 128, 44}, 0.0, 0.5, rng, Dtype::F64, true);
  Tensor imgs = Tensor::normal({3, 3, 20, 20}, 0.0, 0.5, rng, Dtype::F64, true);
  std::vector<int64_t> labels{0, 1, 1, 0, 1, 1};

  auto f = [&] {
    Tensor za = embed_audio(model.enc_audio, model.head_audio, feats, true);
    Tensor zv = embed_image(model.enc_image, model.head_image, imgs, true);
    return cmcrl_loss(concat_rows(za, zv), labels, 0.5);
  };
  // Representative parameters from every depth of both towers plus the raw
  // inputs; the acceptance gate sweeps the full parameter list.
  std::vector<Tensor> params{feats,
                             imgs,
                             model.enc_audio.stem.w,
                             model.enc_audio.blocks[1].conv1.w,
                             model.enc_audio.blocks[7].conv2.w,
                             model.enc_audio.blocks[7].bn2.gamma,
                             model.enc_image.stem.w,
                             model.enc_image.blocks[4].conv1.w,
                             model.head_audio.fc2.w,
                             model.head_image.fc1.b};
  GradcheckOptions opt;
  // f64 central-difference sweet spot: batch-norm curvature dominates above,
  // cancellation noise below.
  opt.eps = 1e-5;
  opt.max_coords_per_param = 4;
  auto report = gradcheck(f, params, opt);
  CHECK(report.max_rel_err <= 1e-4);
  CHECK(report.compared > 0);
}

TEST_CASE("CmcrlModel: parameter names and towers are disjoint") {
  Rng rng(227);
  CmcrlModel model;
  model.init(16, 8, rng, Dtype::F32);
  nn::ParamList state = model.state();

  std::vector<std::string> names;
  for (const auto& p : state.params) names.push_back(p.name);
  for (const auto& b : state.buffers) names.push_back(b.name);
  std::sort(names.begin(), names.end());
  CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());

  // Scribbling over every audio-tower parameter leaves the image tower
  // byte-identical.
  nn::ParamList image_side;
  model.enc_image.collect(image_side, "enc_v");
  model.head_image.collect(image_side, "head_v");
  const std::vector<char> before = param_bytes(image_side);
  nn::ParamList audio_side;
  model.enc_audio.collect(audio_side, "enc_a");
  model.head_audio.collect(audio_side, "head_a");
  for (NamedParam& p : audio_side.params) {
    float* v = p.value.data<float>();
    for (int64_t i = 0; i < p.value.numel(); ++i) v[i] = -7.25f;
  }
  CHECK(param_bytes(image_side) == before);
}

TEST_CASE("probe_on_features: separable features reach accuracy 1") {
  Rng rng(229);
  const int64_t k = 3, d = 6;
  auto build = [&](int64_t n, std::vector<int64_t>& labels) {
    Tensor x = Tensor::normal({n, d}, 0.0, 0.1, rng);
    float* v = x.data<float>();
    labels.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      const int64_t y = i % k;
      labels[static_cast<size_t>(i)] = y;
      // Labels are a function of coordinate 0 alone; widely separated.
      v[i * d] = static_cast<float>(y * 4.0 - 4.0 + rng.uniform(-0.5, 0.5));
    }
    return x;
  };
  std::vector<int64_t> train_y, test_y;
  Tensor train_x = build(60, train_y);
  Tensor test_x = build(30, test_y);
  ProbeResult res = probe_on_features(train_x, train_y, test_x, test_y, k, 5);
  CHECK(res.train_accuracy == 1.0);
  CHECK(res.test_accuracy == 1.0);
}

TEST_CASE("probe_on_features: random labels score near chance") {
  Rng rng(233);
  const int64_t k = 4, d = 12;
  Tensor train_x = Tensor::normal({80, d}, 0.0, 1.0, rng);
  Tensor test_x = Tensor::normal({240, d}, 0.0, 1.0, rng);
  std::vector<int64_t> train_y(80), test_y(240);
  for (auto& y : train_y) y = rng.uniform_int(0, k - 1);
  for (auto& y : test_y) y = rng.uniform_int(0, k - 1);
  ProbeResult res = probe_on_features(train_x, train_y, test_x, test_y, k, 5);
  CHECK(res.test_accuracy > 0.25 - 0.15);
  CHECK(res.test_accuracy < 0.25 + 0.15);
  CHECK(res.train_accuracy >= 0.0);
  CHECK(res.train_accuracy <= 1.0);
}

TEST_CASE("probe_on_features: contracts") {
  Tensor x = Tensor::zeros({4, 3});
  CHECK_THROWS_AS(probe_on_features(x, {0, 1, 0, 1}, Tensor::zeros({2, 5}), {0, 1}, 2, 1),
                  DimensionError);
  CHECK_THROWS_AS(probe_on_features(x, {0, 1, 0}, x, {0, 1, 0, 1}, 2, 1), DimensionError);
  CHECK_THROWS_AS(probe_on_features(x, {0, 1, 0, 2}, x, {0, 1, 0, 1}, 2, 1), ContractError);
  CHECK_THROWS_AS(probe_on_features(x, {0, 1, 0, 1}, x, {0, 1, 0, 1}, 1, 1), ContractError);
}

TEST_CASE("linear_probe: frozen encoder stays bitwise untouched") {
  Rng rng(239);
  Encoder enc;
  enc.init(8, rng, Dtype::F32);
  auto train_pairs = make_test_dataset(2, 3, 241);
  auto test_pairs = make_test_dataset(2, 2, 242);
  audio::FeatureStats stats = estimate_feature_stats(train_pairs);

  nn::ParamList state;
  enc.collect(state, "enc");
  const std::vector<char> before = param_bytes(state);
  ProbeResult res =
      linear_probe(enc, train_pairs, test_pairs, Modality::kAudio, stats, 16, 2, 7);
  CHECK(param_bytes(state) == before);
  CHECK(res.train_accuracy >= 0.0);
  CHECK(res.train_accuracy <= 1.0);
  CHECK(res.test_accuracy >= 0.0);
  CHECK(res.test_accuracy <= 1.0);

  ProbeResult res_img =
      linear_probe(enc, train_pairs, test_pairs, Modality::kImage, stats, 16, 2, 7);
  CHECK(param_bytes(state) == before);
  CHECK(res_img.test_accuracy >= 0.0);
  CHECK(res_img.test_accuracy <= 1.0);
}

namespace {

ContrastiveConfig tiny_cmcrl_config(uint64_t seed) {
  ContrastiveConfig cfg;
  cfg.d_e = 8;
  cfg.d_p = 4;
  cfg.batch_pairs = 4;
  cfg.epochs = 2;
  cfg.lr = 0.02;
  cfg.lr_milestones = {100};
  cfg.image_size = 16;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("train_cmcrl: deterministic curves and identical checkpoints") {
  auto pairs = make_test_dataset(2, 4, 251);
  auto dir_a = fresh_dir("cmcrl_train_a");
  auto dir_b = fresh_dir("cmcrl_train_b");
  ContrastiveConfig cfg = tiny_cmcrl_config(97);

  CmcrlModel ma, mb;
  TrainCurve ca = train_cmcrl(cfg, pairs, dir_a.string(), ma);
  TrainCurve cb = train_cmcrl(cfg, pairs, dir_b.string(), mb);
  REQUIRE(ca.losses.size() == 2);
  CHECK(ca.losses == cb.losses);
  CHECK(ca.lrs == cb.lrs);
  for (double l : ca.losses) CHECK(std::isfinite(l));
  CHECK(slurp(dir_a / "cmcrl.ckpt") == slurp(dir_b / "cmcrl.ckpt"));
  CHECK(slurp(dir_a / "cmcrl_log.csv") == slurp(dir_b / "cmcrl_log.csv"));
}

TEST_CASE("train_cmcrl: zero learning rate leaves parameters bit-identical") {
  auto pairs = make_test_dataset(2, 4, 257);
  auto dir_init = fresh_dir("cmcrl_train_lr0_init");
  auto dir_run = fresh_dir("cmcrl_train_lr0_run");

  ContrastiveConfig cfg = tiny_cmcrl_config(131);
  cfg.epochs = 0;
  CmcrlModel init_model;
  train_cmcrl(cfg, pairs, dir_init.string(), init_model);

  cfg.epochs = 2;
  cfg.lr = 0.0;
  CmcrlModel run_model;
  train_cmcrl(cfg, pairs, dir_run.string(), run_model);

  Checkpoint a = checkpoint_load((dir_init / "cmcrl.ckpt").string());
  Checkpoint b = checkpoint_load((dir_run / "cmcrl.ckpt").string());
  CmcrlModel shape_model;
  Rng rng(1);
  shape_model.init(cfg.d_e, cfg.d_p, rng, Dtype::F32);
  for (const NamedParam& p : shape_model.state().params) {
    const Tensor& ta = a.require(p.name);
    const Tensor& tb = b.require(p.name);
    CHECK(std::memcmp(ta.data<float>(), tb.data<float>(),
                      sizeof(float) * static_cast<size_t>(ta.numel())) == 0);
  }
}

TEST_CASE("train_cmcrl: resume reproduces the uninterrupted run exactly") {
  auto pairs = make_test_dataset(2, 4, 263);
  auto dir_full = fresh_dir("cmcrl_resume_full");
  auto dir_part = fresh_dir("cmcrl_resume_part");

  ContrastiveConfig cfg = tiny_cmcrl_config(163);
  cfg.epochs = 4;
  CmcrlModel full_model;
  TrainCurve full = train_cmcrl(cfg, pairs, dir_full.string(), full_model);

  cfg.epochs = 2;
  CmcrlModel part_model;
  TrainCurve part = train_cmcrl(cfg, pairs, dir_part.string(), part_model);
  cfg.epochs = 4;
  CmcrlModel resumed_model;
  TrainCurve rest = train_cmcrl(cfg, pairs, dir_part.string(), resumed_model,
                                (dir_part / "cmcrl.ckpt").string());

  std::vector<double> stitched = part.losses;
  stitched.insert(stitched.end(), rest.losses.begin(), rest.losses.end());
  CHECK(stitched == full.losses);
  CHECK(rest.epochs == std::vector<int64_t>{2, 3});
  // The resumed final checkpoint equals the uninterrupted one byte for byte.
  CHECK(slurp(dir_full / "cmcrl.ckpt") == slurp(dir_part / "cmcrl.ckpt"));

  // Resuming under a different trajectory-shaping config is refused.
  ContrastiveConfig other = cfg;
  other.temperature = 0.2;
  CmcrlModel reject;
  CHECK_THROWS_AS(
      train_cmcrl(other, pairs, dir_part.string(), reject, (dir_part / "cmcrl.ckpt").string()),
      ConfigError);
}

TEST_CASE("train_cmcrl: loss decreases on the synthetic toy set") {
  auto pairs = make_test_dataset(2, 4, 269);
  auto dir = fresh_dir("cmcrl_train_decrease");
  ContrastiveConfig cfg = tiny_cmcrl_config(7);
  cfg.epochs = 6;
  cfg.lr = 0.05;
  CmcrlModel model;
  TrainCurve curve = train_cmcrl(cfg, pairs, dir.string(), model);
  REQUIRE(curve.losses.size() == 6);
  CHECK(curve.losses.back() < curve.losses.front());
}

TEST_CASE("train_cmcrl: contracts") {
  auto pairs = make_test_dataset(1, 4, 271);  // single class
  auto dir = fresh_dir("cmcrl_train_contract");
  ContrastiveConfig cfg = tiny_cmcrl_config(1);
  CmcrlModel model;
  CHECK_THROWS_AS(train_cmcrl(cfg, pairs, dir.string(), model), ContractError);

  auto two = make_test_dataset(2, 1, 272);  // 2 pairs < batch
  CHECK_THROWS_AS(train_cmcrl(cfg, two, dir.string(), model), ConfigError);
}

TEST_CASE("load_cmcrl_checkpoint restores a forward-identical model") {
  auto pairs = make_test_dataset(2, 4, 277);
  auto dir = fresh_dir("cmcrl_ckpt_roundtrip");
  ContrastiveConfig cfg = tiny_cmcrl_config(53);
  CmcrlModel trained;
  train_cmcrl(cfg, pairs, dir.string(), trained);

  CmcrlModel loaded;
  load_cmcrl_checkpoint((dir / "cmcrl.ckpt").string(), loaded);
  CHECK(loaded.stats.mean == trained.stats.mean);
  CHECK(loaded.stats.stddev == trained.stats.stddev);

  Tensor feats = audio_eval_batch(pairs, {0, 5}, trained.stats);
  NoGradGuard guard;
  Tensor za = embed_audio(trained.enc_audio, trained.head_audio, feats, false);
  Tensor zb = embed_audio(loaded.enc_audio, loaded.head_audio, feats, false);
  CHECK(std::memcmp(za.data<float>(), zb.data<float>(),
                    sizeof(float) * static_cast<size_t>(za.numel())) == 0);

  CmcrlModel wrong;
  CHECK_THROWS_AS(load_cmcrl_checkpoint((dir / "missing.ckpt").string(), wrong), IoError);
}

TEST_CASE("train_classification_baseline: deterministic and above chance") {
  auto pairs = make_test_dataset(2, 4, 281);
  auto dir_a = fresh_dir("baseline_a");
  auto dir_b = fresh_dir("baseline_b");
  ContrastiveConfig cfg = tiny_cmcrl_config(19);
  cfg.epochs = 12;
  cfg.lr = 0.05;

  BaselineModel ma, mb;
  TrainCurve ca = train_classification_baseline(cfg, pairs, 2, dir_a.string(), ma);
  TrainCurve cb = train_classification_baseline(cfg, pairs, 2, dir_b.string(), mb);
  CHECK(ca.losses == cb.losses);
  CHECK(slurp(dir_a / "baseline.ckpt") == slurp(dir_b / "baseline.ckpt"));

  // Joint training pushes train accuracy above 1/K chance.
  NoGradGuard guard;
  std::vector<int64_t> idx(pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  Tensor logits = ma.classifier.forward(
      ma.enc.forward(audio_eval_batch(pairs, idx, ma.stats), false));
  int64_t hits = 0;
  const float* lv = logits.data<float>();
  for (size_t i = 0; i < pairs.size(); ++i) {
    const int64_t best = lv[i * 2] > lv[i * 2 + 1] ? 0 : 1;
    if (best == pairs[i].label) ++hits;
  }
  CHECK(static_cast<double>(hits) / static_cast<double>(pairs.size()) > 0.5);

  BaselineModel loaded;
  load_baseline_checkpoint((dir_a / "baseline.ckpt").string(), loaded);
  Tensor logits2 = loaded.classifier.forward(
      loaded.enc.forward(audio_eval_batch(pairs, idx, loaded.stats), false));
  CHECK(std::memcmp(logits.data<float>(), logits2.data<float>(),
                    sizeof(float) * static_cast<size_t>(logits.numel())) == 0);
}

TEST_CASE("uniform logits cross-entropy equals ln K") {
  Tensor logits = Tensor::zeros({6, 5});
  Tensor ce = cross_entropy_with_logits(logits, {0, 1, 2, 3, 4, 0});
  CHECK(std::abs(loss_value(ce) - std::log(5.0)) < 1e-6);
}
