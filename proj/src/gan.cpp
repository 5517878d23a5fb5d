#include "cmcrl/gan.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace cmcrl {

namespace {

// Stream tags for Rng::derive, disjoint from the contrastive trainer's so a
// shared base seed never correlates the two stages. Batch randomness depends
// only on (seed, iteration), never on call history, which is what makes a
// resumed run the exact continuation of the original.
constexpr uint64_t kGanInitStream = 11;
constexpr uint64_t kGanRealStream = 12;
constexpr uint64_t kGanNoiseStream = 13;
constexpr uint64_t kGanCondStream = 14;
constexpr uint64_t kGanProbeStream = 15;

double scalar_value(const Tensor& t) {
  double out = 0.0;
  dispatch(t.dtype(), [&](auto tag) { out = static_cast<double>(t.data<decltype(tag)>()[0]); });
  return out;
}

bool power_of_two(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

void check_gan_geometry(int64_t image_size, int64_t width, const char* who) {
  if (!power_of_two(image_size) || image_size < 32) {
    throw ContractError(std::string(who) + ": image size must be a power of two >= 32, got " +
                        std::to_string(image_size));
  }
  if (width < 8 || width % 8 != 0) {
    throw ContractError(std::string(who) + ": channel width must be a positive multiple of 8, " +
                        "got " + std::to_string(width));
  }
}

int64_t log2_exact(int64_t v) {
  int64_t out = 0;
  while ((int64_t{1} << out) < v) ++out;
  return out;
}

uint64_t fnv1a(const void* data, size_t size, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

// Gathers rows of a (n, row_len...) f32 tensor into a fresh (B, row_len...)
// tensor; `indices` are trusted (drawn internally).
Tensor gather_cache_rows(const Tensor& cache, const std::vector<int64_t>& indices) {
  Shape shape = cache.shape();
  shape[0] = static_cast<int64_t>(indices.size());
  Tensor out = Tensor::zeros(shape);
  const int64_t row = cache.numel() / cache.dim(0);
  const float* src = cache.data<float>();
  float* dst = out.data<float>();
  for (size_t i = 0; i < indices.size(); ++i) {
    std::memcpy(dst + static_cast<int64_t>(i) * row, src + indices[i] * row,
                sizeof(float) * static_cast<size_t>(row));
  }
  return out;
}

Tensor draw_noise(int64_t batch, int64_t z_dim, uint64_t stream_seed) {
  Tensor z = Tensor::zeros({batch, z_dim});
  float* v = z.data<float>();
  Rng rng(stream_seed);
  for (int64_t i = 0; i < batch * z_dim; ++i) v[i] = static_cast<float>(rng.normal());
  return z;
}

std::vector<int64_t> draw_indices(int64_t count, int64_t upper, uint64_t stream_seed) {
  std::vector<int64_t> out(static_cast<size_t>(count));
  Rng rng(stream_seed);
  for (int64_t i = 0; i < count; ++i) {
    out[static_cast<size_t>(i)] = rng.uniform_int(0, upper - 1);
  }
  return out;
}

void append_sigmas(const nn::SNLinear& l, std::vector<double>& out) {
  out.push_back(l.sn.last_sigma);
}
void append_sigmas(const nn::SNConv2d& c, std::vector<double>& out) {
  out.push_back(c.sn.last_sigma);
}
void append_sigmas(const nn::SelfAttention& a, std::vector<double>& out) {
  append_sigmas(a.f, out);
  append_sigmas(a.g, out);
  append_sigmas(a.h, out);
  append_sigmas(a.o, out);
}

void summarize(const std::vector<double>& sigmas, double& mean, double& max) {
  mean = 0.0;
  max = 0.0;
  for (double s : sigmas) {
    mean += s;
    max = std::max(max, s);
  }
  if (!sigmas.empty()) mean /= static_cast<double>(sigmas.size());
}

void csv_line(std::ofstream& out, int64_t iter, double l_d, double l_g,
              const std::vector<double>& sig_g, const std::vector<double>& sig_d) {
  double gm, gx, dm, dx;
  summarize(sig_g, gm, gx);
  summarize(sig_d, dm, dx);
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                static_cast<long long>(iter), l_d, l_g, gm, gx, dm, dx);
  out << buf;
}

nlohmann::json config_echo(const GanConfig& cfg) {
  return nlohmann::json{{"z_dim", cfg.z_dim},   {"image_size", cfg.image_size},
                        {"g_width", cfg.g_width}, {"d_width", cfg.d_width},
                        {"batch", cfg.batch},   {"iters", cfg.iters},
                        {"lr_g", cfg.lr_g},     {"lr_d", cfg.lr_d},
                        {"beta1", cfg.beta1},   {"beta2", cfg.beta2},
                        {"seed", cfg.seed}};
}

void check_resume_config(const nlohmann::json& saved, const GanConfig& cfg) {
  const nlohmann::json now = config_echo(cfg);
  // iters may grow (training extension); everything else shapes the trajectory.
  for (const char* key : {"z_dim", "image_size", "g_width", "d_width", "batch", "lr_g", "lr_d",
                          "beta1", "beta2", "seed"}) {
    if (!saved.contains(key) || saved.at(key) != now.at(key)) {
      throw ConfigError(std::string("resume config mismatch on \"") + key + "\": checkpoint " +
                        (saved.contains(key) ? saved.at(key).dump() : "<missing>") + ", run " +
                        now.at(key).dump());
    }
  }
}

void save_moments(Checkpoint& ckpt, const nn::ParamList& state, AdamOptimizer& opt,
                  const std::string& prefix) {
  auto& m = opt.first_moments();
  auto& v = opt.second_moments();
  for (size_t i = 0; i < state.params.size(); ++i) {
    ckpt.tensors[prefix + ".m." + state.params[i].name] = m[i].clone();
    ckpt.tensors[prefix + ".v." + state.params[i].name] = v[i].clone();
  }
}

void load_moments(const Checkpoint& ckpt, const nn::ParamList& state, AdamOptimizer& opt,
                  const std::string& prefix) {
  auto& m = opt.first_moments();
  auto& v = opt.second_moments();
  for (size_t i = 0; i < state.params.size(); ++i) {
    const std::string mn = prefix + ".m." + state.params[i].name;
    const std::string vn = prefix + ".v." + state.params[i].name;
    nn::copy_values(m[i], ckpt.require(mn), mn);
    nn::copy_values(v[i], ckpt.require(vn), vn);
  }
}

void save_gan_checkpoint(const std::string& path, GanModel& model, AdamOptimizer& opt_g,
                         AdamOptimizer& opt_d, int64_t iters_done, const GanConfig& cfg,
                         uint64_t cond_checksum, int64_t cond_dim) {
  Checkpoint ckpt;
  ckpt.metadata["stage"] = "gan";
  ckpt.metadata["iters_done"] = iters_done;
  ckpt.metadata["dtype"] = "f32";
  ckpt.metadata["config"] = config_echo(cfg);
  ckpt.metadata["cond_dim"] = cond_dim;
  ckpt.metadata["cond_checksum"] = cond_checksum;
  nn::ParamList gen_state, dis_state;
  model.gen.collect(gen_state, "gen");
  model.dis.collect(dis_state, "dis");
  nn::state_save(gen_state, ckpt);
  nn::state_save(dis_state, ckpt);
  save_moments(ckpt, gen_state, opt_g, "opt_g");
  save_moments(ckpt, dis_state, opt_d, "opt_d");
  checkpoint_save(ckpt, path);
}

// One condition row per distinct class (first occurrence, ascending label)
// for the monitoring grid.
std::vector<int64_t> class_representatives(const std::vector<LabeledPair>& pairs) {
  std::map<int, int64_t> first;
  for (size_t i = 0; i < pairs.size(); ++i) {
    first.emplace(pairs[i].label, static_cast<int64_t>(i));
  }
  std::vector<int64_t> out;
  for (const auto& [label, idx] : first) out.push_back(idx);
  return out;
}

void write_sample_grid(const std::string& path, Generator& gen, const Tensor& grid_z,
                       const Tensor& grid_c, int64_t rows, int64_t cols) {
  NoGradGuard guard;
  const int64_t s = gen.image_size;
  Tensor imgs = gen.forward(grid_z, grid_c, /*training=*/false, /*update_sn=*/false);
  Image grid = make_image(rows * s, cols * s);
  const float* v = imgs.data<float>();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t col = 0; col < cols; ++col) {
      const float* img = v + ((r * cols + col) * 3 * s * s);
      for (int64_t c = 0; c < 3; ++c) {
        for (int64_t y = 0; y < s; ++y) {
          for (int64_t x = 0; x < s; ++x) {
            const float px = (img[(c * s + y) * s + x] + 1.0f) * 0.5f;
            grid.at(c, r * s + y, col * s + x) = std::clamp(px, 0.0f, 1.0f);
          }
        }
      }
    }
  }
  ppm_write(grid, path);
}

}  // namespace

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

void GBlock::init(int64_t cin, int64_t cout, Rng& rng, Dtype dt) {
  conv1.init(cin, cout, 3, 1, 1, rng, dt);
  conv2.init(cout, cout, 3, 1, 1, rng, dt);
  skip.init(cin, cout, 1, 1, 0, rng, dt);
  bn1.init(cin, dt);
  bn2.init(cout, dt);
}

Tensor GBlock::forward(const Tensor& x, bool training, bool update_sn) {
  Tensor h = relu(bn1.forward(x, training));
  h = conv1.forward(upsample_nearest2x(h), update_sn);
  h = conv2.forward(relu(bn2.forward(h, training)), update_sn);
  return add(h, skip.forward(upsample_nearest2x(x), update_sn));
}

void GBlock::collect(nn::ParamList& out, const std::string& prefix) {
  bn1.collect(out, prefix + ".bn1");
  conv1.collect(out, prefix + ".conv1");
  bn2.collect(out, prefix + ".bn2");
  conv2.collect(out, prefix + ".conv2");
  skip.collect(out, prefix + ".skip");
}

void DBlock::init(int64_t cin, int64_t cout, bool first_, Rng& rng, Dtype dt) {
  first = first_;
  conv1.init(cin, cout, 3, 1, 1, rng, dt);
  conv2.init(cout, cout, 3, 1, 1, rng, dt);
  skip.init(cin, cout, 1, 1, 0, rng, dt);
}

Tensor DBlock::forward(const Tensor& x, bool update_sn) {
  Tensor h = conv1.forward(first ? x : relu(x), update_sn);
  h = avg_pool2x(conv2.forward(relu(h), update_sn));
  return add(h, skip.forward(avg_pool2x(x), update_sn));
}

void DBlock::collect(nn::ParamList& out, const std::string& prefix) {
  conv1.collect(out, prefix + ".conv1");
  conv2.collect(out, prefix + ".conv2");
  skip.collect(out, prefix + ".skip");
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

void Generator::init(int64_t z_dim_, int64_t cond_dim_, int64_t image_size_, int64_t width_,
                     Rng& rng, Dtype dt) {
  check_gan_geometry(image_size_, width_, "Generator");
  if (z_dim_ < 1 || cond_dim_ < 1) {
    throw ContractError("Generator: z and condition dims must be positive, got " +
                        std::to_string(z_dim_) + " and " + std::to_string(cond_dim_));
  }
  z_dim = z_dim_;
  cond_dim = cond_dim_;
  image_size = image_size_;
  width = width_;

  const int64_t nb = log2_exact(image_size / 4);
  const int64_t fc_mult = int64_t{1} << (nb - 1);
  fc.init(z_dim + cond_dim, fc_mult * width * 4 * 4, rng, dt);
  blocks.assign(static_cast<size_t>(nb), GBlock{});
  int64_t cin = fc_mult * width;
  for (int64_t i = 0; i < nb; ++i) {
    const int64_t cout = width * (int64_t{1} << std::max<int64_t>(nb - 2 - i, 0));
    blocks[static_cast<size_t>(i)].init(cin, cout, rng, dt);
    if (i == 1) attn.init(cout, rng, dt, /*spectral=*/true);
    cin = cout;
  }
  out_bn.init(cin, dt);
  out_conv.init(cin, 3, 3, 1, 1, rng, dt);
}

Tensor Generator::forward(const Tensor& z, const Tensor& c, bool training, bool update_sn) {
  if (z.rank() != 2 || z.dim(1) != z_dim) {
    throw DimensionError("Generator: noise must be (B," + std::to_string(z_dim) + "), got " +
                         shape_str(z.shape()));
  }
  if (c.rank() != 2 || c.dim(1) != cond_dim || c.dim(0) != z.dim(0)) {
    throw DimensionError("Generator: conditions must be (" + std::to_string(z.dim(0)) + "," +
                         std::to_string(cond_dim) + "), got " + shape_str(c.shape()));
  }
  const int64_t nb = static_cast<int64_t>(blocks.size());
  const int64_t fc_mult = int64_t{1} << (nb - 1);
  Tensor h = fc.forward(concat_cols(z, c), update_sn);
  h = reshape(h, {z.dim(0), fc_mult * width, 4, 4});
  for (int64_t i = 0; i < nb; ++i) {
    h = blocks[static_cast<size_t>(i)].forward(h, training, update_sn);
    if (i == 1) h = attn.forward(h, update_sn);
  }
  return tanh(out_conv.forward(relu(out_bn.forward(h, training)), update_sn));
}

void Generator::collect(nn::ParamList& out, const std::string& prefix) {
  fc.collect(out, prefix + ".fc");
  for (size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect(out, prefix + ".block" + std::to_string(i));
  }
  attn.collect(out, prefix + ".attn");
  out_bn.collect(out, prefix + ".out_bn");
  out_conv.collect(out, prefix + ".out_conv");
}

std::vector<double> Generator::sigmas() const {
  std::vector<double> out;
  append_sigmas(fc, out);
  for (const GBlock& b : blocks) {
    append_sigmas(b.conv1, out);
    append_sigmas(b.conv2, out);
    append_sigmas(b.skip, out);
  }
  append_sigmas(attn, out);
  append_sigmas(out_conv, out);
  return out;
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

void Discriminator::init(int64_t cond_dim_, int64_t image_size_, int64_t width_, Rng& rng,
                         Dtype dt) {
  check_gan_geometry(image_size_, width_, "Discriminator");
  if (cond_dim_ < 1) {
    throw ContractError("Discriminator: condition dim must be positive, got " +
                        std::to_string(cond_dim_));
  }
  cond_dim = cond_dim_;
  image_size = image_size_;
  width = width_;

  const int64_t nb = log2_exact(image_size / 4);
  attn_after = nb - 3;  // the block whose output sits at 16x16
  blocks.assign(static_cast<size_t>(nb), DBlock{});
  int64_t cin = 3;
  for (int64_t i = 0; i < nb; ++i) {
    const int64_t cout = width << i;
    blocks[static_cast<size_t>(i)].init(cin, cout, /*first=*/i == 0, rng, dt);
    if (i == attn_after) attn.init(cout, rng, dt, /*spectral=*/true);
    cin = cout;
  }
  feat_dim = cin;
  psi.init(feat_dim, 1, rng, dt, /*with_bias=*/true);
  embed.init(cond_dim, feat_dim, rng, dt, /*with_bias=*/false);
}

Tensor Discriminator::forward(const Tensor& images, const Tensor& c, bool update_sn) {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != image_size ||
      images.dim(3) != image_size) {
    throw DimensionError("Discriminator: images must be (B,3," + std::to_string(image_size) +
                         "," + std::to_string(image_size) + "), got " +
                         shape_str(images.shape()));
  }
  if (c.rank() != 2 || c.dim(1) != cond_dim || c.dim(0) != images.dim(0)) {
    throw DimensionError("Discriminator: conditions must be (" + std::to_string(images.dim(0)) +
                         "," + std::to_string(cond_dim) + "), got " + shape_str(c.shape()));
  }
  Tensor h = images;
  for (int64_t i = 0; i < static_cast<int64_t>(blocks.size()); ++i) {
    h = blocks[static_cast<size_t>(i)].forward(h, update_sn);
    if (i == attn_after) h = attn.forward(h, update_sn);
  }
  Tensor phi = sum_hw(relu(h));
  Tensor score = reshape(psi.forward(phi, update_sn), {images.dim(0)});
  Tensor proj = sum_lastdim(mul(embed.forward(c, update_sn), phi));
  return add(score, proj);
}

void Discriminator::collect(nn::ParamList& out, const std::string& prefix) {
  for (size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect(out, prefix + ".block" + std::to_string(i));
  }
  attn.collect(out, prefix + ".attn");
  psi.collect(out, prefix + ".psi");
  embed.collect(out, prefix + ".embed");
}

std::vector<double> Discriminator::sigmas() const {
  std::vector<double> out;
  for (const DBlock& b : blocks) {
    append_sigmas(b.conv1, out);
    append_sigmas(b.conv2, out);
    append_sigmas(b.skip, out);
  }
  append_sigmas(attn, out);
  append_sigmas(psi, out);
  append_sigmas(embed, out);
  return out;
}

void GanModel::init(const GanConfig& cfg, int64_t cond_dim, Rng& rng, Dtype dt) {
  gen.init(cfg.z_dim, cond_dim, cfg.image_size, cfg.g_width, rng, dt);
  dis.init(cond_dim, cfg.image_size, cfg.d_width, rng, dt);
}

nn::ParamList GanModel::state() {
  nn::ParamList out;
  gen.collect(out, "gen");
  dis.collect(out, "dis");
  return out;
}

// ---------------------------------------------------------------------------
// Losses and conditions
// ---------------------------------------------------------------------------

Tensor hinge_d_loss(const Tensor& real_scores, const Tensor& fake_scores) {
  if (real_scores.numel() < 1 || fake_scores.numel() < 1) {
    throw ContractError("hinge_d_loss: both score batches must be non-empty");
  }
  return add(mean(relu(rsub_scalar(1.0, real_scores))),
             mean(relu(add_scalar(fake_scores, 1.0))));
}

Tensor hinge_g_loss(const Tensor& fake_scores) {
  if (fake_scores.numel() < 1) {
    throw ContractError("hinge_g_loss: score batch must be non-empty");
  }
  return neg(mean(fake_scores));
}

Tensor condition_from_audio(Encoder& enc, const audio::AudioClip& clip,
                            const audio::FeatureStats& stats) {
  NoGradGuard guard;
  Tensor feats = reshape(audio::featurize(clip, &stats), {1, 3, audio::kMels, audio::kFrames});
  return reshape(enc.forward(feats, /*training=*/false), {enc.feature_dim});
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

GanTrainCurve train_gan(const GanConfig& cfg, const std::vector<LabeledPair>& train_pairs,
                        CmcrlModel& cmcrl, const std::string& out_dir, GanModel& model,
                        const std::string& resume_from) {
  if (train_pairs.empty()) throw ContractError("train_gan: empty training set");
  if (cfg.batch < 1) {
    throw ConfigError("train_gan: batch must be >= 1, got " + std::to_string(cfg.batch));
  }
  if (cfg.iters < 1) {
    throw ConfigError("train_gan: iters must be >= 1, got " + std::to_string(cfg.iters));
  }
  if (!(cfg.lr_g >= 0.0) || !(cfg.lr_d >= 0.0)) {
    throw ConfigError("train_gan: learning rates must be non-negative");
  }

  // Real images are resized once to SxS and mapped to [-1,1]; conditions come
  // from the frozen encoder in eval mode, captured as constants so no
  // gradient can ever reach it.
  std::vector<int64_t> all(train_pairs.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int64_t>(i);
  const Tensor reals = image_eval_batch(train_pairs, all, cfg.image_size);
  const Tensor conds = extract_audio_features(cmcrl.enc_audio, train_pairs, cmcrl.stats);
  const int64_t cond_dim = conds.dim(1);
  const uint64_t cond_checksum =
      fnv1a(conds.data<float>(), sizeof(float) * static_cast<size_t>(conds.numel()));
  const int64_t n = static_cast<int64_t>(train_pairs.size());

  Rng init_rng(Rng::derive(cfg.seed, kGanInitStream));
  model.init(cfg, cond_dim, init_rng, Dtype::F32);
  nn::ParamList gen_state, dis_state;
  model.gen.collect(gen_state, "gen");
  model.dis.collect(dis_state, "dis");
  AdamOptimizer opt_g(gen_state.params, cfg.lr_g, cfg.beta1, cfg.beta2);
  AdamOptimizer opt_d(dis_state.params, cfg.lr_d, cfg.beta1, cfg.beta2);

  int64_t start_iter = 0;
  if (!resume_from.empty()) {
    Checkpoint ckpt = checkpoint_load(resume_from);
    const std::string stage = ckpt.metadata.value("stage", "<none>");
    if (stage != "gan") {
      throw ConfigError("checkpoint stage \"" + stage + "\" cannot resume a gan run");
    }
    check_resume_config(ckpt.metadata.at("config"), cfg);
    if (ckpt.metadata.value("cond_checksum", uint64_t{0}) != cond_checksum) {
      throw ConfigError("resume condition mismatch: the frozen encoder or dataset differs from "
                        "the checkpointed run");
    }
    nn::state_load(gen_state, ckpt);
    nn::state_load(dis_state, ckpt);
    load_moments(ckpt, gen_state, opt_g, "opt_g");
    load_moments(ckpt, dis_state, opt_d, "opt_d");
    start_iter = ckpt.metadata.at("iters_done").get<int64_t>();
    opt_g.set_step_count(start_iter);
    opt_d.set_step_count(start_iter);
  }

  // Fixed monitoring probe: one condition per class, four noise rows each.
  const std::vector<int64_t> reps = class_representatives(train_pairs);
  const int64_t grid_rows = 4;
  const int64_t grid_cols = static_cast<int64_t>(reps.size());
  Tensor grid_z = draw_noise(grid_rows * grid_cols, cfg.z_dim,
                             Rng::derive(cfg.seed, kGanProbeStream));
  std::vector<int64_t> grid_idx;
  for (int64_t r = 0; r < grid_rows; ++r) {
    grid_idx.insert(grid_idx.end(), reps.begin(), reps.end());
  }
  Tensor grid_c = gather_cache_rows(conds, grid_idx);

  std::filesystem::create_directories(std::filesystem::path(out_dir) / "samples");
  const std::string ckpt_path = out_dir + "/gan.ckpt";
  std::ofstream log(out_dir + "/gan_log.csv", start_iter == 0 ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot open log file " + out_dir + "/gan_log.csv");
  if (start_iter == 0) {
    log << "iter,loss_d,loss_g,sigma_g_mean,sigma_g_max,sigma_d_mean,sigma_d_max\n";
  }

  GanTrainCurve curve;
  for (int64_t it = start_iter; it < cfg.iters; ++it) {
    // --- Discriminator step: real pass advances D's power iterations. ---
    opt_d.zero_grad();
    opt_g.zero_grad();
    const std::vector<int64_t> real_idx =
        draw_indices(cfg.batch, n, Rng::derive(cfg.seed, kGanRealStream, static_cast<uint64_t>(it)));
    Tensor x_real = gather_cache_rows(reals, real_idx);
    Tensor c_real = gather_cache_rows(conds, real_idx);
    const std::vector<int64_t> fake_idx = draw_indices(
        cfg.batch, n, Rng::derive(cfg.seed, kGanCondStream, static_cast<uint64_t>(it), 0));
    Tensor c_fake = gather_cache_rows(conds, fake_idx);
    Tensor z0 = draw_noise(cfg.batch, cfg.z_dim,
                           Rng::derive(cfg.seed, kGanNoiseStream, static_cast<uint64_t>(it), 0));
    Tensor x_fake;
    {
      NoGradGuard guard;  // fakes are constants for the D update
      x_fake = model.gen.forward(z0, c_fake, /*training=*/true, /*update_sn=*/false);
    }
    Tensor s_real = model.dis.forward(x_real, c_real, /*update_sn=*/true);
    Tensor s_fake = model.dis.forward(x_fake, c_fake, /*update_sn=*/false);
    Tensor loss_d = hinge_d_loss(s_real, s_fake);
    const double l_d = scalar_value(loss_d);
    loss_d.backward();
    opt_d.step();

    // --- Generator step: its forward advances G's power iterations. ---
    opt_g.zero_grad();
    opt_d.zero_grad();
    const std::vector<int64_t> gen_idx = draw_indices(
        cfg.batch, n, Rng::derive(cfg.seed, kGanCondStream, static_cast<uint64_t>(it), 1));
    Tensor c_gen = gather_cache_rows(conds, gen_idx);
    Tensor z1 = draw_noise(cfg.batch, cfg.z_dim,
                           Rng::derive(cfg.seed, kGanNoiseStream, static_cast<uint64_t>(it), 1));
    Tensor x_gen = model.gen.forward(z1, c_gen, /*training=*/true, /*update_sn=*/true);
    Tensor loss_g = hinge_g_loss(model.dis.forward(x_gen, c_gen, /*update_sn=*/false));
    const double l_g = scalar_value(loss_g);
    loss_g.backward();
    opt_g.step();

    if (!std::isfinite(l_d) || !std::isfinite(l_g)) {
      throw NumericalError("train_gan: non-finite loss at iteration " + std::to_string(it) +
                           " (loss_d " + std::to_string(l_d) + ", loss_g " + std::to_string(l_g) +
                           ")");
    }

    curve.iters.push_back(it);
    curve.d_losses.push_back(l_d);
    curve.g_losses.push_back(l_g);
    csv_line(log, it, l_d, l_g, model.gen.sigmas(), model.dis.sigmas());

    const bool last = it + 1 == cfg.iters;
    if (last || (cfg.sample_every > 0 && (it + 1) % cfg.sample_every == 0)) {
      char name[64];
      std::snprintf(name, sizeof(name), "/samples/iter_%06lld.ppm",
                    static_cast<long long>(it + 1));
      write_sample_grid(out_dir + name, model.gen, grid_z, grid_c, grid_rows, grid_cols);
    }
    if (last || (cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0)) {
      save_gan_checkpoint(ckpt_path, model, opt_g, opt_d, it + 1, cfg, cond_checksum, cond_dim);
    }
  }
  if (cfg.iters == start_iter) {
    save_gan_checkpoint(ckpt_path, model, opt_g, opt_d, start_iter, cfg, cond_checksum, cond_dim);
  }
  return curve;
}

void load_gan_checkpoint(const std::string& path, GanModel& model) {
  Checkpoint ckpt = checkpoint_load(path);
  const std::string stage = ckpt.metadata.value("stage", "<none>");
  if (stage != "gan") {
    throw ConfigError("checkpoint at " + path + " holds stage \"" + stage + "\", not gan");
  }
  const nlohmann::json& cfg_json = ckpt.metadata.at("config");
  GanConfig cfg;
  cfg.z_dim = cfg_json.at("z_dim").get<int64_t>();
  cfg.image_size = cfg_json.at("image_size").get<int64_t>();
  cfg.g_width = cfg_json.at("g_width").get<int64_t>();
  cfg.d_width = cfg_json.at("d_width").get<int64_t>();
  Rng rng(1);  // shapes only; values are overwritten by the load
  model.init(cfg, ckpt.metadata.at("cond_dim").get<int64_t>(), rng, Dtype::F32);
  nn::ParamList state = model.state();
  nn::state_load(state, ckpt);
}

Image generate(Generator& gen, const Tensor& c, const Tensor& z) {
  if (z.rank() != 1 || z.dim(0) != gen.z_dim) {
    throw DimensionError("generate: noise must be (" + std::to_string(gen.z_dim) + "), got " +
                         shape_str(z.shape()));
  }
  if (c.rank() != 1 || c.dim(0) != gen.cond_dim) {
    throw DimensionError("generate: condition must be (" + std::to_string(gen.cond_dim) +
                         "), got " + shape_str(c.shape()));
  }
  NoGradGuard guard;
  Tensor img = gen.forward(reshape(z, {1, gen.z_dim}), reshape(c, {1, gen.cond_dim}),
                           /*training=*/false, /*update_sn=*/false);
  const int64_t s = gen.image_size;
  Image out = make_image(s, s);
  const float* v = img.data<float>();
  for (size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = std::clamp((v[i] + 1.0f) * 0.5f, 0.0f, 1.0f);
  }
  return out;
}

}  // namespace cmcrl
