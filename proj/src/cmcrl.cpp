#include "cmcrl/cmcrl.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "cmcrl/parallel.hpp"

namespace cmcrl {

namespace {

// Fixed stream tags mixed into Rng::derive so initialization, epoch
// shuffling, batch augmentation and probe training draw from independent
// streams that depend only on (seed, epoch, batch), never on call history.
constexpr uint64_t kInitStream = 1;
constexpr uint64_t kOrderStream = 2;
constexpr uint64_t kBatchStream = 3;
constexpr uint64_t kProbeStream = 4;

double scalar_value(const Tensor& t) {
  double out = 0.0;
  dispatch(t.dtype(), [&](auto tag) { out = static_cast<double>(t.data<decltype(tag)>()[0]); });
  return out;
}

void check_indices(const std::vector<LabeledPair>& pairs, const std::vector<int64_t>& indices,
                   const char* who) {
  if (indices.empty()) throw ContractError(std::string(who) + ": empty index list");
  for (int64_t i : indices) {
    if (i < 0 || i >= static_cast<int64_t>(pairs.size())) {
      throw ContractError(std::string(who) + ": index " + std::to_string(i) +
                          " outside dataset of " + std::to_string(pairs.size()) + " pairs");
    }
  }
}

// Copies a CHW [0,1] image into a tensor row, remapped to [-1,1] (the range
// every encoder and discriminator consumes).
void image_into_row(const Image& img, float* dst) {
  for (size_t i = 0; i < img.data.size(); ++i) dst[i] = img.data[i] * 2.0f - 1.0f;
}

int64_t augment_base_size(int64_t image_size) {
  return std::max(image_size, image_size * 5 / 4);
}

std::vector<int64_t> labels_of(const std::vector<LabeledPair>& pairs) {
  std::vector<int64_t> out(pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) out[i] = pairs[i].label;
  return out;
}

void check_labels_in_range(const std::vector<int64_t>& labels, int64_t num_classes,
                           const char* who) {
  for (int64_t y : labels) {
    if (y < 0 || y >= num_classes) {
      throw ContractError(std::string(who) + ": label " + std::to_string(y) +
                          " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

double argmax_accuracy(const Tensor& logits, const std::vector<int64_t>& labels) {
  int64_t rows = logits.dim(0), cols = logits.dim(1);
  int64_t hits = 0;
  dispatch(logits.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* v = logits.data<T>();
    for (int64_t r = 0; r < rows; ++r) {
      int64_t best = 0;
      for (int64_t c = 1; c < cols; ++c) {
        if (v[r * cols + c] > v[r * cols + best]) best = c;
      }
      if (best == labels[static_cast<size_t>(r)]) ++hits;
    }
  });
  return static_cast<double>(hits) / static_cast<double>(rows);
}

// CSV rows print doubles round-trip exactly so reruns compare bitwise.
void csv_line(std::ofstream& out, int64_t epoch, double loss, double lr) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g\n", static_cast<long long>(epoch), loss, lr);
  out << buf;
}

nlohmann::json config_echo(const ContrastiveConfig& cfg) {
  return nlohmann::json{{"d_e", cfg.d_e},
                        {"d_p", cfg.d_p},
                        {"batch_pairs", cfg.batch_pairs},
                        {"epochs", cfg.epochs},
                        {"lr", cfg.lr},
                        {"lr_milestones", cfg.lr_milestones},
                        {"lr_factor", cfg.lr_factor},
                        {"momentum", cfg.momentum},
                        {"weight_decay", cfg.weight_decay},
                        {"temperature", cfg.temperature},
                        {"image_size", cfg.image_size},
                        {"seed", cfg.seed}};
}

// Everything that changes the trajectory must match for a resume to be the
// continuation of the same run; epochs may grow (training extension).
void check_resume_config(const nlohmann::json& saved, const ContrastiveConfig& cfg) {
  const nlohmann::json now = config_echo(cfg);
  for (const char* key : {"d_e", "d_p", "batch_pairs", "lr", "lr_milestones", "lr_factor",
                          "momentum", "weight_decay", "temperature", "image_size", "seed"}) {
    if (!saved.contains(key) || saved.at(key) != now.at(key)) {
      throw ConfigError(std::string("resume config mismatch on \"") + key + "\": checkpoint " +
                        (saved.contains(key) ? saved.at(key).dump() : "<missing>") + ", run " +
                        now.at(key).dump());
    }
  }
}

void save_train_checkpoint(const std::string& path, const std::string& stage,
                           const nn::ParamList& state, SgdOptimizer& opt,
                           const audio::FeatureStats& stats, int64_t epochs_done,
                           nlohmann::json config, nlohmann::json extra = nlohmann::json::object()) {
  Checkpoint ckpt;
  ckpt.metadata = std::move(extra);
  ckpt.metadata["stage"] = stage;
  ckpt.metadata["epochs_done"] = epochs_done;
  ckpt.metadata["dtype"] = "f32";
  ckpt.metadata["stats_mean"] = stats.mean;
  ckpt.metadata["stats_stddev"] = stats.stddev;
  ckpt.metadata["config"] = std::move(config);
  nn::ParamList copy = state;
  nn::state_save(copy, ckpt);
  auto& vel = opt.velocities();
  for (size_t i = 0; i < state.params.size(); ++i) {
    ckpt.tensors["opt.v." + state.params[i].name] = vel[i].clone();
  }
  checkpoint_save(ckpt, path);
}

audio::FeatureStats stats_from_metadata(const nlohmann::json& md) {
  audio::FeatureStats stats;
  stats.mean = md.at("stats_mean").get<std::array<double, 3>>();
  stats.stddev = md.at("stats_stddev").get<std::array<double, 3>>();
  return stats;
}

int64_t restore_train_checkpoint(const Checkpoint& ckpt, const std::string& stage,
                                 nn::ParamList& state, SgdOptimizer& opt,
                                 audio::FeatureStats& stats) {
  const std::string got = ckpt.metadata.value("stage", "<none>");
  if (got != stage) {
    throw ConfigError("checkpoint stage \"" + got + "\" cannot resume a \"" + stage + "\" run");
  }
  nn::state_load(state, ckpt);
  auto& vel = opt.velocities();
  for (size_t i = 0; i < state.params.size(); ++i) {
    const std::string name = "opt.v." + state.params[i].name;
    nn::copy_values(vel[i], ckpt.require(name), name);
  }
  stats = stats_from_metadata(ckpt.metadata);
  return ckpt.metadata.at("epochs_done").get<int64_t>();
}

void require_two_classes(const std::vector<LabeledPair>& pairs, const char* who) {
  if (pairs.size() < 2) {
    throw ContractError(std::string(who) + ": dataset has " + std::to_string(pairs.size()) +
                        " pairs, needs at least 2");
  }
  const int first = pairs.front().label;
  for (const LabeledPair& p : pairs) {
    if (p.label != first) return;
  }
  throw ContractError(std::string(who) + ": dataset holds a single class (" +
                      std::to_string(first) + "), needs at least 2");
}

std::ofstream open_log(const std::string& path, bool fresh) {
  std::ofstream out(path, fresh ? std::ios::trunc : std::ios::app);
  if (!out) throw IoError("cannot open log file " + path);
  if (fresh) out << "epoch,loss,lr\n";
  return out;
}

}  // namespace

void CmcrlModel::init(int64_t d_e, int64_t d_p, Rng& rng, Dtype dt) {
  enc_audio.init(d_e, rng, dt);
  head_audio.init(d_e, d_p, rng, dt);
  enc_image.init(d_e, rng, dt);
  head_image.init(d_e, d_p, rng, dt);
}

nn::ParamList CmcrlModel::state() {
  nn::ParamList out;
  enc_audio.collect(out, "enc_a");
  head_audio.collect(out, "head_a");
  enc_image.collect(out, "enc_v");
  head_image.collect(out, "head_v");
  return out;
}

void BaselineModel::init(int64_t d_e, int64_t num_classes, Rng& rng, Dtype dt) {
  if (num_classes < 2) {
    throw ContractError("BaselineModel: needs at least 2 classes, got " +
                        std::to_string(num_classes));
  }
  enc.init(d_e, rng, dt);
  classifier.init(d_e, num_classes, rng, dt);
}

nn::ParamList BaselineModel::state() {
  nn::ParamList out;
  enc.collect(out, "enc");
  classifier.collect(out, "fc");
  return out;
}

Tensor embed_audio(Encoder& enc, ProjectionHead& head, const Tensor& feats, bool training) {
  if (feats.rank() != 4 || feats.dim(1) != 3 || feats.dim(2) != audio::kMels ||
      feats.dim(3) != audio::kFrames) {
    throw DimensionError("embed_audio: expects (B,3," + std::to_string(audio::kMels) + "," +
                         std::to_string(audio::kFrames) + "), got " + shape_str(feats.shape()));
  }
  return l2_normalize_rows(head.forward(enc.forward(feats, training)));
}

Tensor embed_image(Encoder& enc, ProjectionHead& head, const Tensor& imgs, bool training) {
  if (imgs.rank() != 4 || imgs.dim(1) != 3 || imgs.dim(2) != imgs.dim(3)) {
    throw DimensionError("embed_image: expects square (B,3,S,S), got " +
                         shape_str(imgs.shape()));
  }
  return l2_normalize_rows(head.forward(enc.forward(imgs, training)));
}

Tensor cmcrl_loss(const Tensor& z, const std::vector<int64_t>& labels, double tau) {
  if (z.rank() != 2) {
    throw DimensionError("cmcrl_loss: embeddings must be (rows,d), got " + shape_str(z.shape()));
  }
  const int64_t rows = z.dim(0);
  if (static_cast<int64_t>(labels.size()) != rows) {
    throw DimensionError("cmcrl_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(rows) + " rows");
  }
  if (rows < 2) {
    throw ContractError("cmcrl_loss: needs at least 2 embeddings, got " + std::to_string(rows));
  }
  if (!(tau > 0.0)) {
    throw DomainError("cmcrl_loss: temperature must be positive, got " + std::to_string(tau));
  }
  std::map<int64_t, int64_t> class_count;
  for (int64_t y : labels) ++class_count[y];
  for (const auto& [cls, count] : class_count) {
    if (count < 2) {
      throw ContractError("cmcrl_loss: class " + std::to_string(cls) +
                          " has a single sample; every anchor needs a positive partner");
    }
  }

  // L = sum_i lse_i - sum_i (1/|P(i)|) sum_{p in P(i)} s_ip, using that the
  // positive weights of each row sum to exactly 1. The diagonal is excluded
  // from the log-sum-exp by a -1e30 additive mask, which the max-shift turns
  // into an exact zero contribution.
  const Dtype dt = z.dtype();
  Tensor diag_mask = Tensor::zeros({rows, rows}, dt);
  Tensor pos_mask = Tensor::zeros({rows, rows}, dt);
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    T* dm = diag_mask.data<T>();
    T* pm = pos_mask.data<T>();
    for (int64_t i = 0; i < rows; ++i) {
      dm[i * rows + i] = static_cast<T>(-1e30);
      const T w = static_cast<T>(1.0 / static_cast<double>(class_count[labels[i]] - 1));
      for (int64_t j = 0; j < rows; ++j) {
        if (j != i && labels[j] == labels[i]) pm[i * rows + j] = w;
      }
    }
  });
  Tensor sims = mul_scalar(matmul(z, z, false, true), 1.0 / tau);
  Tensor lse = logsumexp_lastdim(add(sims, diag_mask));
  return sub(sum(lse), sum(mul(pos_mask, sims)));
}

BatchInputs make_batch(const std::vector<LabeledPair>& pairs,
                       const std::vector<int64_t>& indices, int64_t image_size,
                       const audio::FeatureStats& stats, uint64_t batch_seed) {
  check_indices(pairs, indices, "make_batch");
  if (image_size < 2) {
    throw ContractError("make_batch: image size must be >= 2, got " +
                        std::to_string(image_size));
  }
  const int64_t n = static_cast<int64_t>(indices.size());
  const int64_t base = augment_base_size(image_size);
  BatchInputs out;
  out.audio = Tensor::zeros({n, 3, audio::kMels, audio::kFrames});
  out.image = Tensor::zeros({n, 3, image_size, image_size});
  out.labels.resize(static_cast<size_t>(2 * n));
  float* av = out.audio.data<float>();
  float* iv = out.image.data<float>();
  const int64_t arow = 3 * audio::kMels * audio::kFrames;
  const int64_t irow = 3 * image_size * image_size;
  parallel_for(n, [&](int64_t s0, int64_t s1) {
    for (int64_t s = s0; s < s1; ++s) {
      const LabeledPair& pair = pairs[static_cast<size_t>(indices[s])];
      audio::AudioClip clip = pair.clip;
      Rng arng(Rng::derive(batch_seed, static_cast<uint64_t>(s), 0));
      fade_in_out(clip.samples, arng);
      time_mask(clip.samples, arng);
      Tensor feat = audio::featurize(clip, &stats);
      std::memcpy(av + s * arow, feat.data<float>(), sizeof(float) * static_cast<size_t>(arow));

      Rng irng(Rng::derive(batch_seed, static_cast<uint64_t>(s), 1));
      Image img = image_augment(pair.image, irng, image_size, base);
      image_into_row(img, iv + s * irow);

      out.labels[static_cast<size_t>(s)] = pair.label;
      out.labels[static_cast<size_t>(n + s)] = pair.label;
    }
  });
  return out;
}

Tensor audio_eval_batch(const std::vector<LabeledPair>& pairs,
                        const std::vector<int64_t>& indices,
                        const audio::FeatureStats& stats) {
  check_indices(pairs, indices, "audio_eval_batch");
  const int64_t n = static_cast<int64_t>(indices.size());
  Tensor out = Tensor::zeros({n, 3, audio::kMels, audio::kFrames});
  float* ov = out.data<float>();
  const int64_t row = 3 * audio::kMels * audio::kFrames;
  parallel_for(n, [&](int64_t s0, int64_t s1) {
    for (int64_t s = s0; s < s1; ++s) {
      Tensor feat = audio::featurize(pairs[static_cast<size_t>(indices[s])].clip, &stats);
      std::memcpy(ov + s * row, feat.data<float>(), sizeof(float) * static_cast<size_t>(row));
    }
  });
  return out;
}

Tensor image_eval_batch(const std::vector<LabeledPair>& pairs,
                        const std::vector<int64_t>& indices, int64_t image_size) {
  check_indices(pairs, indices, "image_eval_batch");
  const int64_t n = static_cast<int64_t>(indices.size());
  Tensor out = Tensor::zeros({n, 3, image_size, image_size});
  float* ov = out.data<float>();
  const int64_t row = 3 * image_size * image_size;
  parallel_for(n, [&](int64_t s0, int64_t s1) {
    for (int64_t s = s0; s < s1; ++s) {
      Image img = resize(pairs[static_cast<size_t>(indices[s])].image, image_size, image_size);
      image_into_row(img, ov + s * row);
    }
  });
  return out;
}

audio::FeatureStats estimate_feature_stats(const std::vector<LabeledPair>& pairs) {
  if (pairs.empty()) throw ContractError("estimate_feature_stats: empty pair list");
  std::array<double, 3> sum{}, sumsq{};
  // Serial over clips so the accumulation order is fixed.
  for (const LabeledPair& pair : pairs) {
    Tensor feat = audio::featurize(pair.clip, nullptr);
    const float* v = feat.data<float>();
    const int64_t plane = audio::kMels * audio::kFrames;
    for (int64_t c = 0; c < 3; ++c) {
      double s = 0.0, s2 = 0.0;
      for (int64_t i = 0; i < plane; ++i) {
        const double x = static_cast<double>(v[c * plane + i]);
        s += x;
        s2 += x * x;
      }
      sum[static_cast<size_t>(c)] += s;
      sumsq[static_cast<size_t>(c)] += s2;
    }
  }
  const double count = static_cast<double>(pairs.size()) *
                       static_cast<double>(audio::kMels * audio::kFrames);
  audio::FeatureStats stats;
  for (size_t c = 0; c < 3; ++c) {
    stats.mean[c] = sum[c] / count;
    const double var = std::max(0.0, sumsq[c] / count - stats.mean[c] * stats.mean[c]);
    stats.stddev[c] = std::max(std::sqrt(var), 1e-6);
  }
  return stats;
}

namespace {

constexpr int64_t kEvalBatch = 64;

template <class BatchFn>
Tensor extract_features(Encoder& enc, int64_t n, BatchFn make_eval_batch) {
  NoGradGuard guard;
  Tensor out = Tensor::zeros({n, enc.feature_dim});
  float* ov = out.data<float>();
  for (int64_t start = 0; start < n; start += kEvalBatch) {
    const int64_t stop = std::min(n, start + kEvalBatch);
    std::vector<int64_t> idx(static_cast<size_t>(stop - start));
    std::iota(idx.begin(), idx.end(), start);
    Tensor feats = enc.forward(make_eval_batch(idx), false);
    std::memcpy(ov + start * enc.feature_dim, feats.data<float>(),
                sizeof(float) * static_cast<size_t>(feats.numel()));
  }
  return out;
}

}  // namespace

Tensor extract_audio_features(Encoder& enc, const std::vector<LabeledPair>& pairs,
                              const audio::FeatureStats& stats) {
  return extract_features(enc, static_cast<int64_t>(pairs.size()),
                          [&](const std::vector<int64_t>& idx) {
                            return audio_eval_batch(pairs, idx, stats);
                          });
}

Tensor extract_image_features(Encoder& enc, const std::vector<LabeledPair>& pairs,
                              int64_t image_size) {
  return extract_features(enc, static_cast<int64_t>(pairs.size()),
                          [&](const std::vector<int64_t>& idx) {
                            return image_eval_batch(pairs, idx, image_size);
                          });
}

TrainCurve train_cmcrl(const ContrastiveConfig& cfg,
                       const std::vector<LabeledPair>& train_pairs,
                       const std::string& out_dir, CmcrlModel& model,
                       const std::string& resume_from) {
  require_two_classes(train_pairs, "train_cmcrl");
  if (cfg.batch_pairs < 2) {
    throw ConfigError("train_cmcrl: batch_pairs must be >= 2, got " +
                      std::to_string(cfg.batch_pairs));
  }
  const int64_t npairs = static_cast<int64_t>(train_pairs.size());
  const int64_t batches = npairs / cfg.batch_pairs;
  if (batches < 1) {
    throw ConfigError("train_cmcrl: " + std::to_string(npairs) + " pairs cannot fill a batch of " +
                      std::to_string(cfg.batch_pairs));
  }

  Rng init_rng(Rng::derive(cfg.seed, kInitStream));
  model.init(cfg.d_e, cfg.d_p, init_rng, Dtype::F32);
  nn::ParamList state = model.state();
  SgdOptimizer opt(state.params, cfg.lr, cfg.momentum, cfg.weight_decay);

  int64_t start_epoch = 0;
  if (resume_from.empty()) {
    model.stats = estimate_feature_stats(train_pairs);
  } else {
    Checkpoint ckpt = checkpoint_load(resume_from);
    check_resume_config(ckpt.metadata.at("config"), cfg);
    start_epoch = restore_train_checkpoint(ckpt, "cmcrl", state, opt, model.stats);
  }

  const std::string ckpt_path = out_dir + "/cmcrl.ckpt";
  std::ofstream log = open_log(out_dir + "/cmcrl_log.csv", start_epoch == 0);
  TrainCurve curve;
  for (int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg.lr, cfg.lr_milestones, cfg.lr_factor);
    opt.set_lr(lr);
    std::vector<int64_t> order(static_cast<size_t>(npairs));
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(Rng::derive(cfg.seed, kOrderStream, static_cast<uint64_t>(epoch)));
    order_rng.shuffle(order);

    double loss_sum = 0.0;
    for (int64_t b = 0; b < batches; ++b) {
      std::vector<int64_t> idx(order.begin() + b * cfg.batch_pairs,
                               order.begin() + (b + 1) * cfg.batch_pairs);
      BatchInputs in =
          make_batch(train_pairs, idx, cfg.image_size, model.stats,
                     Rng::derive(cfg.seed, kBatchStream, static_cast<uint64_t>(epoch),
                                 static_cast<uint64_t>(b)));
      Tensor za = embed_audio(model.enc_audio, model.head_audio, in.audio, true);
      Tensor zv = embed_image(model.enc_image, model.head_image, in.image, true);
      Tensor loss = cmcrl_loss(concat_rows(za, zv), in.labels, cfg.temperature);
      const double value = scalar_value(loss);
      if (!std::isfinite(value)) {
        throw NumericalError("train_cmcrl: non-finite loss at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(b) + ", lr " + std::to_string(lr));
      }
      opt.zero_grad();
      loss.backward();
      opt.step();
      loss_sum += value / static_cast<double>(2 * cfg.batch_pairs);
    }
    const double mean_loss = loss_sum / static_cast<double>(batches);
    curve.epochs.push_back(epoch);
    curve.losses.push_back(mean_loss);
    curve.lrs.push_back(lr);
    csv_line(log, epoch, mean_loss, lr);
    const bool last = epoch + 1 == cfg.epochs;
    if (last || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)) {
      save_train_checkpoint(ckpt_path, "cmcrl", state, opt, model.stats, epoch + 1,
                            config_echo(cfg));
    }
  }
  if (cfg.epochs == start_epoch) {
    // Nothing left to run; still emit the checkpoint so callers get artifacts.
    save_train_checkpoint(ckpt_path, "cmcrl", state, opt, model.stats, start_epoch,
                          config_echo(cfg));
  }
  return curve;
}

TrainCurve train_classification_baseline(const ContrastiveConfig& cfg,
                                         const std::vector<LabeledPair>& train_pairs,
                                         int64_t num_classes, const std::string& out_dir,
                                         BaselineModel& model,
                                         const std::string& resume_from) {
  require_two_classes(train_pairs, "train_classification_baseline");
  check_labels_in_range(labels_of(train_pairs), num_classes, "train_classification_baseline");
  if (cfg.batch_pairs < 1) {
    throw ConfigError("train_classification_baseline: batch_pairs must be >= 1, got " +
                      std::to_string(cfg.batch_pairs));
  }
  const int64_t npairs = static_cast<int64_t>(train_pairs.size());
  const int64_t batches = npairs / cfg.batch_pairs;
  if (batches < 1) {
    throw ConfigError("train_classification_baseline: " + std::to_string(npairs) +
                      " pairs cannot fill a batch of " + std::to_string(cfg.batch_pairs));
  }

  Rng init_rng(Rng::derive(cfg.seed, kInitStream));
  model.init(cfg.d_e, num_classes, init_rng, Dtype::F32);
  nn::ParamList state = model.state();
  SgdOptimizer opt(state.params, cfg.lr, cfg.momentum, cfg.weight_decay);

  int64_t start_epoch = 0;
  if (resume_from.empty()) {
    model.stats = estimate_feature_stats(train_pairs);
  } else {
    Checkpoint ckpt = checkpoint_load(resume_from);
    check_resume_config(ckpt.metadata.at("config"), cfg);
    if (ckpt.metadata.value("num_classes", int64_t{0}) != num_classes) {
      throw ConfigError("resume class count mismatch: checkpoint " +
                        ckpt.metadata.value("num_classes", nlohmann::json()).dump() + ", run " +
                        std::to_string(num_classes));
    }
    start_epoch = restore_train_checkpoint(ckpt, "baseline", state, opt, model.stats);
  }

  const std::string ckpt_path = out_dir + "/baseline.ckpt";
  std::ofstream log = open_log(out_dir + "/baseline_log.csv", start_epoch == 0);
  TrainCurve curve;
  for (int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg.lr, cfg.lr_milestones, cfg.lr_factor);
    opt.set_lr(lr);
    std::vector<int64_t> order(static_cast<size_t>(npairs));
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(Rng::derive(cfg.seed, kOrderStream, static_cast<uint64_t>(epoch)));
    order_rng.shuffle(order);

    double loss_sum = 0.0;
    for (int64_t b = 0; b < batches; ++b) {
      std::vector<int64_t> idx(order.begin() + b * cfg.batch_pairs,
                               order.begin() + (b + 1) * cfg.batch_pairs);
      BatchInputs in =
          make_batch(train_pairs, idx, cfg.image_size, model.stats,
                     Rng::derive(cfg.seed, kBatchStream, static_cast<uint64_t>(epoch),
                                 static_cast<uint64_t>(b)));
      std::vector<int64_t> labels(in.labels.begin(),
                                  in.labels.begin() + cfg.batch_pairs);
      Tensor logits = model.classifier.forward(model.enc.forward(in.audio, true));
      Tensor loss = cross_entropy_with_logits(logits, labels);
      const double value = scalar_value(loss);
      if (!std::isfinite(value)) {
        throw NumericalError("train_classification_baseline: non-finite loss at epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(b) + ", lr " +
                             std::to_string(lr));
      }
      opt.zero_grad();
      loss.backward();
      opt.step();
      loss_sum += value;
    }
    const double mean_loss = loss_sum / static_cast<double>(batches);
    curve.epochs.push_back(epoch);
    curve.losses.push_back(mean_loss);
    curve.lrs.push_back(lr);
    csv_line(log, epoch, mean_loss, lr);
    const bool last = epoch + 1 == cfg.epochs;
    if (last || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)) {
      save_train_checkpoint(ckpt_path, "baseline", state, opt, model.stats, epoch + 1,
                            config_echo(cfg), {{"num_classes", num_classes}});
    }
  }
  if (cfg.epochs == start_epoch) {
    save_train_checkpoint(ckpt_path, "baseline", state, opt, model.stats, start_epoch,
                          config_echo(cfg), {{"num_classes", num_classes}});
  }
  return curve;
}

void load_cmcrl_checkpoint(const std::string& path, CmcrlModel& model) {
  Checkpoint ckpt = checkpoint_load(path);
  const std::string stage = ckpt.metadata.value("stage", "<none>");
  if (stage != "cmcrl") {
    throw ConfigError("checkpoint at " + path + " holds stage \"" + stage + "\", not cmcrl");
  }
  const nlohmann::json& cfg = ckpt.metadata.at("config");
  Rng rng(1);  // shapes only; values are overwritten by the load
  model.init(cfg.at("d_e").get<int64_t>(), cfg.at("d_p").get<int64_t>(), rng, Dtype::F32);
  nn::ParamList state = model.state();
  nn::state_load(state, ckpt);
  model.stats = stats_from_metadata(ckpt.metadata);
}

void load_baseline_checkpoint(const std::string& path, BaselineModel& model) {
  Checkpoint ckpt = checkpoint_load(path);
  const std::string stage = ckpt.metadata.value("stage", "<none>");
  if (stage != "baseline") {
    throw ConfigError("checkpoint at " + path + " holds stage \"" + stage + "\", not baseline");
  }
  const nlohmann::json& cfg = ckpt.metadata.at("config");
  Rng rng(1);
  model.init(cfg.at("d_e").get<int64_t>(), ckpt.metadata.at("num_classes").get<int64_t>(), rng,
             Dtype::F32);
  nn::ParamList state = model.state();
  nn::state_load(state, ckpt);
  model.stats = stats_from_metadata(ckpt.metadata);
}

ProbeResult probe_on_features(const Tensor& train_x, const std::vector<int64_t>& train_y,
                              const Tensor& test_x, const std::vector<int64_t>& test_y,
                              int64_t num_classes, uint64_t seed, int64_t steps, double lr) {
  if (train_x.rank() != 2 || test_x.rank() != 2 || train_x.dim(1) != test_x.dim(1)) {
    throw DimensionError("probe_on_features: features must be (n,d) with matching d, got " +
                         shape_str(train_x.shape()) + " and " + shape_str(test_x.shape()));
  }
  if (train_x.dim(0) != static_cast<int64_t>(train_y.size()) ||
      test_x.dim(0) != static_cast<int64_t>(test_y.size())) {
    throw DimensionError("probe_on_features: feature rows and label counts disagree");
  }
  if (num_classes < 2) {
    throw ContractError("probe_on_features: needs at least 2 classes, got " +
                        std::to_string(num_classes));
  }
  check_labels_in_range(train_y, num_classes, "probe_on_features");
  check_labels_in_range(test_y, num_classes, "probe_on_features");

  Rng rng(Rng::derive(seed, kProbeStream));
  nn::Linear fc;
  fc.init(train_x.dim(1), num_classes, rng, train_x.dtype(), true);
  SgdOptimizer opt({{"w", fc.w}, {"b", fc.b}}, lr, 0.9, 0.0);
  for (int64_t step = 0; step < steps; ++step) {
    Tensor loss = cross_entropy_with_logits(fc.forward(train_x), train_y);
    opt.zero_grad();
    loss.backward();
    opt.step();
  }

  NoGradGuard guard;
  ProbeResult out;
  out.train_accuracy = argmax_accuracy(fc.forward(train_x), train_y);
  out.test_accuracy = argmax_accuracy(fc.forward(test_x), test_y);
  return out;
}

ProbeResult linear_probe(Encoder& enc, const std::vector<LabeledPair>& train_pairs,
                         const std::vector<LabeledPair>& test_pairs, Modality modality,
                         const audio::FeatureStats& stats, int64_t image_size,
                         int64_t num_classes, uint64_t seed) {
  if (train_pairs.empty() || test_pairs.empty()) {
    throw ContractError("linear_probe: both splits must be non-empty");
  }
  Tensor train_x, test_x;
  if (modality == Modality::kAudio) {
    train_x = extract_audio_features(enc, train_pairs, stats);
    test_x = extract_audio_features(enc, test_pairs, stats);
  } else {
    train_x = extract_image_features(enc, train_pairs, image_size);
    test_x = extract_image_features(enc, test_pairs, image_size);
  }
  return probe_on_features(train_x, labels_of(train_pairs), test_x, labels_of(test_pairs),
                           num_classes, seed);
}

}  // namespace cmcrl
