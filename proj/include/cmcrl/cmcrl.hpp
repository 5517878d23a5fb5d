#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmcrl/audio.hpp"
#include "cmcrl/data_io.hpp"
#include "cmcrl/encoder.hpp"
#include "cmcrl/nn.hpp"

namespace cmcrl {

// ---------------------------------------------------------------------------
// Cross-modal contrastive pretraining: two encoders (audio, image) with
// projection heads embed paired samples onto a shared unit sphere, pulled
// together per class by a supervised contrastive loss over the concatenated
// 2N-row batch. A jointly trained classification baseline and a frozen-
// encoder linear probe measure representation quality.
// ---------------------------------------------------------------------------

struct ContrastiveConfig {
  int64_t d_e = 128;  // encoder feature width
  int64_t d_p = 32;   // projection embedding width
  int64_t batch_pairs = 32;  // N audio/image pairs per step (2N embeddings)
  int64_t epochs = 200;
  double lr = 0.05;
  std::vector<int64_t> lr_milestones{100, 140, 160};
  double lr_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double temperature = 0.1;
  int64_t image_size = 64;  // S: image side seen by the encoder
  uint64_t seed = 1;
  // Epoch interval between mid-run checkpoints (0 = final only).
  int64_t checkpoint_every = 0;
};

// One assembled training batch. Audio is featurized to (N,3,128,44) after
// waveform augmentation; images are augmented and mapped to [-1,1] as
// (N,3,S,S). labels has 2N entries for the concatenated embedding rows,
// audio first, so labels[l] == labels[N+l] by construction.
struct BatchInputs {
  Tensor audio;
  Tensor image;
  std::vector<int64_t> labels;
};

// Both encoders plus both projection heads, with the feature statistics the
// audio front-end was standardized with. The audio and image towers share an
// architecture but never a parameter.
struct CmcrlModel {
  Encoder enc_audio, enc_image;
  ProjectionHead head_audio, head_image;
  audio::FeatureStats stats;

  void init(int64_t d_e, int64_t d_p, Rng& rng, Dtype dt = Dtype::F32);
  // Dotted names under enc_a / enc_v / head_a / head_v.
  nn::ParamList state();
};

// Encoder + linear classifier trained jointly with cross-entropy on one
// modality; the comparison baseline for the probe ordering.
struct BaselineModel {
  Encoder enc;
  nn::Linear classifier;
  audio::FeatureStats stats;

  void init(int64_t d_e, int64_t num_classes, Rng& rng, Dtype dt = Dtype::F32);
  nn::ParamList state();
};

// normalize(head(encoder(x))): (B,3,128,44) -> (B,d_p), rows unit-norm.
Tensor embed_audio(Encoder& enc, ProjectionHead& head, const Tensor& feats, bool training);
// Same for images: (B,3,S,S), square.
Tensor embed_image(Encoder& enc, ProjectionHead& head, const Tensor& imgs, bool training);

// Supervised contrastive loss over unit embeddings z (2N,d) with one label
// per row: L = -sum_i (1/|P(i)|) sum_{p in P(i)} log[ exp(z_i.z_p / tau) /
// sum_{t != i} exp(z_i.z_t / tau) ], where P(i) holds the other rows sharing
// label i. Exact sum over anchors (callers divide by 2N for reporting).
// Log-sum-exp stabilized; every anchor must have a positive partner.
Tensor cmcrl_loss(const Tensor& z, const std::vector<int64_t>& labels, double tau);

// Assembles the selected pairs into training tensors. Every sample draws its
// augmentation randomness from a stream derived from (batch_seed, position),
// so batches are reproducible no matter how assembly is scheduled.
BatchInputs make_batch(const std::vector<LabeledPair>& pairs,
                       const std::vector<int64_t>& indices, int64_t image_size,
                       const audio::FeatureStats& stats, uint64_t batch_seed);

// Deterministic evaluation-path inputs: featurized audio without waveform
// augmentation, or images resized straight to S (no crop/jitter).
Tensor audio_eval_batch(const std::vector<LabeledPair>& pairs,
                        const std::vector<int64_t>& indices,
                        const audio::FeatureStats& stats);
Tensor image_eval_batch(const std::vector<LabeledPair>& pairs,
                        const std::vector<int64_t>& indices, int64_t image_size);

// Per-channel mean/stddev of the unstandardized features of a clip set.
audio::FeatureStats estimate_feature_stats(const std::vector<LabeledPair>& pairs);

// Frozen-encoder features (n,d_e) for a whole pair list, eval mode, no
// gradients. The encoder is bitwise untouched.
Tensor extract_audio_features(Encoder& enc, const std::vector<LabeledPair>& pairs,
                              const audio::FeatureStats& stats);
Tensor extract_image_features(Encoder& enc, const std::vector<LabeledPair>& pairs,
                              int64_t image_size);

struct TrainCurve {
  std::vector<int64_t> epochs;
  std::vector<double> losses;  // mean per anchor (sum / 2N), averaged over batches
  std::vector<double> lrs;
};

// SGD + momentum with the milestone schedule over epochs of
// make_batch -> embed both modalities -> concat -> loss -> step.
// Writes <out_dir>/cmcrl_log.csv and <out_dir>/cmcrl.ckpt; resume_from
// restores parameters, optimizer velocities and the epoch counter, and
// reproduces the uninterrupted run exactly (batch randomness depends only on
// (seed, epoch, batch), never on call history).
TrainCurve train_cmcrl(const ContrastiveConfig& cfg,
                       const std::vector<LabeledPair>& train_pairs,
                       const std::string& out_dir, CmcrlModel& model,
                       const std::string& resume_from = "");

// Joint encoder+classifier cross-entropy training on the audio modality with
// the same optimizer family. Writes <out_dir>/baseline_log.csv and
// <out_dir>/baseline.ckpt. Curve losses are mean cross-entropy per sample.
TrainCurve train_classification_baseline(const ContrastiveConfig& cfg,
                                         const std::vector<LabeledPair>& train_pairs,
                                         int64_t num_classes, const std::string& out_dir,
                                         BaselineModel& model,
                                         const std::string& resume_from = "");

// Loads a checkpoint produced by the trainers above into a freshly shaped
// model (dims come from the checkpoint metadata).
void load_cmcrl_checkpoint(const std::string& path, CmcrlModel& model);
void load_baseline_checkpoint(const std::string& path, BaselineModel& model);

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

// Trains a single linear layer on fixed feature rows (full-batch SGD with
// momentum) and scores argmax accuracy. Features are consumed as-is.
ProbeResult probe_on_features(const Tensor& train_x, const std::vector<int64_t>& train_y,
                              const Tensor& test_x, const std::vector<int64_t>& test_y,
                              int64_t num_classes, uint64_t seed, int64_t steps = 400,
                              double lr = 0.1);

enum class Modality { kAudio, kImage };

// Linear probe on d_e features of a frozen encoder (projection head unused).
// Gradients never reach the encoder; its parameters are bitwise identical
// before and after.
ProbeResult linear_probe(Encoder& enc, const std::vector<LabeledPair>& train_pairs,
                         const std::vector<LabeledPair>& test_pairs, Modality modality,
                         const audio::FeatureStats& stats, int64_t image_size,
                         int64_t num_classes, uint64_t seed);

}  // namespace cmcrl
