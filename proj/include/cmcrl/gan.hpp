#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmcrl/cmcrl.hpp"
#include "cmcrl/nn.hpp"

namespace cmcrl {

// ---------------------------------------------------------------------------
// Audio-conditioned image GAN: a generator that maps (noise z, condition c)
// to a 3xSxS image in [-1,1] and a projection discriminator scoring
// (image, condition) pairs, both spectrally normalized and each carrying one
// self-attention block at 16x16 resolution. The condition is the frozen
// audio encoder's d_e feature vector (projection head discarded). Training
// minimizes the hinge adversarial losses with two time-scale Adam updates.
// ---------------------------------------------------------------------------

struct GanConfig {
  int64_t z_dim = 64;
  int64_t image_size = 64;  // S: power of two, >= 32 (the attention site must exist)
  int64_t g_width = 16;     // generator base channel width, multiple of 8
  int64_t d_width = 16;     // discriminator base channel width, multiple of 8
  int64_t batch = 16;
  int64_t iters = 3000;
  double lr_g = 1e-4;
  double lr_d = 4e-4;  // 4x the generator rate (two time-scale rule)
  double beta1 = 0.5;
  double beta2 = 0.999;
  uint64_t seed = 1;
  // Iteration interval between sample grids / mid-run checkpoints (0 = final only).
  int64_t sample_every = 500;
  int64_t checkpoint_every = 0;
};

// Residual up-sampling stage: BN -> ReLU -> nearest-2x -> SNConv3x3 -> BN ->
// ReLU -> SNConv3x3, plus a nearest-2x + SNConv1x1 skip.
struct GBlock {
  nn::BatchNorm2d bn1, bn2;
  nn::SNConv2d conv1, conv2, skip;
  void init(int64_t cin, int64_t cout, Rng& rng, Dtype dt);
  Tensor forward(const Tensor& x, bool training, bool update_sn);
  void collect(nn::ParamList& out, const std::string& prefix);
};

// Residual down-sampling stage: [ReLU ->] SNConv3x3 -> ReLU -> SNConv3x3 ->
// avg-pool-2x, plus an avg-pool-2x + SNConv1x1 skip. The block reading raw
// pixels skips the leading ReLU.
struct DBlock {
  nn::SNConv2d conv1, conv2, skip;
  bool first = false;
  void init(int64_t cin, int64_t cout, bool first_, Rng& rng, Dtype dt);
  Tensor forward(const Tensor& x, bool update_sn);
  void collect(nn::ParamList& out, const std::string& prefix);
};

// (B,z_dim)+(B,cond_dim) -> (B,3,S,S) in [-1,1]. A spectrally normalized
// linear layer lifts [z; c] to an 4x4 feature map, log2(S/4) GBlocks upsample
// to SxS with self-attention after the block that lands on 16x16, and a
// BN -> ReLU -> SNConv3x3 -> tanh head emits pixels.
struct Generator {
  nn::SNLinear fc;
  std::vector<GBlock> blocks;
  nn::SelfAttention attn;
  nn::BatchNorm2d out_bn;
  nn::SNConv2d out_conv;
  int64_t z_dim = 0, cond_dim = 0, image_size = 0, width = 0;

  void init(int64_t z_dim_, int64_t cond_dim_, int64_t image_size_, int64_t width_, Rng& rng,
            Dtype dt = Dtype::F32);
  Tensor forward(const Tensor& z, const Tensor& c, bool training, bool update_sn);
  void collect(nn::ParamList& out, const std::string& prefix);
  // last_sigma of every spectral-norm wrapper, fixed order.
  std::vector<double> sigmas() const;
};

// (B,3,S,S)+(B,cond_dim) -> (B) unbounded scores. log2(S/4) DBlocks
// downsample to 4x4 (attention after the block that lands on 16x16), the
// trunk output is ReLU'd and sum-pooled to phi, and the score is
// psi(phi) + c^T W_p phi with W_p realized as a spectrally normalized
// condition embedding dotted against phi.
struct Discriminator {
  std::vector<DBlock> blocks;
  nn::SelfAttention attn;
  nn::SNLinear psi;    // feat -> 1
  nn::SNLinear embed;  // cond_dim -> feat, bias-free
  int64_t cond_dim = 0, image_size = 0, width = 0, feat_dim = 0;
  int64_t attn_after = 0;  // block index whose output feeds the attention

  void init(int64_t cond_dim_, int64_t image_size_, int64_t width_, Rng& rng,
            Dtype dt = Dtype::F32);
  Tensor forward(const Tensor& images, const Tensor& c, bool update_sn);
  void collect(nn::ParamList& out, const std::string& prefix);
  std::vector<double> sigmas() const;
};

struct GanModel {
  Generator gen;
  Discriminator dis;
  void init(const GanConfig& cfg, int64_t cond_dim, Rng& rng, Dtype dt = Dtype::F32);
  // Dotted names under gen / dis.
  nn::ParamList state();
};

// mean(relu(1 - s_real)) + mean(relu(1 + s_fake)); zero exactly when every
// real score >= 1 and every fake score <= -1.
Tensor hinge_d_loss(const Tensor& real_scores, const Tensor& fake_scores);
// -mean(s_fake).
Tensor hinge_g_loss(const Tensor& fake_scores);

// c = enc(featurize(clip)) on the unaugmented clip, eval mode, no gradients;
// rank-1 (d_e). The batch variant for a whole pair list is
// extract_audio_features (cmcrl.hpp).
Tensor condition_from_audio(Encoder& enc, const audio::AudioClip& clip,
                            const audio::FeatureStats& stats);

struct GanTrainCurve {
  std::vector<int64_t> iters;
  std::vector<double> d_losses;
  std::vector<double> g_losses;
};

// Alternating single D / single G updates with Adam(beta1, beta2) at the
// configured two learning rates. Real images are only resized (never
// augmented) and mapped to [-1,1]; conditions come from the frozen audio
// encoder, which is never touched by a gradient. Writes
// <out_dir>/gan_log.csv (iter, both losses, per-net spectral-norm summaries),
// <out_dir>/gan.ckpt, and sample grids under <out_dir>/samples/. All batch
// randomness derives from (seed, iteration) only, so resume_from reproduces
// the uninterrupted run exactly; resuming refuses a config or condition set
// that differs from the checkpoint's.
GanTrainCurve train_gan(const GanConfig& cfg, const std::vector<LabeledPair>& train_pairs,
                        CmcrlModel& cmcrl, const std::string& out_dir, GanModel& model,
                        const std::string& resume_from = "");

// Rebuilds the model from checkpoint metadata and restores every tensor.
void load_gan_checkpoint(const std::string& path, GanModel& model);

// G(z, c) mapped from [-1,1] to a [0,1] image. z: (z_dim), c: (cond_dim).
Image generate(Generator& gen, const Tensor& c, const Tensor& z);

}  // namespace cmcrl
