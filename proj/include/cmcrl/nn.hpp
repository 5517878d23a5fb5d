#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cmcrl/ops.hpp"
#include "cmcrl/optim.hpp"
#include "cmcrl/rng.hpp"
#include "cmcrl/tensor.hpp"

namespace cmcrl {
struct Checkpoint;
}

namespace cmcrl::nn {

// Trainable parameters and persistent-but-untrained buffers (batch-norm
// running statistics, spectral-norm power-iteration vectors), collected with
// hierarchical dotted names for optimizers and checkpoints.
struct ParamList {
  std::vector<NamedParam> params;
  std::vector<NamedParam> buffers;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization used everywhere.
Tensor init_uniform_fanin(Shape shape, int64_t fan_in, Rng& rng, Dtype dt,
                          bool requires_grad = true);

// Copies src values into dst in place (shape and dtype must match; `name`
// labels the tensor in error messages).
void copy_values(Tensor& dst, const Tensor& src, const std::string& name);

// Copies every param/buffer value into a checkpoint (prefix + name) and back.
// Loading copies into the existing tensors so optimizer references stay valid;
// missing names are reported all at once, shape mismatches individually.
void state_save(const ParamList& state, Checkpoint& ckpt, const std::string& prefix = "");
void state_load(ParamList& state, const Checkpoint& ckpt, const std::string& prefix = "");

// ---------------------------------------------------------------------------
// Plain layers
// ---------------------------------------------------------------------------

struct Linear {
  Tensor w, b;  // w: (out,in); b optional
  void init(int64_t in, int64_t out, Rng& rng, Dtype dt, bool with_bias = true);
  Tensor forward(const Tensor& x) const { return linear(x, w, b); }
  void collect(ParamList& out, const std::string& prefix);
};

struct Conv2d {
  Tensor w, b;  // w: (cout,cin,k,k); b optional
  int stride = 1;
  int pad = 0;
  void init(int64_t cin, int64_t cout, int64_t k, int stride_, int pad_, Rng& rng, Dtype dt,
            bool with_bias = true);
  Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
  void collect(ParamList& out, const std::string& prefix);
};

struct BatchNorm2d {
  Tensor gamma, beta;              // trainable, init 1 / 0
  Tensor running_mean, running_var;  // buffers, init 0 / 1
  void init(int64_t channels, Dtype dt);
  Tensor forward(const Tensor& x, bool training) {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, training);
  }
  void collect(ParamList& out, const std::string& prefix);
};

// ---------------------------------------------------------------------------
// Spectral normalization
// ---------------------------------------------------------------------------

struct SpectralResult {
  Tensor w_bar;   // w / sigma, differentiable through w
  Tensor u_next;  // updated left singular vector estimate (values only)
  Tensor v_next;  // matching right singular vector estimate (values only)
  double sigma = 0.0;
};

// One (or more) power-iteration steps on w reshaped to (out x rest):
// v = normalize(w^T u), u' = normalize(w v), sigma = u'^T w v, w_bar = w/sigma
// (with a 1e-12 epsilon guard on every division). u and v are treated as
// constants in the graph; gradients flow through both occurrences of w.
SpectralResult spectral_normalize(const Tensor& w, const Tensor& u, int n_power_iter = 1);

// w / (u^T w v + eps) with u and v held fixed — the evaluation-mode path.
// Smooth in w, so finite differences agree with the graph gradient.
Tensor spectral_normalize_frozen(const Tensor& w, const Tensor& u, const Tensor& v);

// Number of times the zero-norm epsilon guard fired.
uint64_t spectral_zero_guard_count();

// Wrapper owning the persisted power-iteration vectors for one weight.
struct SpectralNorm {
  Tensor u, v;  // (out) and (numel/out), buffers
  bool enabled = true;  // disabled -> apply() returns w untouched
  double last_sigma = 0.0;
  // u starts random on the unit sphere; v = normalize(w^T u) from the
  // freshly initialized weight, so the frozen path works from step zero.
  void init(const Tensor& w, Rng& rng);
  // Normalizes w. update=true advances u and v by one power iteration
  // (training convention); update=false reuses the stored vectors.
  Tensor apply(const Tensor& w, bool update);
  void collect(ParamList& out, const std::string& prefix);
};

struct SNLinear {
  Linear lin;
  SpectralNorm sn;
  void init(int64_t in, int64_t out, Rng& rng, Dtype dt, bool with_bias = true);
  Tensor forward(const Tensor& x, bool update_sn) {
    return linear(x, sn.apply(lin.w, update_sn), lin.b);
  }
  void collect(ParamList& out, const std::string& prefix);
};

struct SNConv2d {
  Conv2d conv;
  SpectralNorm sn;
  void init(int64_t cin, int64_t cout, int64_t k, int stride, int pad, Rng& rng, Dtype dt,
            bool with_bias = true);
  Tensor forward(const Tensor& x, bool update_sn) {
    return conv2d(x, sn.apply(conv.w, update_sn), conv.b, conv.stride, conv.pad);
  }
  void collect(ParamList& out, const std::string& prefix);
};

// ---------------------------------------------------------------------------
// Self-attention block (queries/keys at C/8 channels, values at C/2, output
// residual gated by a scalar gamma initialized to 0, so the block starts as
// the identity map).
// ---------------------------------------------------------------------------

struct SelfAttention {
  SNConv2d f, g, h, o;  // 1x1, bias-free
  Tensor gamma;         // (1), init 0
  bool use_sn = true;
  void init(int64_t channels, Rng& rng, Dtype dt, bool spectral = true);
  // attn_out, when given, receives the (B, HW, HW) attention matrix.
  Tensor forward(const Tensor& x, bool update_sn, Tensor* attn_out = nullptr);
  void collect(ParamList& out, const std::string& prefix);
};

}  // namespace cmcrl::nn
