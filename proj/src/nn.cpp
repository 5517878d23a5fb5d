#include "cmcrl/nn.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <string>

#include "cmcrl/data_io.hpp"
#include "cmcrl/error.hpp"

namespace cmcrl::nn {

namespace {

std::atomic<uint64_t> g_sn_zero_guard{0};

std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace

void copy_values(Tensor& dst, const Tensor& src, const std::string& name) {
  if (dst.shape() != src.shape()) {
    throw FormatError("state tensor \"" + name + "\" has shape " + shape_str(src.shape()) +
                      ", model expects " + shape_str(dst.shape()));
  }
  if (dst.dtype() != src.dtype()) {
    throw FormatError("state tensor \"" + name + "\" has dtype " +
                      std::string(dtype_name(src.dtype())) + ", model expects " +
                      dtype_name(dst.dtype()));
  }
  if (dst.dtype() == Dtype::F32) {
    std::memcpy(dst.data<float>(), src.data<float>(), sizeof(float) * static_cast<size_t>(dst.numel()));
  } else {
    std::memcpy(dst.data<double>(), src.data<double>(), sizeof(double) * static_cast<size_t>(dst.numel()));
  }
}

Tensor init_uniform_fanin(Shape shape, int64_t fan_in, Rng& rng, Dtype dt, bool requires_grad) {
  if (fan_in <= 0) throw ContractError("init_uniform_fanin: fan_in must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), -bound, bound, rng, dt, requires_grad);
}

void state_save(const ParamList& state, Checkpoint& ckpt, const std::string& prefix) {
  for (const auto& list : {&state.params, &state.buffers}) {
    for (const auto& entry : *list) {
      ckpt.tensors[prefix.empty() ? entry.name : prefix + "." + entry.name] = entry.value.clone();
    }
  }
}

void state_load(ParamList& state, const Checkpoint& ckpt, const std::string& prefix) {
  std::vector<std::string> names;
  for (const auto& list : {&state.params, &state.buffers}) {
    for (const auto& entry : *list) {
      names.push_back(prefix.empty() ? entry.name : prefix + "." + entry.name);
    }
  }
  ckpt.require_all(names);
  size_t i = 0;
  for (auto* list : {&state.params, &state.buffers}) {
    for (auto& entry : *list) {
      copy_values(entry.value, ckpt.require(names[i]), names[i]);
      ++i;
    }
  }
}

// ---------------------------------------------------------------------------
// Plain layers
// ---------------------------------------------------------------------------

void Linear::init(int64_t in, int64_t out, Rng& rng, Dtype dt, bool with_bias) {
  w = init_uniform_fanin({out, in}, in, rng, dt);
  if (with_bias) b = init_uniform_fanin({out}, in, rng, dt);
}

void Linear::collect(ParamList& out, const std::string& prefix) {
  out.params.push_back({join(prefix, "w"), w});
  if (b.defined()) out.params.push_back({join(prefix, "b"), b});
}

void Conv2d::init(int64_t cin, int64_t cout, int64_t k, int stride_, int pad_, Rng& rng, Dtype dt,
                  bool with_bias) {
  stride = stride_;
  pad = pad_;
  const int64_t fan_in = cin * k * k;
  w = init_uniform_fanin({cout, cin, k, k}, fan_in, rng, dt);
  if (with_bias) b = init_uniform_fanin({cout}, fan_in, rng, dt);
}

void Conv2d::collect(ParamList& out, const std::string& prefix) {
  out.params.push_back({join(prefix, "w"), w});
  if (b.defined()) out.params.push_back({join(prefix, "b"), b});
}

void BatchNorm2d::init(int64_t channels, Dtype dt) {
  gamma = Tensor::full({channels}, 1.0, dt).set_requires_grad(true);
  beta = Tensor::zeros({channels}, dt, true);
  running_mean = Tensor::zeros({channels}, dt);
  running_var = Tensor::full({channels}, 1.0, dt);
}

void BatchNorm2d::collect(ParamList& out, const std::string& prefix) {
  out.params.push_back({join(prefix, "gamma"), gamma});
  out.params.push_back({join(prefix, "beta"), beta});
  out.buffers.push_back({join(prefix, "running_mean"), running_mean});
  out.buffers.push_back({join(prefix, "running_var"), running_var});
}

// ---------------------------------------------------------------------------
// Spectral normalization
// ---------------------------------------------------------------------------

uint64_t spectral_zero_guard_count() { return g_sn_zero_guard.load(); }

namespace {

// w / (sigma_graph + eps) where sigma_graph = u_row . w2d . v_col enters the
// autodiff graph; gradients reach w through the numerator and through sigma.
Tensor divide_by_sigma(const Tensor& w, const Tensor& u_row, const Tensor& v_col) {
  const int64_t out_dim = w.dim(0);
  Tensor w2d = reshape(w, {out_dim, w.numel() / out_dim});
  Tensor sigma_t = matmul(matmul(u_row, w2d), v_col);
  return mul_scalar_tensor(w, reciprocal(add_scalar(sigma_t, 1e-12)));
}

void check_weight_rank(const Tensor& w) {
  if (w.rank() < 2) {
    throw DimensionError("spectral normalization: weight must have rank >= 2, got " +
                         shape_str(w.shape()));
  }
}

}  // namespace

SpectralResult spectral_normalize(const Tensor& w, const Tensor& u, int n_power_iter) {
  check_weight_rank(w);
  if (n_power_iter < 1) throw ContractError("spectral_normalize: need at least one power iteration");
  const int64_t out_dim = w.dim(0);
  const int64_t rest = w.numel() / out_dim;
  if (u.rank() != 1 || u.dim(0) != out_dim) {
    throw DimensionError("spectral_normalize: u must have shape (" + std::to_string(out_dim) +
                         "), got " + shape_str(u.shape()));
  }

  // Power iteration on plain f64 copies; u and v enter the graph as constants.
  std::vector<double> wv(static_cast<size_t>(w.numel()));
  for (int64_t i = 0; i < w.numel(); ++i) wv[static_cast<size_t>(i)] = w.value_at(i);
  std::vector<double> uv(static_cast<size_t>(out_dim));
  for (int64_t i = 0; i < out_dim; ++i) uv[static_cast<size_t>(i)] = u.value_at(i);
  std::vector<double> vv(static_cast<size_t>(rest), 0.0);

  auto normalize = [](std::vector<double>& x) {
    double n = 0.0;
    for (double v : x) n += v * v;
    n = std::sqrt(n);
    if (n < 1e-12) g_sn_zero_guard.fetch_add(1);
    const double inv = 1.0 / (n + 1e-12);
    for (double& v : x) v *= inv;
  };

  for (int it = 0; it < n_power_iter; ++it) {
    for (int64_t r = 0; r < rest; ++r) {
      double acc = 0.0;
      for (int64_t o = 0; o < out_dim; ++o) acc += wv[static_cast<size_t>(o * rest + r)] * uv[static_cast<size_t>(o)];
      vv[static_cast<size_t>(r)] = acc;
    }
    normalize(vv);
    for (int64_t o = 0; o < out_dim; ++o) {
      double acc = 0.0;
      const double* row = wv.data() + o * rest;
      for (int64_t r = 0; r < rest; ++r) acc += row[r] * vv[static_cast<size_t>(r)];
      uv[static_cast<size_t>(o)] = acc;
    }
    normalize(uv);
  }

  double sigma = 0.0;
  for (int64_t o = 0; o < out_dim; ++o) {
    double acc = 0.0;
    const double* row = wv.data() + o * rest;
    for (int64_t r = 0; r < rest; ++r) acc += row[r] * vv[static_cast<size_t>(r)];
    sigma += uv[static_cast<size_t>(o)] * acc;
  }

  const Dtype dt = w.dtype();
  Tensor u_row = Tensor::zeros({1, out_dim}, dt);
  Tensor v_col = Tensor::zeros({rest, 1}, dt);
  for (int64_t o = 0; o < out_dim; ++o) u_row.set_value_at(o, uv[static_cast<size_t>(o)]);
  for (int64_t r = 0; r < rest; ++r) v_col.set_value_at(r, vv[static_cast<size_t>(r)]);

  SpectralResult res;
  res.w_bar = divide_by_sigma(w, u_row, v_col);
  res.u_next = Tensor::zeros({out_dim}, dt);
  res.v_next = Tensor::zeros({rest}, dt);
  for (int64_t o = 0; o < out_dim; ++o) res.u_next.set_value_at(o, uv[static_cast<size_t>(o)]);
  for (int64_t r = 0; r < rest; ++r) res.v_next.set_value_at(r, vv[static_cast<size_t>(r)]);
  res.sigma = sigma;
  return res;
}

Tensor spectral_normalize_frozen(const Tensor& w, const Tensor& u, const Tensor& v) {
  check_weight_rank(w);
  const int64_t out_dim = w.dim(0);
  const int64_t rest = w.numel() / out_dim;
  if (u.rank() != 1 || u.dim(0) != out_dim || v.rank() != 1 || v.dim(0) != rest) {
    throw DimensionError("spectral_normalize_frozen: expected u (" + std::to_string(out_dim) +
                         ") and v (" + std::to_string(rest) + "), got u " + shape_str(u.shape()) +
                         ", v " + shape_str(v.shape()));
  }
  return divide_by_sigma(w, reshape(u, {1, out_dim}), reshape(v, {rest, 1}));
}

void SpectralNorm::init(const Tensor& w, Rng& rng) {
  check_weight_rank(w);
  const int64_t out_dim = w.dim(0);
  const int64_t rest = w.numel() / out_dim;
  const Dtype dt = w.dtype();
  u = Tensor::normal({out_dim}, 0.0, 1.0, rng, dt);
  double n = 0.0;
  for (int64_t i = 0; i < out_dim; ++i) n += u.value_at(i) * u.value_at(i);
  n = std::sqrt(n) + 1e-12;
  for (int64_t i = 0; i < out_dim; ++i) u.set_value_at(i, u.value_at(i) / n);

  // v = normalize(w^T u) so the frozen path is meaningful before training.
  v = Tensor::zeros({rest}, dt);
  double vn = 0.0;
  for (int64_t r = 0; r < rest; ++r) {
    double acc = 0.0;
    for (int64_t o = 0; o < out_dim; ++o) acc += w.value_at(o * rest + r) * u.value_at(o);
    v.set_value_at(r, acc);
    vn += acc * acc;
  }
  vn = std::sqrt(vn);
  if (vn < 1e-12) g_sn_zero_guard.fetch_add(1);
  for (int64_t r = 0; r < rest; ++r) v.set_value_at(r, v.value_at(r) / (vn + 1e-12));
}

Tensor SpectralNorm::apply(const Tensor& w, bool update) {
  if (!enabled) return w;
  if (update) {
    SpectralResult res = spectral_normalize(w, u, 1);
    last_sigma = res.sigma;
    for (int64_t i = 0; i < u.numel(); ++i) u.set_value_at(i, res.u_next.value_at(i));
    for (int64_t i = 0; i < v.numel(); ++i) v.set_value_at(i, res.v_next.value_at(i));
    return res.w_bar;
  }
  const int64_t out_dim = w.dim(0);
  const int64_t rest = w.numel() / out_dim;
  double sigma = 0.0;
  for (int64_t o = 0; o < out_dim; ++o) {
    double acc = 0.0;
    for (int64_t r = 0; r < rest; ++r) acc += w.value_at(o * rest + r) * v.value_at(r);
    sigma += u.value_at(o) * acc;
  }
  last_sigma = sigma;
  return spectral_normalize_frozen(w, u, v);
}

void SpectralNorm::collect(ParamList& out, const std::string& prefix) {
  out.buffers.push_back({join(prefix, "u"), u});
  out.buffers.push_back({join(prefix, "v"), v});
}

void SNLinear::init(int64_t in, int64_t out, Rng& rng, Dtype dt, bool with_bias) {
  lin.init(in, out, rng, dt, with_bias);
  sn.init(lin.w, rng);
}

void SNLinear::collect(ParamList& out, const std::string& prefix) {
  lin.collect(out, prefix);
  sn.collect(out, prefix);
}

void SNConv2d::init(int64_t cin, int64_t cout, int64_t k, int stride, int pad, Rng& rng, Dtype dt,
                    bool with_bias) {
  conv.init(cin, cout, k, stride, pad, rng, dt, with_bias);
  sn.init(conv.w, rng);
}

void SNConv2d::collect(ParamList& out, const std::string& prefix) {
  conv.collect(out, prefix);
  sn.collect(out, prefix);
}

// ---------------------------------------------------------------------------
// Self-attention
// ---------------------------------------------------------------------------

void SelfAttention::init(int64_t channels, Rng& rng, Dtype dt, bool spectral) {
  if (channels % 8 != 0) {
    throw ContractError("self_attention: channels must be divisible by 8, got " +
                        std::to_string(channels));
  }
  use_sn = spectral;
  f.init(channels, channels / 8, 1, 1, 0, rng, dt, false);
  g.init(channels, channels / 8, 1, 1, 0, rng, dt, false);
  h.init(channels, channels / 2, 1, 1, 0, rng, dt, false);
  o.init(channels / 2, channels, 1, 1, 0, rng, dt, false);
  f.sn.enabled = g.sn.enabled = h.sn.enabled = o.sn.enabled = spectral;
  gamma = Tensor::zeros({1}, dt, true);
}

Tensor SelfAttention::forward(const Tensor& x, bool update_sn, Tensor* attn_out) {
  if (x.rank() != 4) {
    throw DimensionError("self_attention: expected (B,C,H,W) input, got " + shape_str(x.shape()));
  }
  const int64_t batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
  if (channels != f.conv.w.dim(1)) {
    throw DimensionError("self_attention: input has " + std::to_string(channels) +
                         " channels, block was built for " + std::to_string(f.conv.w.dim(1)));
  }
  const int64_t positions = height * width;

  Tensor queries = reshape(f.forward(x, update_sn), {batch, channels / 8, positions});
  Tensor keys = reshape(g.forward(x, update_sn), {batch, channels / 8, positions});
  Tensor values = reshape(h.forward(x, update_sn), {batch, channels / 2, positions});

  // logits[b][i][j] = query_i . key_j; softmax over key positions j.
  Tensor attn = softmax_lastdim(bmm(queries, keys, /*trans_a=*/true, /*trans_b=*/false));
  if (attn_out != nullptr) *attn_out = attn;

  Tensor mixed = bmm(values, attn, /*trans_a=*/false, /*trans_b=*/true);
  Tensor projected = o.forward(reshape(mixed, {batch, channels / 2, height, width}), update_sn);
  return add(x, mul_scalar_tensor(projected, gamma));
}

void SelfAttention::collect(ParamList& out, const std::string& prefix) {
  f.collect(out, join(prefix, "f"));
  g.collect(out, join(prefix, "g"));
  h.collect(out, join(prefix, "h"));
  o.collect(out, join(prefix, "o"));
  out.params.push_back({join(prefix, "gamma"), gamma});
}

}  // namespace cmcrl::nn
