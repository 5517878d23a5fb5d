#pragma once

#include <cstdint>
#include <vector>

#include "cmcrl/tensor.hpp"

namespace cmcrl {

// Elementwise (same shape unless noted). Every op has a registered backward.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);
// s - x
Tensor rsub_scalar(double s, const Tensor& x);
// y = x * s[0] where s is a (possibly learned) scalar tensor.
Tensor mul_scalar_tensor(const Tensor& x, const Tensor& s);
Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double negative_slope);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
// Domain-checked: x must be strictly positive.
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
// Domain-checked power: x < 0 requires integral p; x == 0 requires p >= 0.
Tensor pow(const Tensor& x, double p);
Tensor reciprocal(const Tensor& x);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Reduce the last axis; output drops that axis (rank >= 1).
Tensor sum_lastdim(const Tensor& x);
Tensor max_lastdim(const Tensor& x);
// Max-shift stabilized.
Tensor softmax_lastdim(const Tensor& x);
Tensor logsumexp_lastdim(const Tensor& x);

// Shape.
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const Tensor& a, const Tensor& b);

// Matrix products (row-major).
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
              bool trans_b = false);
// Batched 3D variant: (B,m,k) x (B,k,n).
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false,
           bool trans_b = false);

// y = x Wᵀ + bias; x: (B,din), W: (dout,din), bias: (dout) or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// x: (B,Cin,H,W), kernels: (Cout,Cin,k,k), zero padding.
Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias,
              int stride, int pad);

// Per-channel batch statistics in training mode, running statistics in eval
// mode; running buffers are updated in place during training.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    double momentum = 0.1, double eps = 1e-5);

Tensor upsample_nearest2x(const Tensor& x);
Tensor avg_pool2x(const Tensor& x);
// (B,C,H,W) -> (B,C)
Tensor mean_hw(const Tensor& x);
Tensor sum_hw(const Tensor& x);

// Rows of a (R,D) matrix projected to the unit sphere. A zero row trips the
// epsilon guard (1e-12) and bumps the flag counter instead of dividing by 0.
Tensor l2_normalize_rows(const Tensor& x);
uint64_t l2_normalize_zero_guard_count();

// out[b] = x[b, index[b]]
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& index);

// Mean softmax cross-entropy over the batch; logits: (B,K).
Tensor cross_entropy_with_logits(const Tensor& logits,
                                 const std::vector<int64_t>& labels);

}  // namespace cmcrl
