#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmcrl/nn.hpp"

namespace cmcrl {

// Two 3x3 convs with batch norm and a skip connection; the skip gets a 1x1
// projection whenever channel count or stride changes.
struct BasicBlock {
  nn::Conv2d conv1, conv2, proj;
  nn::BatchNorm2d bn1, bn2, proj_bn;
  bool has_proj = false;
  void init(int64_t cin, int64_t cout, int stride, Rng& rng, Dtype dt);
  Tensor forward(const Tensor& x, bool training);
  void collect(nn::ParamList& out, const std::string& prefix);
};

// Residual convolutional encoder: stride-2 stem into four stages of two
// blocks at widths {w, 2w, 4w, 8w} (stages 2-4 downsample), global average
// pool to a d_e = 8w feature vector. Audio (3x128x44) and image (3xSxS)
// encoders are two instances of this; they never share parameters.
struct Encoder {
  nn::Conv2d stem;
  nn::BatchNorm2d stem_bn;
  std::vector<BasicBlock> blocks;
  int64_t feature_dim = 0;  // d_e

  void init(int64_t d_e, Rng& rng, Dtype dt);
  // (B,3,H,W) -> (B,d_e)
  Tensor forward(const Tensor& x, bool training);
  void collect(nn::ParamList& out, const std::string& prefix);
};

// Two-layer perceptron d_e -> d_e -> d_p with a ReLU between; maps encoder
// features into the contrastive embedding space (no normalization here).
struct ProjectionHead {
  nn::Linear fc1, fc2;
  void init(int64_t d_e, int64_t d_p, Rng& rng, Dtype dt);
  Tensor forward(const Tensor& x);
  void collect(nn::ParamList& out, const std::string& prefix);
};

}  // namespace cmcrl
