#include "cmcrl/encoder.hpp"

#include "cmcrl/error.hpp"
#include "cmcrl/ops.hpp"

namespace cmcrl {

void BasicBlock::init(int64_t cin, int64_t cout, int stride, Rng& rng, Dtype dt) {
  conv1.init(cin, cout, 3, stride, 1, rng, dt, /*with_bias=*/false);
  conv2.init(cout, cout, 3, 1, 1, rng, dt, /*with_bias=*/false);
  bn1.init(cout, dt);
  bn2.init(cout, dt);
  has_proj = (cin != cout || stride != 1);
  if (has_proj) {
    proj.init(cin, cout, 1, stride, 0, rng, dt, /*with_bias=*/false);
    proj_bn.init(cout, dt);
  }
}

Tensor BasicBlock::forward(const Tensor& x, bool training) {
  Tensor y = relu(bn1.forward(conv1.forward(x), training));
  y = bn2.forward(conv2.forward(y), training);
  Tensor skip = has_proj ? proj_bn.forward(proj.forward(x), training) : x;
  return relu(add(y, skip));
}

void BasicBlock::collect(nn::ParamList& out, const std::string& prefix) {
  conv1.collect(out, prefix + ".conv1");
  bn1.collect(out, prefix + ".bn1");
  conv2.collect(out, prefix + ".conv2");
  bn2.collect(out, prefix + ".bn2");
  if (has_proj) {
    proj.collect(out, prefix + ".proj");
    proj_bn.collect(out, prefix + ".proj_bn");
  }
}

void Encoder::init(int64_t d_e, Rng& rng, Dtype dt) {
  if (d_e < 8 || d_e % 8 != 0) {
    throw ContractError("encoder: feature dim must be a positive multiple of 8, got " +
                        std::to_string(d_e));
  }
  feature_dim = d_e;
  const int64_t w = d_e / 8;
  stem.init(3, w, 3, /*stride=*/2, /*pad=*/1, rng, dt, /*with_bias=*/false);
  stem_bn.init(w, dt);
  blocks.clear();
  int64_t cin = w;
  for (int stage = 0; stage < 4; ++stage) {
    const int64_t cout = w << stage;
    const int first_stride = stage == 0 ? 1 : 2;
    blocks.emplace_back();
    blocks.back().init(cin, cout, first_stride, rng, dt);
    blocks.emplace_back();
    blocks.back().init(cout, cout, 1, rng, dt);
    cin = cout;
  }
}

Tensor Encoder::forward(const Tensor& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != 3) {
    throw DimensionError("encoder: expected (B,3,H,W) input, got " + shape_str(x.shape()));
  }
  Tensor y = relu(stem_bn.forward(stem.forward(x), training));
  for (auto& block : blocks) y = block.forward(y, training);
  return mean_hw(y);
}

void Encoder::collect(nn::ParamList& out, const std::string& prefix) {
  stem.collect(out, prefix + ".stem");
  stem_bn.collect(out, prefix + ".stem_bn");
  for (size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect(out, prefix + ".block" + std::to_string(i));
  }
}

void ProjectionHead::init(int64_t d_e, int64_t d_p, Rng& rng, Dtype dt) {
  fc1.init(d_e, d_e, rng, dt);
  fc2.init(d_e, d_p, rng, dt);
}

Tensor ProjectionHead::forward(const Tensor& x) { return fc2.forward(relu(fc1.forward(x))); }

void ProjectionHead::collect(nn::ParamList& out, const std::string& prefix) {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

}  // namespace cmcrl
