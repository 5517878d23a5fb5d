#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmcrl/tensor.hpp"

namespace cmcrl {

// v ← momentum·v + grad + weight_decay·param; param ← param − lr·v.
// Refuses the update (NumericalError) if the gradient is non-finite.
void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr,
              double momentum, double weight_decay);

// Standard bias-corrected Adam; step is the 1-based count of this update.
void adam_step(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v,
               int64_t step, double lr, double beta1, double beta2, double eps);

// lr = base_lr · factor^(number of milestones ≤ epoch); boundary inclusive.
double lr_schedule(int64_t epoch, double base_lr,
                   const std::vector<int64_t>& milestones, double factor);

// Named parameter slot shared by optimizers and checkpoints.
struct NamedParam {
  std::string name;
  Tensor value;
};

class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<NamedParam> params, double lr, double momentum,
               double weight_decay);

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  // Applies one update from each parameter's accumulated gradient.
  void step();
  void zero_grad();

  std::vector<NamedParam>& params() { return params_; }
  // Momentum buffers, index-aligned with params(); exposed for checkpoints.
  std::vector<Tensor>& velocities() { return velocity_; }

 private:
  std::vector<NamedParam> params_;
  std::vector<Tensor> velocity_;
  double lr_, momentum_, weight_decay_;
};

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<NamedParam> params, double lr, double beta1,
                double beta2, double eps = 1e-8);

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step();
  void zero_grad();

  std::vector<NamedParam>& params() { return params_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  int64_t step_count() const { return step_count_; }
  void set_step_count(int64_t t) { step_count_ = t; }

 private:
  std::vector<NamedParam> params_;
  std::vector<Tensor> m_, v_;
  int64_t step_count_ = 0;
  double lr_, beta1_, beta2_, eps_;
};

}  // namespace cmcrl
