#include "cmcrl/optim.hpp"

#include <cmath>

namespace cmcrl {

namespace {

void check_update_inputs(const Tensor& param, const Tensor& grad, const Tensor& state,
                         const char* op) {
  if (param.shape() != grad.shape() || param.shape() != state.shape()) {
    throw DimensionError(std::string(op) + ": param " + shape_str(param.shape()) + ", grad " +
                         shape_str(grad.shape()) + ", state " + shape_str(state.shape()) +
                         " must agree");
  }
  if (!grad.all_finite()) {
    throw NumericalError(std::string(op) + ": non-finite gradient, update refused");
  }
}

}  // namespace

void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr,
              double momentum, double weight_decay) {
  check_update_inputs(param, grad, velocity, "sgd_step");
  dispatch(param.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* p = param.data<T>();
    const T* g = grad.data<T>();
    T* v = velocity.data<T>();
    const T mom = static_cast<T>(momentum);
    const T wd = static_cast<T>(weight_decay);
    const T step = static_cast<T>(lr);
    for (int64_t i = 0; i < param.numel(); ++i) {
      v[i] = mom * v[i] + g[i] + wd * p[i];
      p[i] -= step * v[i];
    }
  });
}

void adam_step(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, int64_t step,
               double lr, double beta1, double beta2, double eps) {
  check_update_inputs(param, grad, m, "adam_step");
  if (step < 1) throw ContractError("adam_step: step counter must be >= 1");
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  dispatch(param.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* p = param.data<T>();
    const T* g = grad.data<T>();
    T* mv = m.data<T>();
    T* vv = v.data<T>();
    const T b1 = static_cast<T>(beta1);
    const T b2 = static_cast<T>(beta2);
    for (int64_t i = 0; i < param.numel(); ++i) {
      mv[i] = b1 * mv[i] + (T(1) - b1) * g[i];
      vv[i] = b2 * vv[i] + (T(1) - b2) * g[i] * g[i];
      double mhat = static_cast<double>(mv[i]) / bc1;
      double vhat = static_cast<double>(vv[i]) / bc2;
      p[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
    }
  });
}

double lr_schedule(int64_t epoch, double base_lr, const std::vector<int64_t>& milestones,
                   double factor) {
  for (size_t i = 1; i < milestones.size(); ++i) {
    if (milestones[i] <= milestones[i - 1]) {
      throw ContractError("lr_schedule: milestones must be strictly increasing");
    }
  }
  double lr = base_lr;
  for (int64_t ms : milestones) {
    if (ms <= epoch) lr *= factor;
  }
  return lr;
}

SgdOptimizer::SgdOptimizer(std::vector<NamedParam> params, double lr, double momentum,
                           double weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.reserve(params_.size());
  for (auto& p : params_) {
    velocity_.push_back(Tensor::zeros(p.value.shape(), p.value.dtype()));
  }
}

void SgdOptimizer::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor g = params_[i].value.grad();
    sgd_step(params_[i].value, g, velocity_[i], lr_, momentum_, weight_decay_);
  }
}

void SgdOptimizer::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

AdamOptimizer::AdamOptimizer(std::vector<NamedParam> params, double lr, double beta1,
                             double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto& p : params_) {
    m_.push_back(Tensor::zeros(p.value.shape(), p.value.dtype()));
    v_.push_back(Tensor::zeros(p.value.shape(), p.value.dtype()));
  }
}

void AdamOptimizer::step() {
  ++step_count_;
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor g = params_[i].value.grad();
    adam_step(params_[i].value, g, m_[i], v_[i], step_count_, lr_, beta1_, beta2_, eps_);
  }
}

void AdamOptimizer::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

}  // namespace cmcrl
