#include "cmcrl/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace cmcrl {

namespace {
std::atomic<uint64_t> g_next_node_id{1};
thread_local bool g_no_grad = false;
}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

void TensorImpl::ensure_grad() {
  if (dtype == Dtype::F32) {
    if (grad32.empty()) grad32.assign(data32.size(), 0.0f);
  } else {
    if (grad64.empty()) grad64.assign(data64.size(), 0.0);
  }
}

NoGradGuard::NoGradGuard() : prev_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = prev_; }
bool NoGradGuard::active() { return g_no_grad; }

namespace {

std::shared_ptr<TensorImpl> new_impl(Shape shape, Dtype dt) {
  for (int64_t d : shape) {
    if (d <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = dt;
  impl->node_id = g_next_node_id.fetch_add(1);
  int64_t n = impl->numel();
  if (dt == Dtype::F32) {
    impl->data32.assign(static_cast<size_t>(n), 0.0f);
  } else {
    impl->data64.assign(static_cast<size_t>(n), 0.0);
  }
  return impl;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, Dtype dt, bool requires_grad) {
  Tensor t(new_impl(std::move(shape), dt));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::full(Shape shape, double value, Dtype dt) {
  Tensor t(new_impl(std::move(shape), dt));
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    auto& b = t.node()->buf<T>();
    std::fill(b.begin(), b.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::scalar(double value, Dtype dt) { return full({1}, value, dt); }

Tensor Tensor::from_f32(Shape shape, std::vector<float> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw DimensionError("from_f32: " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto impl = new_impl(std::move(shape), Dtype::F32);
  impl->data32 = std::move(values);
  return Tensor(impl);
}

Tensor Tensor::from_f64(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw DimensionError("from_f64: " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto impl = new_impl(std::move(shape), Dtype::F64);
  impl->data64 = std::move(values);
  return Tensor(impl);
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values,
                           Dtype dt) {
  return from_values(std::move(shape), std::vector<double>(values), dt);
}

Tensor Tensor::from_values(Shape shape, const std::vector<double>& values,
                           Dtype dt) {
  if (dt == Dtype::F64) return from_f64(std::move(shape), values);
  std::vector<float> v(values.begin(), values.end());
  return from_f32(std::move(shape), std::move(v));
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, Dtype dt,
                       bool requires_grad) {
  Tensor t(new_impl(std::move(shape), dt));
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : t.node()->buf<T>()) v = static_cast<T>(rng.uniform(lo, hi));
  });
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::normal(Shape shape, double mean, double stddev, Rng& rng,
                      Dtype dt, bool requires_grad) {
  Tensor t(new_impl(std::move(shape), dt));
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : t.node()->buf<T>()) v = static_cast<T>(rng.normal(mean, stddev));
  });
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor& Tensor::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const {
  return impl_ && (!impl_->grad32.empty() || !impl_->grad64.empty());
}

void Tensor::zero_grad() {
  if (!impl_) return;
  std::fill(impl_->grad32.begin(), impl_->grad32.end(), 0.0f);
  std::fill(impl_->grad64.begin(), impl_->grad64.end(), 0.0);
}

Tensor Tensor::grad() const {
  Tensor g(new_impl(impl_->shape, impl_->dtype));
  dispatch(impl_->dtype, [&](auto tag) {
    using T = decltype(tag);
    const auto& src = const_cast<TensorImpl*>(impl_.get())->gbuf<T>();
    if (!src.empty()) g.node()->buf<T>() = src;
  });
  return g;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() requires a scalar tensor, got " + shape_str(shape()));
  }
  return value_at(0);
}

double Tensor::value_at(int64_t i) const {
  return impl_->dtype == Dtype::F32 ? static_cast<double>(impl_->data32[static_cast<size_t>(i)])
                                    : impl_->data64[static_cast<size_t>(i)];
}

void Tensor::set_value_at(int64_t i, double v) {
  if (impl_->dtype == Dtype::F32) {
    impl_->data32[static_cast<size_t>(i)] = static_cast<float>(v);
  } else {
    impl_->data64[static_cast<size_t>(i)] = v;
  }
}

Tensor Tensor::clone() const {
  Tensor t(new_impl(impl_->shape, impl_->dtype));
  t.node()->data32 = impl_->data32;
  t.node()->data64 = impl_->data64;
  return t;
}

Tensor Tensor::astype(Dtype dt) const {
  if (dt == impl_->dtype) return clone();
  Tensor t(new_impl(impl_->shape, dt));
  int64_t n = numel();
  if (dt == Dtype::F64) {
    for (int64_t i = 0; i < n; ++i)
      t.node()->data64[static_cast<size_t>(i)] = impl_->data32[static_cast<size_t>(i)];
  } else {
    for (int64_t i = 0; i < n; ++i)
      t.node()->data32[static_cast<size_t>(i)] =
          static_cast<float>(impl_->data64[static_cast<size_t>(i)]);
  }
  return t;
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<size_t>(numel()));
  for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = value_at(i);
  return out;
}

bool Tensor::all_finite() const {
  bool ok = true;
  dispatch(impl_->dtype, [&](auto tag) {
    using T = decltype(tag);
    for (T v : const_cast<TensorImpl*>(impl_.get())->buf<T>()) {
      if (!std::isfinite(static_cast<double>(v))) {
        ok = false;
        break;
      }
    }
  });
  return ok;
}

void Tensor::backward() {
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got " + shape_str(shape()));
  }
  // Collect the reachable subgraph.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<TensorImpl*> stack{impl_.get()};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    TensorImpl* node = stack.back();
    stack.pop_back();
    order.push_back(node);
    for (auto& p : node->parents) {
      if (p->requires_grad && visited.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](TensorImpl* a, TensorImpl* b) { return a->node_id > b->node_id; });

  impl_->ensure_grad();
  if (impl_->dtype == Dtype::F32) {
    impl_->grad32[0] = 1.0f;
  } else {
    impl_->grad64[0] = 1.0;
  }
  for (TensorImpl* node : order) {
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
    }
  }
}

Tensor make_op_output(Shape shape, Dtype dt, const char* op_name,
                      std::vector<Tensor> parents,
                      std::function<void(TensorImpl&)> backward_fn) {
  Tensor out(new_impl(std::move(shape), dt));
  bool needs_grad = false;
  if (!NoGradGuard::active()) {
    for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
  }
  if (needs_grad) {
    out.node()->requires_grad = true;
    out.node()->op_name = op_name;
    out.node()->parents.reserve(parents.size());
    for (auto& p : parents) out.node()->parents.push_back(p.ptr());
    out.node()->backward_fn = std::move(backward_fn);
  }
  return out;
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ContractError(std::string(op) + ": mixed dtypes " + dtype_name(a.dtype()) +
                        " vs " + dtype_name(b.dtype()));
  }
}

}  // namespace cmcrl
