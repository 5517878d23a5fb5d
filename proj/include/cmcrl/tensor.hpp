#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "cmcrl/error.hpp"
#include "cmcrl/rng.hpp"

namespace cmcrl {

// Two numeric precisions: f32 for training throughput, f64 for the
// finite-difference and oracle suites.
enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

inline size_t dtype_size(Dtype dt) { return dt == Dtype::F32 ? 4 : 8; }
inline const char* dtype_name(Dtype dt) { return dt == Dtype::F32 ? "f32" : "f64"; }

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
  Shape shape;
  Dtype dtype = Dtype::F32;
  std::vector<float> data32;
  std::vector<double> data64;
  std::vector<float> grad32;
  std::vector<double> grad64;
  bool requires_grad = false;

  // Autodiff node. Node ids are assigned from a strictly increasing counter
  // at construction, so descending id order is a valid reverse topological
  // order of any graph.
  uint64_t node_id = 0;
  const char* op_name = "leaf";
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  int64_t numel() const { return shape_numel(shape); }

  template <class T>
  std::vector<T>& buf();
  template <class T>
  std::vector<T>& gbuf();

  void ensure_grad();
  void drop_graph() {
    parents.clear();
    backward_fn = nullptr;
  }
};

template <>
inline std::vector<float>& TensorImpl::buf<float>() { return data32; }
template <>
inline std::vector<double>& TensorImpl::buf<double>() { return data64; }
template <>
inline std::vector<float>& TensorImpl::gbuf<float>() { return grad32; }
template <>
inline std::vector<double>& TensorImpl::gbuf<double>() { return grad64; }

// Dense n-dimensional array handle with an optional autodiff node. Handles
// are value-like (cheap shared copies of one buffer); ops build a DAG whose
// backward pass populates grad for every requires_grad leaf.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, Dtype dt = Dtype::F32,
                      bool requires_grad = false);
  static Tensor full(Shape shape, double value, Dtype dt = Dtype::F32);
  static Tensor scalar(double value, Dtype dt = Dtype::F32);
  static Tensor from_f32(Shape shape, std::vector<float> values);
  static Tensor from_f64(Shape shape, std::vector<double> values);
  // Test convenience: values given as doubles, stored at dt.
  static Tensor from_values(Shape shape, std::initializer_list<double> values,
                            Dtype dt = Dtype::F32);
  static Tensor from_values(Shape shape, const std::vector<double>& values,
                            Dtype dt = Dtype::F32);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                        Dtype dt = Dtype::F32, bool requires_grad = false);
  static Tensor normal(Shape shape, double mean, double stddev, Rng& rng,
                       Dtype dt = Dtype::F32, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim(size_t i) const { return impl_->shape[i]; }
  size_t rank() const { return impl_->shape.size(); }
  int64_t numel() const { return impl_->numel(); }
  Dtype dtype() const { return impl_->dtype; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool value);

  template <class T>
  T* data() { return impl_->buf<T>().data(); }
  template <class T>
  const T* data() const { return impl_->buf<T>().data(); }
  template <class T>
  T* grad_data() {
    impl_->ensure_grad();
    return impl_->gbuf<T>().data();
  }

  bool has_grad() const;
  void zero_grad();
  // Copy of the gradient as a grad-free tensor.
  Tensor grad() const;

  // Scalar read (any dtype) for tests and logging.
  double item() const;
  double value_at(int64_t linear_index) const;
  void set_value_at(int64_t linear_index, double value);

  // Deep copy with no graph attached.
  Tensor clone() const;
  // Same values, cut from the graph (stops gradient flow).
  Tensor detach() const { return clone(); }
  Tensor astype(Dtype dt) const;
  std::vector<double> to_vector() const;

  bool all_finite() const;

  // Reverse-mode sweep from a scalar. Gradients accumulate additively across
  // fan-out; call zero_grad on leaves between steps.
  void backward();

  TensorImpl* node() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Scoped suppression of graph construction (used for power iterations,
// frozen-encoder inference, and finite-difference evaluations).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  static bool active();

 private:
  bool prev_;
};

// Dispatches f on the runtime dtype with a zero-initialized value of the
// static type as tag: f(float{}) or f(double{}).
template <class F>
decltype(auto) dispatch(Dtype dt, F&& f) {
  if (dt == Dtype::F32) return f(float{});
  return f(double{});
}

// Internal helper for op implementations: allocates the output, wires
// parents, and registers the backward closure when gradients are required.
Tensor make_op_output(Shape shape, Dtype dt, const char* op_name,
                      std::vector<Tensor> parents,
                      std::function<void(TensorImpl&)> backward_fn);

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op);

}  // namespace cmcrl
