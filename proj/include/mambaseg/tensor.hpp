#pragma once

#include <Eigen/Core>

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace mambaseg {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

std::string to_string(const Shape& shape);
Index shape_numel(const Shape& shape);

template <typename Scalar>
struct TensorImpl;

/// Backward record for one op output. `apply` reads the output gradient and
/// accumulates into the gradient buffers of whichever inputs require grad.
template <typename Scalar>
struct GradFn {
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl<Scalar>>> inputs;
  std::function<void(const TensorImpl<Scalar>& out)> apply;
};

template <typename Scalar>
struct TensorImpl {
  Shape shape;
  Array<Scalar> data;
  Array<Scalar> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<GradFn<Scalar>> grad_fn;

  bool is_leaf() const { return grad_fn == nullptr; }

  Array<Scalar>& grad_buffer() {
    if (grad.size() != data.size()) grad = Array<Scalar>::Zero(data.size());
    return grad;
  }
};

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor of rank 1-4 with reverse-mode autodiff.
///
/// A Tensor is a shared handle: copies alias the same storage and graph
/// node. Use detach() for an independent value copy.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;

  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Array<Scalar> data);

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, Scalar value);
  static Tensor from_values(Shape shape, std::initializer_list<Scalar> values);
  static Tensor scalar(Scalar value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  /// Extent along `axis`; negative axes count from the end.
  Index dim(int axis) const;
  Index numel() const;

  const Array<Scalar>& data() const;
  Array<Scalar>& mutable_data();
  Scalar item() const;
  Scalar at(Index n, Index c, Index h, Index w) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const;
  const Array<Scalar>& grad() const;
  void zero_grad();

  /// Accumulates d(this)/d(leaf) into every reachable leaf that requires
  /// grad. Repeated calls accumulate; the graph is retained.
  void backward() const;

  Tensor detach() const;

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape(), data().template cast<Other>());
  }

  const std::shared_ptr<TensorImpl<Scalar>>& impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<TensorImpl<Scalar>> impl);

 private:
  std::shared_ptr<TensorImpl<Scalar>> impl_;
};

namespace detail {

template <typename Scalar>
bool any_requires_grad(std::initializer_list<const Tensor<Scalar>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

/// Attaches a backward record to `out` when grad mode is on and at least one
/// input requires grad. `apply` receives the output impl.
template <typename Scalar, typename Fn>
void record(Tensor<Scalar>& out, const char* name, std::initializer_list<const Tensor<Scalar>*> inputs,
            Fn&& apply) {
  if (!any_requires_grad<Scalar>(inputs)) return;
  auto fn = std::make_shared<GradFn<Scalar>>();
  fn->name = name;
  for (const auto* t : inputs) {
    if (t->defined()) fn->inputs.push_back(t->impl());
  }
  fn->apply = std::forward<Fn>(apply);
  out.impl()->grad_fn = std::move(fn);
  out.impl()->requires_grad = true;
}

/// Variant of record() for a runtime-sized input list.
template <typename Scalar, typename Fn>
void record_many(Tensor<Scalar>& out, const char* name, const std::vector<Tensor<Scalar>>& inputs, Fn&& apply) {
  if (!grad_enabled()) return;
  bool any = false;
  for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
  if (!any) return;
  auto fn = std::make_shared<GradFn<Scalar>>();
  fn->name = name;
  for (const auto& t : inputs) fn->inputs.push_back(t.impl());
  fn->apply = std::forward<Fn>(apply);
  out.impl()->grad_fn = std::move(fn);
  out.impl()->requires_grad = true;
}

template <typename Scalar>
inline bool wants_grad(const std::shared_ptr<TensorImpl<Scalar>>& impl) {
  return impl && impl->requires_grad;
}

void check_finite_debug(const char* op, const float* data, Index n);
void check_finite_debug(const char* op, const double* data, Index n);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace mambaseg
