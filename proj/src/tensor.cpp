#include "mambaseg/tensor.hpp"

#include "mambaseg/errors.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace mambaseg {

namespace {
thread_local bool g_grad_enabled = true;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 4) {
    throw DimensionError("tensor rank must be 1-4, got shape " + to_string(shape));
  }
  for (Index d : shape) {
    if (d < 0) throw DimensionError("negative extent in shape " + to_string(shape));
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape) : Tensor(shape, Array<Scalar>::Zero(shape_numel(shape))) {}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Array<Scalar> data) : impl_(std::make_shared<TensorImpl<Scalar>>()) {
  validate_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + to_string(shape) + " holds " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(Shape shape) {
  return Tensor(std::move(shape));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::ones(Shape shape) {
  return full(std::move(shape), Scalar(1));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(Shape shape, Scalar value) {
  const Index n = shape_numel(shape);
  return Tensor(std::move(shape), Array<Scalar>::Constant(n, value));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_values(Shape shape, std::initializer_list<Scalar> values) {
  Array<Scalar> data(static_cast<Index>(values.size()));
  Index i = 0;
  for (Scalar v : values) data(i++) = v;
  return Tensor(std::move(shape), std::move(data));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value) {
  return full({1}, value);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::wrap(std::shared_ptr<TensorImpl<Scalar>> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

template <typename Scalar>
const Shape& Tensor<Scalar>::shape() const {
  return impl_->shape;
}

template <typename Scalar>
int Tensor<Scalar>::rank() const {
  return static_cast<int>(impl_->shape.size());
}

template <typename Scalar>
Index Tensor<Scalar>::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(a)];
}

template <typename Scalar>
Index Tensor<Scalar>::numel() const {
  return impl_->data.size();
}

template <typename Scalar>
const Array<Scalar>& Tensor<Scalar>::data() const {
  return impl_->data;
}

template <typename Scalar>
Array<Scalar>& Tensor<Scalar>::mutable_data() {
  return impl_->data;
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
  return impl_->data(0);
}

template <typename Scalar>
Scalar Tensor<Scalar>::at(Index n, Index c, Index h, Index w) const {
  const auto& s = impl_->shape;
  return impl_->data(((n * s[1] + c) * s[2] + h) * s[3] + w);
}

template <typename Scalar>
bool Tensor<Scalar>::requires_grad() const {
  return impl_->requires_grad;
}

template <typename Scalar>
Tensor<Scalar>& Tensor<Scalar>::set_requires_grad(bool on) {
  if (!impl_->is_leaf()) throw UsageError("requires_grad can only be toggled on leaf tensors");
  impl_->requires_grad = on;
  return *this;
}

template <typename Scalar>
bool Tensor<Scalar>::has_grad() const {
  return impl_->grad.size() == impl_->data.size() && impl_->data.size() > 0;
}

template <typename Scalar>
const Array<Scalar>& Tensor<Scalar>::grad() const {
  if (!has_grad()) impl_->grad_buffer();
  return impl_->grad;
}

template <typename Scalar>
void Tensor<Scalar>::zero_grad() {
  if (impl_->grad.size()) impl_->grad.setZero();
}

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  if (numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " + to_string(shape()));
  }
  if (!impl_->requires_grad) throw UsageError("backward() on a tensor that does not require grad");

  // Post-order DFS yields inputs before consumers.
  std::vector<TensorImpl<Scalar>*> order;
  std::unordered_set<TensorImpl<Scalar>*> seen;
  std::vector<std::pair<TensorImpl<Scalar>*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const std::size_t n_inputs = node->grad_fn ? node->grad_fn->inputs.size() : 0;
    if (next < n_inputs) {
      TensorImpl<Scalar>* child = node->grad_fn->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  impl_->grad_buffer() += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<Scalar>* node = *it;
    if (node->grad_fn && node->grad.size() == node->data.size()) node->grad_fn->apply(*node);
  }
  for (TensorImpl<Scalar>* node : order) {
    if (!node->is_leaf()) node->grad.resize(0);
  }
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(impl_->shape, impl_->data);
}

template class Tensor<float>;
template class Tensor<double>;

namespace detail {

namespace {
template <typename T>
void check_finite_impl(const char* op, const T* data, Index n) {
  for (Index i = 0; i < n; ++i) {
    if (!std::isfinite(data[i])) throw Error(std::string("non-finite value produced by ") + op);
  }
}
}  // namespace

void check_finite_debug(const char* op, const float* data, Index n) {
#ifndef NDEBUG
  check_finite_impl(op, data, n);
#else
  (void)op, (void)data, (void)n;
#endif
}

void check_finite_debug(const char* op, const double* data, Index n) {
#ifndef NDEBUG
  check_finite_impl(op, data, n);
#else
  (void)op, (void)data, (void)n;
#endif
}

}  // namespace detail

}  // namespace mambaseg
