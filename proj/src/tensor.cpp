#include "udhf2/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace udhf2 {
namespace {

DType g_default_dtype = DType::f32;
thread_local bool t_grad_enabled = true;

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

DType default_dtype() { return g_default_dtype; }
void set_default_dtype(DType dtype) { g_default_dtype = dtype; }

std::int64_t TensorImpl::numel() const { return shape_numel(shape); }

namespace detail {

std::shared_ptr<TensorImpl> make_impl(const Shape& shape, DType dtype) {
  for (auto d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  if (dtype == DType::f32) {
    impl->storage = std::vector<float>(n, 0.0f);
  } else {
    impl->storage = std::vector<double>(n, 0.0);
  }
  return impl;
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

void record(std::initializer_list<const Tensor*> inputs, Tensor& out, Tape::BackwardFn backward) {
  if (!any_requires_grad(inputs)) return;
  std::vector<std::shared_ptr<TensorImpl>> ptrs;
  for (const Tensor* t : inputs) {
    if (t && t->defined()) ptrs.push_back(t->impl_ptr());
  }
  out.impl().requires_grad = true;
  out.impl().recorded = true;
  Tape::active().record(std::move(ptrs), out.impl_ptr(), std::move(backward));
}

void record(const std::vector<Tensor>& inputs, Tensor& out, Tape::BackwardFn backward) {
  if (!grad_enabled()) return;
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return;
  std::vector<std::shared_ptr<TensorImpl>> ptrs;
  for (const auto& t : inputs) ptrs.push_back(t.impl_ptr());
  out.impl().requires_grad = true;
  out.impl().recorded = true;
  Tape::active().record(std::move(ptrs), out.impl_ptr(), std::move(backward));
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) throw UsageError(std::string(op) + ": mixed dtypes");
}

}  // namespace detail

Tensor Tensor::zeros(const Shape& shape, DType dtype) { return Tensor(detail::make_impl(shape, dtype)); }

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  Tensor t = zeros(shape, dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from_values(const Shape& shape, std::span<const double> values, DType dtype) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
    throw DimensionError("from_values: " + std::to_string(values.size()) + " values for shape " +
                         shape_str(shape));
  }
  Tensor t = zeros(shape, dtype);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto* p = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) p[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

TensorImpl& Tensor::impl() {
  if (!impl_) throw UsageError("use of undefined tensor");
  return *impl_;
}

const TensorImpl& Tensor::impl() const {
  if (!impl_) throw UsageError("use of undefined tensor");
  return *impl_;
}

std::int64_t Tensor::dim(std::int64_t axis) const {
  const auto r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(axis)];
}

double Tensor::at(std::int64_t flat_index) const {
  return dispatch(dtype(), [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(impl().values<T>().at(static_cast<std::size_t>(flat_index)));
  });
}

void Tensor::set(std::int64_t flat_index, double value) {
  dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    impl().values<T>().at(static_cast<std::size_t>(flat_index)) = static_cast<T>(value);
  });
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto& v = impl().values<T>();
    return std::vector<double>(v.begin(), v.end());
  });
}

void Tensor::fill(double value) {
  dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto& v = impl().values<T>();
    std::fill(v.begin(), v.end(), static_cast<T>(value));
  });
}

void Tensor::copy_from(const Tensor& other) {
  if (other.shape() != shape()) {
    throw DimensionError("copy_from: shape " + shape_str(other.shape()) + " into " + shape_str(shape()));
  }
  dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto& dst = impl().values<T>();
    dispatch(other.dtype(), [&](auto src_tag) {
      using S = decltype(src_tag);
      const auto& src = other.impl().values<S>();
      std::transform(src.begin(), src.end(), dst.begin(), [](S x) { return static_cast<T>(x); });
    });
  });
}

Tensor& Tensor::set_requires_grad(bool flag) {
  impl().requires_grad = flag;
  return *this;
}

Tensor Tensor::grad() const {
  if (!impl().grad) return Tensor();
  return Tensor(impl().grad);
}

void Tensor::zero_grad() { impl().grad.reset(); }

void Tensor::backward() const { Tape::active().backward(*this); }

Tensor Tensor::detach() const {
  auto copy = std::make_shared<TensorImpl>();
  copy->shape = impl().shape;
  copy->storage = impl().storage;
  return Tensor(std::move(copy));
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::to(DType target) const {
  Tensor out = zeros(shape(), target);
  out.copy_from(*this);
  return out;
}

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(std::vector<std::shared_ptr<TensorImpl>> inputs, std::shared_ptr<TensorImpl> output,
                  BackwardFn backward) {
  entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || !loss.recorded()) {
    throw UsageError("backward() on a tensor that was not produced under an active tape");
  }
  if (loss.numel() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  auto& root = const_cast<TensorImpl&>(loss.impl());
  dispatch(root.dtype(), [&](auto tag) {
    using T = decltype(tag);
    detail::grad_buffer<T>(root)[0] += T(1);
  });
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad) it->backward();
  }
  entries_.clear();
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = saved_; }

}  // namespace udhf2
