#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "udhf2/errors.hpp"

namespace udhf2 {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Process-wide dtype used by factories that don't name one explicitly.
DType default_dtype();
void set_default_dtype(DType dtype);

/// RAII switch of the default dtype, restored on scope exit.
class DefaultDTypeGuard {
 public:
  explicit DefaultDTypeGuard(DType dtype) : saved_(default_dtype()) { set_default_dtype(dtype); }
  ~DefaultDTypeGuard() { set_default_dtype(saved_); }
  DefaultDTypeGuard(const DefaultDTypeGuard&) = delete;
  DefaultDTypeGuard& operator=(const DefaultDTypeGuard&) = delete;

 private:
  DType saved_;
};

struct TensorImpl {
  Shape shape;
  std::variant<std::vector<float>, std::vector<double>> storage;
  bool requires_grad = false;
  // Set when the tensor is the output of a recorded operation.
  bool recorded = false;
  std::shared_ptr<TensorImpl> grad;

  DType dtype() const { return storage.index() == 0 ? DType::f32 : DType::f64; }
  std::int64_t numel() const;

  template <class T>
  std::vector<T>& values() {
    return std::get<std::vector<T>>(storage);
  }
  template <class T>
  const std::vector<T>& values() const {
    return std::get<std::vector<T>>(storage);
  }
};

/// Calls `fn(T{})` with T = float or double according to `dtype`.
template <class F>
decltype(auto) dispatch(DType dtype, F&& fn) {
  if (dtype == DType::f32) return fn(float{});
  return fn(double{});
}

/// Dense row-major tensor handle. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, DType dtype = default_dtype());
  static Tensor full(const Shape& shape, double value, DType dtype = default_dtype());
  static Tensor from_values(const Shape& shape, std::span<const double> values,
                            DType dtype = default_dtype());
  static Tensor scalar(double value, DType dtype = default_dtype());

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl().shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(impl().shape.size()); }
  // Negative axes count from the back.
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t numel() const { return impl().numel(); }
  DType dtype() const { return impl().dtype(); }

  template <class T>
  T* data() {
    return impl().values<T>().data();
  }
  template <class T>
  const T* data() const {
    return impl().values<T>().data();
  }

  double at(std::int64_t flat_index) const;
  void set(std::int64_t flat_index, double value);
  double item() const;
  std::vector<double> to_vector() const;
  void fill(double value);
  // Overwrites values in place without touching the tape.
  void copy_from(const Tensor& other);

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool recorded() const { return impl().recorded; }

  /// Gradient accumulator; undefined until backward reaches this tensor.
  Tensor grad() const;
  void zero_grad();

  /// Reverse-mode sweep over the active tape, seeded with d(this)/d(this) = 1.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;
  Tensor to(DType dtype) const;

  TensorImpl& impl();
  const TensorImpl& impl() const;
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Operations recorded while gradient mode is on. Traversed strictly in
/// reverse order by backward().
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Entry {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };

  /// Tape of the calling thread.
  static Tape& active();

  void record(std::vector<std::shared_ptr<TensorImpl>> inputs, std::shared_ptr<TensorImpl> output,
              BackwardFn backward);
  void backward(const Tensor& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<Entry> entries_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

namespace detail {

std::shared_ptr<TensorImpl> make_impl(const Shape& shape, DType dtype);

/// Gradient buffer of `impl`, zero-allocated on first use.
template <class T>
T* grad_buffer(TensorImpl& impl) {
  if (!impl.grad) impl.grad = make_impl(impl.shape, impl.dtype());
  return impl.grad->values<T>().data();
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs);

/// Records `out` as produced from `inputs` when any of them is tracked.
void record(std::initializer_list<const Tensor*> inputs, Tensor& out, Tape::BackwardFn backward);
void record(const std::vector<Tensor>& inputs, Tensor& out, Tape::BackwardFn backward);

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op);

}  // namespace detail
}  // namespace udhf2
