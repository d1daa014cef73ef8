#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "xbridge/rng.hpp"

namespace xbridge {

enum class DType : std::uint8_t { f32, f64 };

inline std::size_t dtype_size(DType dt) { return dt == DType::f32 ? 4 : 8; }
inline const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }
DType dtype_from_name(const std::string& name);

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::vector<std::byte> data;  // row-major
  bool requires_grad = false;   // trainable leaf
  bool on_grad_path = false;    // set when produced by a recorded primitive
  std::shared_ptr<TensorImpl> grad;  // same shape/dtype, allocated on first accumulation
};

// Value-semantic handle on a dense row-major array. Immutable once consumed by
// a primitive; gradients accumulate into a lazily allocated sibling buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor empty(Shape shape, DType dt);
  static Tensor zeros(Shape shape, DType dt);
  static Tensor full(Shape shape, double value, DType dt);
  static Tensor scalar(double value, DType dt);
  static Tensor from_vector(const std::vector<double>& values, Shape shape, DType dt);
  static Tensor randn(Shape shape, Rng& rng, DType dt, double stddev = 1.0);
  static Tensor rand_uniform(Shape shape, Rng& rng, DType dt, double lo, double hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t extent(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
  std::int64_t numel() const { return shape_numel(impl_->shape); }
  DType dtype() const { return impl_->dtype; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }
  bool on_grad_path() const { return impl_->requires_grad || impl_->on_grad_path; }

  template <typename T>
  std::span<T> data() {
    return {reinterpret_cast<T*>(impl_->data.data()), static_cast<std::size_t>(numel())};
  }
  template <typename T>
  std::span<const T> data() const {
    return {reinterpret_cast<const T*>(impl_->data.data()), static_cast<std::size_t>(numel())};
  }
  std::span<const std::byte> bytes() const { return {impl_->data.data(), impl_->data.size()}; }
  std::span<std::byte> bytes_mut() { return {impl_->data.data(), impl_->data.size()}; }

  // dtype-agnostic scalar access, converting through double
  double value_at(std::int64_t flat_index) const;
  void set_value_at(std::int64_t flat_index, double v);
  double item() const;  // requires numel() == 1
  std::vector<double> to_vector() const;

  // gradient of this tensor; zeros when no adjoint reached it
  Tensor grad() const;
  bool has_grad() const { return impl_->grad != nullptr; }
  void zero_grad() { impl_->grad.reset(); }

  Tensor clone() const;          // deep copy, detached from any trace
  Tensor astype(DType dt) const; // converting deep copy, detached

  std::shared_ptr<TensorImpl>& impl() { return impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Accumulate `delta` (same shape/dtype) into t's grad buffer.
void accumulate_grad(TensorImpl& t, const Tensor& delta);

// Ordered trace of primitive applications. Running the adjoints in reverse
// visits each recorded primitive exactly once in reverse topological order,
// because records are appended in execution order.
class Tape {
 public:
  void record(const char* op, std::function<void()> adjoint) {
    records_.push_back({op, std::move(adjoint)});
  }
  std::size_t size() const { return records_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays the trace backward. `loss` must be a
  // scalar produced under this tape.
  void backward(const Tensor& loss);

  static Tape* active();

 private:
  struct Record {
    const char* op;
    std::function<void()> adjoint;
  };
  std::vector<Record> records_;
  friend class TapeScope;
};

// Activates a tape on the current thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// True when a tape is active and any input is a trainable leaf or downstream
// of one; primitives consult this to decide whether to record an adjoint.
bool recording_needed(std::initializer_list<const Tensor*> inputs);

template <class F>
decltype(auto) dispatch_dtype(DType dt, F&& f) {
  if (dt == DType::f32) return f(float{});
  return f(double{});
}

}  // namespace xbridge
