#include "xbridge/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace xbridge {

DType dtype_from_name(const std::string& name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  throw std::invalid_argument("unknown dtype: " + name);
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

static void check_shape(const Shape& shape) {
  for (std::int64_t e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
  }
}

Tensor Tensor::empty(Shape shape, DType dt) {
  check_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->dtype = dt;
  std::int64_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->data.resize(static_cast<std::size_t>(n) * dtype_size(dt));
  return wrap(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, DType dt) {
  return empty(std::move(shape), dt);  // vector<byte> value-initializes to zero
}

Tensor Tensor::full(Shape shape, double value, DType dt) {
  Tensor t = empty(std::move(shape), dt);
  dispatch_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    for (T& v : t.data<T>()) v = static_cast<T>(value);
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full({1}, value, dt); }

Tensor Tensor::from_vector(const std::vector<double>& values, Shape shape, DType dt) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
    throw std::invalid_argument("from_vector: " + std::to_string(values.size()) +
                                " values do not fill " + shape_str(shape));
  }
  Tensor t = empty(std::move(shape), dt);
  dispatch_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, DType dt, double stddev) {
  Tensor t = empty(std::move(shape), dt);
  dispatch_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    for (T& v : t.data<T>()) v = static_cast<T>(rng.normal() * stddev);
  });
  return t;
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, DType dt, double lo, double hi) {
  Tensor t = empty(std::move(shape), dt);
  dispatch_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    for (T& v : t.data<T>()) v = static_cast<T>(rng.uniform(lo, hi));
  });
  return t;
}

double Tensor::value_at(std::int64_t i) const {
  return dispatch_dtype(dtype(), [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(data<T>()[static_cast<std::size_t>(i)]);
  });
}

void Tensor::set_value_at(std::int64_t i, double v) {
  dispatch_dtype(dtype(), [&](auto tag) {
    using T = decltype(tag);
    data<T>()[static_cast<std::size_t>(i)] = static_cast<T>(v);
  });
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  return value_at(0);
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<std::size_t>(numel()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = value_at(static_cast<std::int64_t>(i));
  return out;
}

Tensor Tensor::grad() const {
  if (impl_->grad) return wrap(impl_->grad);
  return zeros(shape(), dtype());
}

Tensor Tensor::clone() const {
  Tensor t = empty(shape(), dtype());
  t.impl_->data = impl_->data;
  return t;
}

Tensor Tensor::astype(DType dt) const {
  if (dt == dtype()) return clone();
  Tensor t = empty(shape(), dt);
  for (std::int64_t i = 0; i < numel(); ++i) t.set_value_at(i, value_at(i));
  return t;
}

void accumulate_grad(TensorImpl& t, const Tensor& delta) {
  if (delta.shape() != t.shape || delta.dtype() != t.dtype) {
    throw std::logic_error("gradient shape/dtype mismatch: value " + shape_str(t.shape) +
                           " vs grad " + shape_str(delta.shape()));
  }
  if (!t.grad) {
    auto g = std::make_shared<TensorImpl>();
    g->shape = t.shape;
    g->dtype = t.dtype;
    g->data.resize(t.data.size());
    t.grad = std::move(g);
  }
  Tensor g = Tensor::wrap(t.grad);
  dispatch_dtype(t.dtype, [&](auto tag) {
    using T = decltype(tag);
    auto dst = g.data<T>();
    auto src = delta.data<T>();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  });
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

bool recording_needed(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->on_grad_path()) return true;
  }
  return false;
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.on_grad_path()) {
    throw std::invalid_argument("backward: loss is not reachable from any requires_grad leaf");
  }
  accumulate_grad(*loss.impl(), Tensor::full({1}, 1.0, loss.dtype()));
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    it->adjoint();
  }
}

}  // namespace xbridge
