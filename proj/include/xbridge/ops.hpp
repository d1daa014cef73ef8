#pragma once

#include <functional>
#include <vector>

#include "xbridge/tensor.hpp"

// Differentiable primitives. Each op computes its forward value eagerly and,
// when a tape is active and an input is on the gradient path, records an
// adjoint closure on the tape. Binary elementwise ops broadcast right-aligned
// (trailing extents must match or be 1).
namespace xbridge::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

// Contraction over the last two axes, optionally transposing either operand's
// trailing matrix. Leading axes must match elementwise, or be absent/flat on
// one side (that side is broadcast across the batch).
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// x: [..., in], w: [in, out], b: [out] -> [..., out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor silu(const Tensor& x);
Tensor log(const Tensor& x);

// Max-subtracted softmax along `axis` (negative axes count from the back).
Tensor softmax(const Tensor& x, int axis);

// Standardization along `axis` with population variance; no learned affine.
Tensor layer_norm(const Tensor& x, int axis, double eps = 1e-6);

// h: [b, m, s, z] -> [b, 1, s, z]. Slides a k-tap kernel along the layer axis
// with zero padding p and mean-collapses the sliding positions; equivalent to
// an exact per-layer weighted sum (see kernels.hpp).
Tensor conv_layers(const Tensor& h, const Tensor& kernel, std::int64_t k, std::int64_t p);

// x: [b, ci, h, w], w: [co, ci, kh, kw], bias: [co] (or undefined) -> NCHW.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::int64_t stride,
              std::int64_t pad);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis);   // removes the axis
Tensor mean_axis(const Tensor& x, int axis);  // removes the axis

// Compares the taped gradient of a scalar-valued f against central differences
// (f(x+h) - f(x-h)) / 2h per coordinate of x (f64 only). Returns the max
// relative error with denominator max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

}  // namespace xbridge::ops
