#pragma once

#include <cstdint>

// OpenMP-parallel compute kernels. Parallelism is always over independent
// output elements (rows, slices, channels); every per-element reduction runs
// serially left-to-right, so results are bitwise identical to the serial
// reference in xbridge/reference.hpp at any thread count.

namespace xbridge::kernels {

// c[g, m, n] (+)= a[g, ., .] * b[g, ., .], where a is read as [m, k] (or its
// transpose) and b as [k, n] (or its transpose). Batch strides of 0 broadcast
// one operand across the batch. With accumulate the kernel adds into c.
template <typename T>
void matmul(const T* a, const T* b, T* c, std::int64_t batch, std::int64_t m, std::int64_t n,
            std::int64_t k, std::int64_t a_batch_stride, std::int64_t b_batch_stride,
            bool trans_a, bool trans_b, bool accumulate);

// softmax along the middle extent of x viewed as [outer, n, inner], with the
// max subtracted before exponentiation.
template <typename T>
void softmax(const T* x, T* y, std::int64_t outer, std::int64_t n, std::int64_t inner);

// dx = (dy - sum(dy * y)) * y per slice, given the forward output y.
template <typename T>
void softmax_backward(const T* y, const T* dy, T* dx, std::int64_t outer, std::int64_t n,
                      std::int64_t inner);

// Standardizes the middle extent of [outer, n, inner] slices with population
// variance; emits per-slice mean and reciprocal stddev for the backward pass.
template <typename T>
void layer_norm(const T* x, T* y, T* mean, T* rstd, std::int64_t outer, std::int64_t n,
                std::int64_t inner, T eps);

template <typename T>
void layer_norm_backward(const T* x, const T* dy, const T* mean, const T* rstd, T* dx,
                         std::int64_t outer, std::int64_t n, std::int64_t inner);

template <typename T>
void silu(const T* x, T* y, std::int64_t n);

template <typename T>
void silu_backward(const T* x, const T* dy, T* dx, std::int64_t n);

// Slides a k-tap kernel along the layer axis of h viewed as [b, m, cols] with
// zero padding p, then collapses the e = m + 2p - k + 1 sliding positions by
// arithmetic mean, so out is [b, cols]. Slide + mean fold into one effective
// weight per input layer (see conv_layer_weights), making the whole reduction
// an exact weighted sum over layers. Requires k <= m + 2p (caller-checked).
template <typename T>
void conv_layers(const T* h, const T* kernel, T* out, std::int64_t b, std::int64_t m,
                 std::int64_t cols, std::int64_t k, std::int64_t p);

// Effective per-layer weight: w[l] = (1/e) * sum of kernel taps i whose
// sliding position j = l - i + p lands in [0, e).
template <typename T>
void conv_layer_weights(const T* kernel, T* w, std::int64_t m, std::int64_t k, std::int64_t p);

template <typename T>
void conv_layers_backward_input(const T* kernel, const T* dout, T* dh, std::int64_t b,
                                std::int64_t m, std::int64_t cols, std::int64_t k, std::int64_t p);

template <typename T>
void conv_layers_backward_kernel(const T* h, const T* dout, T* dkernel, std::int64_t b,
                                 std::int64_t m, std::int64_t cols, std::int64_t k, std::int64_t p);

// 2-D convolution, NCHW layout, weight [co, ci, kh, kw], zero padding, stride.
template <typename T>
void conv2d(const T* x, const T* w, const T* bias, T* y, std::int64_t b, std::int64_t ci,
            std::int64_t h, std::int64_t wdt, std::int64_t co, std::int64_t kh, std::int64_t kw,
            std::int64_t stride, std::int64_t pad, std::int64_t ho, std::int64_t wo);

template <typename T>
void conv2d_backward_input(const T* w, const T* dy, T* dx, std::int64_t b, std::int64_t ci,
                           std::int64_t h, std::int64_t wdt, std::int64_t co, std::int64_t kh,
                           std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t ho,
                           std::int64_t wo);

template <typename T>
void conv2d_backward_weight(const T* x, const T* dy, T* dw, T* dbias, std::int64_t b,
                            std::int64_t ci, std::int64_t h, std::int64_t wdt, std::int64_t co,
                            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                            std::int64_t ho, std::int64_t wo);

}  // namespace xbridge::kernels
