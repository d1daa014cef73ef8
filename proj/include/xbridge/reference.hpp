#pragma once

#include <cstdint>

// Plain serial implementations of the hot kernels. These are the ground truth
// the parallel kernels are checked against (the parallel versions keep each
// output element's reduction serial and left-to-right, so the comparison is
// bitwise, not approximate). Also used by the benchmark tool as the baseline.
namespace xbridge::reference {

template <typename T>
void matmul(const T* a, const T* b, T* c, std::int64_t batch, std::int64_t m, std::int64_t n,
            std::int64_t k, std::int64_t a_batch_stride, std::int64_t b_batch_stride, bool trans_a,
            bool trans_b, bool accumulate);

template <typename T>
void softmax(const T* x, T* y, std::int64_t outer, std::int64_t n, std::int64_t inner);

template <typename T>
void layer_norm(const T* x, T* y, T* mean, T* rstd, std::int64_t outer, std::int64_t n,
                std::int64_t inner, T eps);

template <typename T>
void silu(const T* x, T* y, std::int64_t n);

template <typename T>
void conv_layers(const T* h, const T* kernel, T* out, std::int64_t b, std::int64_t m,
                 std::int64_t cols, std::int64_t k, std::int64_t p);

template <typename T>
void conv2d(const T* x, const T* w, const T* bias, T* y, std::int64_t b, std::int64_t ci,
            std::int64_t h, std::int64_t wdt, std::int64_t co, std::int64_t kh, std::int64_t kw,
            std::int64_t stride, std::int64_t pad, std::int64_t ho, std::int64_t wo);

}  // namespace xbridge::reference
