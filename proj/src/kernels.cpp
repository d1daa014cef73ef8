#include "xbridge/kernels.hpp"

#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace xbridge::kernels {

template <typename T>
void matmul(const T* a, const T* b, T* c, std::int64_t batch, std::int64_t m, std::int64_t n,
            std::int64_t k, std::int64_t a_bs, std::int64_t b_bs, bool trans_a, bool trans_b,
            bool accumulate) {
  // a element (i, l): trans_a ? a[l*m + i] : a[i*k + l]
  // b element (l, j): trans_b ? b[j*k + l] : b[l*n + j]
  const std::int64_t rows = batch * m;
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t g = r / m;
    const std::int64_t i = r % m;
    const T* ag = a + g * a_bs;
    const T* bg = b + g * b_bs;
    T* crow = c + (g * m + i) * n;
    for (std::int64_t j = 0; j < n; ++j) {
      T acc = accumulate ? crow[j] : T(0);
      for (std::int64_t l = 0; l < k; ++l) {
        const T av = trans_a ? ag[l * m + i] : ag[i * k + l];
        const T bv = trans_b ? bg[j * k + l] : bg[l * n + j];
        acc += av * bv;
      }
      crow[j] = acc;
    }
  }
}

template <typename T>
void softmax(const T* x, T* y, std::int64_t outer, std::int64_t n, std::int64_t inner) {
  const std::int64_t slices = outer * inner;
#pragma omp parallel for schedule(static)
  for (std::int64_t s = 0; s < slices; ++s) {
    const std::int64_t o = s / inner;
    const std::int64_t in = s % inner;
    const T* xs = x + o * n * inner + in;
    T* ys = y + o * n * inner + in;
    T mx = xs[0];
    for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, xs[i * inner]);
    T sum = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
      const T e = std::exp(xs[i * inner] - mx);
      ys[i * inner] = e;
      sum += e;
    }
    const T scale = T(1) / sum;
    for (std::int64_t i = 0; i < n; ++i) ys[i * inner] *= scale;
  }
}

template <typename T>
void softmax_backward(const T* y, const T* dy, T* dx, std::int64_t outer, std::int64_t n,
                      std::int64_t inner) {
  const std::int64_t slices = outer * inner;
#pragma omp parallel for schedule(static)
  for (std::int64_t s = 0; s < slices; ++s) {
    const std::int64_t o = s / inner;
    const std::int64_t in = s % inner;
    const T* ys = y + o * n * inner + in;
    const T* dys = dy + o * n * inner + in;
    T* dxs = dx + o * n * inner + in;
    T dot = T(0);
    for (std::int64_t i = 0; i < n; ++i) dot += dys[i * inner] * ys[i * inner];
    for (std::int64_t i = 0; i < n; ++i) dxs[i * inner] = (dys[i * inner] - dot) * ys[i * inner];
  }
}

template <typename T>
void layer_norm(const T* x, T* y, T* mean, T* rstd, std::int64_t outer, std::int64_t n,
                std::int64_t inner, T eps) {
  const std::int64_t slices = outer * inner;
#pragma omp parallel for schedule(static)
  for (std::int64_t s = 0; s < slices; ++s) {
    const std::int64_t o = s / inner;
    const std::int64_t in = s % inner;
    const T* xs = x + o * n * inner + in;
    T* ys = y + o * n * inner + in;
    T mu = T(0);
    for (std::int64_t i = 0; i < n; ++i) mu += xs[i * inner];
    mu /= static_cast<T>(n);
    T var = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
      const T d = xs[i * inner] - mu;
      var += d * d;
    }
    var /= static_cast<T>(n);
    const T r = T(1) / std::sqrt(var + eps);
    for (std::int64_t i = 0; i < n; ++i) ys[i * inner] = (xs[i * inner] - mu) * r;
    mean[s] = mu;
    rstd[s] = r;
  }
}

template <typename T>
void layer_norm_backward(const T* x, const T* dy, const T* mean, const T* rstd, T* dx,
                         std::int64_t outer, std::int64_t n, std::int64_t inner) {
  const std::int64_t slices = outer * inner;
#pragma omp parallel for schedule(static)
  for (std::int64_t s = 0; s < slices; ++s) {
    const std::int64_t o = s / inner;
    const std::int64_t in = s % inner;
    const T* xs = x + o * n * inner + in;
    const T* dys = dy + o * n * inner + in;
    T* dxs = dx + o * n * inner + in;
    const T mu = mean[s];
    const T r = rstd[s];
    T dsum = T(0);
    T dxhat = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
      const T xhat = (xs[i * inner] - mu) * r;
      dsum += dys[i * inner];
      dxhat += dys[i * inner] * xhat;
    }
    const T inv_n = T(1) / static_cast<T>(n);
    for (std::int64_t i = 0; i < n; ++i) {
      const T xhat = (xs[i * inner] - mu) * r;
      dxs[i * inner] = r * (dys[i * inner] - dsum * inv_n - xhat * dxhat * inv_n);
    }
  }
}

template <typename T>
void silu(const T* x, T* y, std::int64_t n) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    const T s = T(1) / (T(1) + std::exp(-x[i]));
    y[i] = x[i] * s;
  }
}

template <typename T>
void silu_backward(const T* x, const T* dy, T* dx, std::int64_t n) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    const T s = T(1) / (T(1) + std::exp(-x[i]));
    dx[i] = dy[i] * (s + x[i] * s * (T(1) - s));
  }
}

template <typename T>
void conv_layer_weights(const T* kernel, T* w, std::int64_t m, std::int64_t k, std::int64_t p) {
  const std::int64_t e = m + 2 * p - k + 1;
  for (std::int64_t l = 0; l < m; ++l) {
    T acc = T(0);
    for (std::int64_t i = 0; i < k; ++i) {
      const std::int64_t j = l - i + p;
      if (j >= 0 && j < e) acc += kernel[i];
    }
    w[l] = acc / static_cast<T>(e);
  }
}

template <typename T>
void conv_layers(const T* h, const T* kernel, T* out, std::int64_t b, std::int64_t m,
                 std::int64_t cols, std::int64_t k, std::int64_t p) {
  std::vector<T> w(static_cast<std::size_t>(m));
  conv_layer_weights(kernel, w.data(), m, k, p);
#pragma omp parallel for schedule(static)
  for (std::int64_t u = 0; u < b * cols; ++u) {
    const std::int64_t bi = u / cols;
    const std::int64_t c = u % cols;
    T acc = T(0);
    for (std::int64_t l = 0; l < m; ++l) acc += w[static_cast<std::size_t>(l)] * h[(bi * m + l) * cols + c];
    out[u] = acc;
  }
}

template <typename T>
void conv_layers_backward_input(const T* kernel, const T* dout, T* dh, std::int64_t b,
                                std::int64_t m, std::int64_t cols, std::int64_t k, std::int64_t p) {
  std::vector<T> w(static_cast<std::size_t>(m));
  conv_layer_weights(kernel, w.data(), m, k, p);
#pragma omp parallel for schedule(static)
  for (std::int64_t u = 0; u < b * m * cols; ++u) {
    const std::int64_t bi = u / (m * cols);
    const std::int64_t l = (u / cols) % m;
    const std::int64_t c = u % cols;
    dh[u] = w[static_cast<std::size_t>(l)] * dout[bi * cols + c];
  }
}

template <typename T>
void conv_layers_backward_kernel(const T* h, const T* dout, T* dkernel, std::int64_t b,
                                 std::int64_t m, std::int64_t cols, std::int64_t k, std::int64_t p) {
  const std::int64_t e = m + 2 * p - k + 1;
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < k; ++i) {
    // d(out)/d(kernel[i]) factors through the layers tap i contributes to.
    T acc = T(0);
    for (std::int64_t bi = 0; bi < b; ++bi) {
      for (std::int64_t l = 0; l < m; ++l) {
        const std::int64_t j = l - i + p;
        if (j < 0 || j >= e) continue;
        const T* hs = h + (bi * m + l) * cols;
        const T* ds = dout + bi * cols;
        for (std::int64_t c = 0; c < cols; ++c) acc += hs[c] * ds[c];
      }
    }
    dkernel[i] = acc / static_cast<T>(e);
  }
}

template <typename T>
void conv2d(const T* x, const T* w, const T* bias, T* y, std::int64_t b, std::int64_t ci,
            std::int64_t h, std::int64_t wdt, std::int64_t co, std::int64_t kh, std::int64_t kw,
            std::int64_t stride, std::int64_t pad, std::int64_t ho, std::int64_t wo) {
  const std::int64_t units = b * co * ho;
#pragma omp parallel for schedule(static)
  for (std::int64_t u = 0; u < units; ++u) {
    const std::int64_t bi = u / (co * ho);
    const std::int64_t oc = (u / ho) % co;
    const std::int64_t oy = u % ho;
    T* dst = y + ((bi * co + oc) * ho + oy) * wo;
    for (std::int64_t ox = 0; ox < wo; ++ox) {
      T acc = bias ? bias[oc] : T(0);
      for (std::int64_t ic = 0; ic < ci; ++ic) {
        const T* xs = x + (bi * ci + ic) * h * wdt;
        const T* ws = w + ((oc * ci + ic) * kh) * kw;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const std::int64_t iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const std::int64_t ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= wdt) continue;
            acc += ws[ky * kw + kx] * xs[iy * wdt + ix];
          }
        }
      }
      dst[ox] = acc;
    }
  }
}

template <typename T>
void conv2d_backward_input(const T* w, const T* dy, T* dx, std::int64_t b, std::int64_t ci,
                           std::int64_t h, std::int64_t wdt, std::int64_t co, std::int64_t kh,
                           std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t ho,
                           std::int64_t wo) {
  const std::int64_t units = b * ci * h;
#pragma omp parallel for schedule(static)
  for (std::int64_t u = 0; u < units; ++u) {
    const std::int64_t bi = u / (ci * h);
    const std::int64_t ic = (u / h) % ci;
    const std::int64_t iy = u % h;
    T* dst = dx + ((bi * ci + ic) * h + iy) * wdt;
    for (std::int64_t ix = 0; ix < wdt; ++ix) {
      T acc = T(0);
      for (std::int64_t oc = 0; oc < co; ++oc) {
        const T* dys = dy + (bi * co + oc) * ho * wo;
        const T* ws = w + ((oc * ci + ic) * kh) * kw;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const std::int64_t num = iy + pad - ky;
          if (num % stride != 0) continue;
          const std::int64_t oy = num / stride;
          if (oy < 0 || oy >= ho) continue;
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const std::int64_t numx = ix + pad - kx;
            if (numx % stride != 0) continue;
            const std::int64_t ox = numx / stride;
            if (ox < 0 || ox >= wo) continue;
            acc += ws[ky * kw + kx] * dys[oy * wo + ox];
          }
        }
      }
      dst[ix] = acc;
    }
  }
}

template <typename T>
void conv2d_backward_weight(const T* x, const T* dy, T* dw, T* dbias, std::int64_t b,
                            std::int64_t ci, std::int64_t h, std::int64_t wdt, std::int64_t co,
                            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                            std::int64_t ho, std::int64_t wo) {
  const std::int64_t units = co * ci * kh * kw;
#pragma omp parallel for schedule(static)
  for (std::int64_t u = 0; u < units; ++u) {
    const std::int64_t oc = u / (ci * kh * kw);
    const std::int64_t ic = (u / (kh * kw)) % ci;
    const std::int64_t ky = (u / kw) % kh;
    const std::int64_t kx = u % kw;
    T acc = T(0);
    for (std::int64_t bi = 0; bi < b; ++bi) {
      const T* xs = x + (bi * ci + ic) * h * wdt;
      const T* dys = dy + (bi * co + oc) * ho * wo;
      for (std::int64_t oy = 0; oy < ho; ++oy) {
        const std::int64_t iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          const std::int64_t ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= wdt) continue;
          acc += xs[iy * wdt + ix] * dys[oy * wo + ox];
        }
      }
    }
    dw[u] = acc;
  }
  if (dbias) {
#pragma omp parallel for schedule(static)
    for (std::int64_t oc = 0; oc < co; ++oc) {
      T acc = T(0);
      for (std::int64_t bi = 0; bi < b; ++bi) {
        const T* dys = dy + (bi * co + oc) * ho * wo;
        for (std::int64_t i = 0; i < ho * wo; ++i) acc += dys[i];
      }
      dbias[oc] = acc;
    }
  }
}

template void matmul<float>(const float*, const float*, float*, std::int64_t, std::int64_t,
                            std::int64_t, std::int64_t, std::int64_t, std::int64_t, bool, bool,
                            bool);
template void matmul<double>(const double*, const double*, double*, std::int64_t, std::int64_t,
                             std::int64_t, std::int64_t, std::int64_t, std::int64_t, bool, bool,
                             bool);
template void softmax<float>(const float*, float*, std::int64_t, std::int64_t, std::int64_t);
template void softmax<double>(const double*, double*, std::int64_t, std::int64_t, std::int64_t);
template void softmax_backward<float>(const float*, const float*, float*, std::int64_t,
                                      std::int64_t, std::int64_t);
template void softmax_backward<double>(const double*, const double*, double*, std::int64_t,
                                       std::int64_t, std::int64_t);
template void layer_norm<float>(const float*, float*, float*, float*, std::int64_t, std::int64_t,
                                std::int64_t, float);
template void layer_norm<double>(const double*, double*, double*, double*, std::int64_t,
                                 std::int64_t, std::int64_t, double);
template void layer_norm_backward<float>(const float*, const float*, const float*, const float*,
                                         float*, std::int64_t, std::int64_t, std::int64_t);
template void layer_norm_backward<double>(const double*, const double*, const double*,
                                          const double*, double*, std::int64_t, std::int64_t,
                                          std::int64_t);
template void silu<float>(const float*, float*, std::int64_t);
template void silu<double>(const double*, double*, std::int64_t);
template void silu_backward<float>(const float*, const float*, float*, std::int64_t);
template void silu_backward<double>(const double*, const double*, double*, std::int64_t);
template void conv_layer_weights<float>(const float*, float*, std::int64_t, std::int64_t,
                                        std::int64_t);
template void conv_layer_weights<double>(const double*, double*, std::int64_t, std::int64_t,
                                         std::int64_t);
template void conv_layers<float>(const float*, const float*, float*, std::int64_t, std::int64_t,
                                 std::int64_t, std::int64_t, std::int64_t);
template void conv_layers<double>(const double*, const double*, double*, std::int64_t,
                                  std::int64_t, std::int64_t, std::int64_t, std::int64_t);
template void conv_layers_backward_input<float>(const float*, const float*, float*, std::int64_t,
                                                std::int64_t, std::int64_t, std::int64_t,
                                                std::int64_t);
template void conv_layers_backward_input<double>(const double*, const double*, double*,
                                                 std::int64_t, std::int64_t, std::int64_t,
                                                 std::int64_t, std::int64_t);
template void conv_layers_backward_kernel<float>(const float*, const float*, float*, std::int64_t,
                                                 std::int64_t, std::int64_t, std::int64_t,
                                                 std::int64_t);
template void conv_layers_backward_kernel<double>(const double*, const double*, double*,
                                                  std::int64_t, std::int64_t, std::int64_t,
                                                  std::int64_t, std::int64_t);
template void conv2d<float>(const float*, const float*, const float*, float*, std::int64_t,
                            std::int64_t, std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                            std::int64_t, std::int64_t, std::int64_t, std::int64_t, std::int64_t);
template void conv2d<double>(const double*, const double*, const double*, double*, std::int64_t,
                             std::int64_t, std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                             std::int64_t, std::int64_t, std::int64_t, std::int64_t, std::int64_t);
template void conv2d_backward_input<float>(const float*, const float*, float*, std::int64_t,
                                           std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                                           std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                                           std::int64_t, std::int64_t);
template void conv2d_backward_input<double>(const double*, const double*, double*, std::int64_t,
                                            std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                                            std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                                            std::int64_t, std::int64_t);
template void conv2d_backward_weight<float>(const float*, const float*, float*, float*,
                                            std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                                            std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                                            std::int64_t, std::int64_t, std::int64_t);
template void conv2d_backward_weight<double>(const double*, const double*, double*, double*,
                                             std::int64_t, std::int64_t, std::int64_t,
                                             std::int64_t, std::int64_t, std::int64_t,
                                             std::int64_t, std::int64_t, std::int64_t,
                                             std::int64_t, std::int64_t);

}  // namespace xbridge::kernels
