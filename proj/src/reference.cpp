#include "xbridge/reference.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace xbridge::reference {

template <typename T>
void matmul(const T* a, const T* b, T* c, std::int64_t batch, std::int64_t m, std::int64_t n,
            std::int64_t k, std::int64_t a_bs, std::int64_t b_bs, bool trans_a, bool trans_b,
            bool accumulate) {
  for (std::int64_t g = 0; g < batch; ++g) {
    const T* ag = a + g * a_bs;
    const T* bg = b + g * b_bs;
    for (std::int64_t i = 0; i < m; ++i) {
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
}

template <typename T>
void softmax(const T* x, T* y, std::int64_t outer, std::int64_t n, std::int64_t inner) {
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
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
}

template <typename T>
void layer_norm(const T* x, T* y, T* mean, T* rstd, std::int64_t outer, std::int64_t n,
                std::int64_t inner, T eps) {
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
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
      mean[o * inner + in] = mu;
      rstd[o * inner + in] = r;
    }
  }
}

template <typename T>
void silu(const T* x, T* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) {
    const T s = T(1) / (T(1) + std::exp(-x[i]));
    y[i] = x[i] * s;
  }
}

template <typename T>
void conv_layers(const T* h, const T* kernel, T* out, std::int64_t b, std::int64_t m,
                 std::int64_t cols, std::int64_t k, std::int64_t p) {
  const std::int64_t e = m + 2 * p - k + 1;
  std::vector<T> w(static_cast<std::size_t>(m));
  for (std::int64_t l = 0; l < m; ++l) {
    T acc = T(0);
    for (std::int64_t i = 0; i < k; ++i) {
      const std::int64_t j = l - i + p;
      if (j >= 0 && j < e) acc += kernel[i];
    }
    w[static_cast<std::size_t>(l)] = acc / static_cast<T>(e);
  }
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t c = 0; c < cols; ++c) {
      T acc = T(0);
      for (std::int64_t l = 0; l < m; ++l) acc += w[static_cast<std::size_t>(l)] * h[(bi * m + l) * cols + c];
      out[bi * cols + c] = acc;
    }
  }
}

template <typename T>
void conv2d(const T* x, const T* w, const T* bias, T* y, std::int64_t b, std::int64_t ci,
            std::int64_t h, std::int64_t wdt, std::int64_t co, std::int64_t kh, std::int64_t kw,
            std::int64_t stride, std::int64_t pad, std::int64_t ho, std::int64_t wo) {
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t oc = 0; oc < co; ++oc) {
      for (std::int64_t oy = 0; oy < ho; ++oy) {
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
template void layer_norm<float>(const float*, float*, float*, float*, std::int64_t, std::int64_t,
                                std::int64_t, float);
template void layer_norm<double>(const double*, double*, double*, double*, std::int64_t,
                                 std::int64_t, std::int64_t, double);
template void silu<float>(const float*, float*, std::int64_t);
template void silu<double>(const double*, double*, std::int64_t);
template void conv_layers<float>(const float*, const float*, float*, std::int64_t, std::int64_t,
                                 std::int64_t, std::int64_t, std::int64_t);
template void conv_layers<double>(const double*, const double*, double*, std::int64_t,
                                  std::int64_t, std::int64_t, std::int64_t, std::int64_t);
template void conv2d<float>(const float*, const float*, const float*, float*, std::int64_t,
                            std::int64_t, std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                            std::int64_t, std::int64_t, std::int64_t, std::int64_t, std::int64_t);
template void conv2d<double>(const double*, const double*, const double*, double*, std::int64_t,
                             std::int64_t, std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                             std::int64_t, std::int64_t, std::int64_t, std::int64_t, std::int64_t);

}  // namespace xbridge::reference
