#include "xbridge/nn.hpp"

#include <cmath>

#include "xbridge/ops.hpp"
#include "xbridge/rng.hpp"

namespace xbridge::nn {

Tensor sinusoidal_table(std::int64_t s, std::int64_t d, DType dt) {
  Tensor out = Tensor::zeros({s, d}, dt);
  dispatch_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    auto v = out.data<T>();
    for (std::int64_t pos = 0; pos < s; ++pos) {
      for (std::int64_t i = 0; i < d; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
        v[pos * d + i] = static_cast<T>(std::sin(pos * freq));
        if (i + 1 < d) v[pos * d + i + 1] = static_cast<T>(std::cos(pos * freq));
      }
    }
  });
  return out;
}

Tensor timestep_features(double t, std::int64_t d, DType dt) {
  Tensor out = Tensor::zeros({1, d}, dt);
  dispatch_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    auto v = out.data<T>();
    const double scaled = 1000.0 * t;
    for (std::int64_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      v[i] = static_cast<T>(std::sin(scaled * freq));
      if (i + 1 < d) v[i + 1] = static_cast<T>(std::cos(scaled * freq));
    }
  });
  return out;
}

Tensor frozen_param(std::uint64_t seed, const std::string& name, const Shape& shape, double scale,
                    DType dt) {
  Rng rng(derive_seed(seed, name, 0));
  return Tensor::randn(shape, rng, dt, scale);
}

void add_linear(std::map<std::string, Tensor>& w, std::uint64_t seed, const std::string& name,
                std::int64_t in, std::int64_t out, DType dt) {
  w[name + ".w"] =
      frozen_param(seed, name + ".w", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), dt);
  w[name + ".b"] = Tensor::zeros({out}, dt);
}

void add_zero_linear(std::map<std::string, Tensor>& w, const std::string& name, std::int64_t in,
                     std::int64_t out, DType dt) {
  w[name + ".w"] = Tensor::zeros({in, out}, dt);
  w[name + ".b"] = Tensor::zeros({out}, dt);
}

Tensor apply_linear(const std::map<std::string, Tensor>& w, const std::string& name,
                    const Tensor& x) {
  return ops::linear(x, w.at(name + ".w"), w.at(name + ".b"));
}

Tensor multihead_attention(const std::map<std::string, Tensor>& w, const std::string& prefix,
                           const Tensor& x, std::int64_t heads) {
  const std::int64_t b = x.shape()[0], s = x.shape()[1], d = x.shape()[2];
  const std::int64_t d0 = d / heads;
  auto split = [&](const Tensor& t) {
    return ops::permute(ops::reshape(t, {b, s, heads, d0}), {0, 2, 1, 3});
  };
  Tensor q = split(apply_linear(w, prefix + ".wq", x));
  Tensor k = split(apply_linear(w, prefix + ".wk", x));
  Tensor v = split(apply_linear(w, prefix + ".wv", x));
  Tensor scores =
      ops::scale(ops::matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(d0)));
  Tensor attn = ops::softmax(scores, -1);
  Tensor o = ops::permute(ops::matmul(attn, v), {0, 2, 1, 3});
  return apply_linear(w, prefix + ".wo", ops::reshape(o, {b, s, d}));
}

Tensor encoder_block(const std::map<std::string, Tensor>& w, const std::string& prefix,
                     const Tensor& x, std::int64_t heads) {
  Tensor h = ops::add(x, multihead_attention(w, prefix, ops::layer_norm(x, -1), heads));
  Tensor f = ops::layer_norm(h, -1);
  f = apply_linear(w, prefix + ".ff2", ops::silu(apply_linear(w, prefix + ".ff1", f)));
  return ops::add(h, f);
}

Tensor masked_mean_pool(const Tensor& x, const Tensor& mask) {
  const std::int64_t b = x.shape()[0], s = x.shape()[1];
  Tensor m3 = ops::reshape(mask, {b, s, 1});
  Tensor summed = ops::sum_axis(ops::mul(x, m3), 1);  // [b, d]
  Tensor inv = Tensor::zeros({b, 1}, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto mv = mask.data<T>();
    auto iv = inv.data<T>();
    for (std::int64_t i = 0; i < b; ++i) {
      double count = 0.0;
      for (std::int64_t j = 0; j < s; ++j) count += static_cast<double>(mv[i * s + j]);
      iv[i] = static_cast<T>(count > 0.0 ? 1.0 / count : 0.0);
    }
  });
  return ops::mul(summed, inv);
}

}  // namespace xbridge::nn
