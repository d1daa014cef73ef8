#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "xbridge/tensor.hpp"

// Small shared pieces for building the frozen and trainable networks:
// seeded parameter creation, named linear layers, a plain pre-LN encoder
// block, and pooling/positional helpers. Everything here composes ops::
// primitives, so gradients flow wherever inputs require them.
namespace xbridge::nn {

Tensor sinusoidal_table(std::int64_t s, std::int64_t d, DType dt);

// Sinusoidal features of a scalar time in [0, 1]; the time is spread across
// a 0..1000 range before the standard frequency fan-out.
Tensor timestep_features(double t, std::int64_t d, DType dt);

// Seeded gaussian parameter scaled by `scale`; the seed is derived from the
// name so adding parameters never reshuffles existing ones.
Tensor frozen_param(std::uint64_t seed, const std::string& name, const Shape& shape, double scale,
                    DType dt);

// name.w [in, out] with 1/sqrt(in) init and name.b [out] zeros.
void add_linear(std::map<std::string, Tensor>& w, std::uint64_t seed, const std::string& name,
                std::int64_t in, std::int64_t out, DType dt);
// Same layout, both factors zero — for heads that must start as a no-op.
void add_zero_linear(std::map<std::string, Tensor>& w, const std::string& name, std::int64_t in,
                     std::int64_t out, DType dt);

Tensor apply_linear(const std::map<std::string, Tensor>& w, const std::string& name,
                    const Tensor& x);

// Self-attention over x [b, s, d] with per-layer wq/wk/wv/wo under `prefix`.
Tensor multihead_attention(const std::map<std::string, Tensor>& w, const std::string& prefix,
                           const Tensor& x, std::int64_t heads);

// Pre-LN transformer block: x + MHA(LN(x)), then x + FF(LN(x)).
Tensor encoder_block(const std::map<std::string, Tensor>& w, const std::string& prefix,
                     const Tensor& x, std::int64_t heads);

// Mean over the sequence axis restricted to mask==1 positions. The mask is
// gradient-free, so the division is folded into a constant reciprocal.
Tensor masked_mean_pool(const Tensor& x, const Tensor& mask);

}  // namespace xbridge::nn
