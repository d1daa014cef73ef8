#include "xbridge/mmdit.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

#include "xbridge/errors.hpp"
#include "xbridge/nn.hpp"
#include "xbridge/ops.hpp"
#include "xbridge/rng.hpp"

namespace xbridge {

namespace {

bool known_tap(const std::string& tap) {
  return tap.empty() || tap == "attn" || tap == "ln" || tap == "ff" || tap == "block" ||
         tap == "oneside";
}

}  // namespace

Generator::Generator(const MmditConfig& cfg, const EncoderConfig& enc, std::uint64_t seed,
                     DType dtype)
    : cfg_(cfg), enc_(enc), dtype_(dtype) {
  if (cfg.d_model % cfg.heads != 0) throw ConfigError("Generator: d_model not divisible by heads");
  if (cfg.latent_hw % cfg.patch != 0) {
    throw ConfigError("Generator: latent_hw not divisible by patch");
  }
  const std::int64_t grid = cfg.latent_hw / cfg.patch;
  n_tokens_ = grid * grid;
  const std::int64_t d = cfg.d_model;
  const std::int64_t patch_dim = cfg.latent_channels * cfg.patch * cfg.patch;
  const double s = cfg.init_std;

  auto mat = [&](const std::string& name, std::int64_t in, std::int64_t out) {
    weights_[name + ".w"] = nn::frozen_param(seed, name + ".w", {in, out}, s, dtype);
    weights_[name + ".b"] = Tensor::zeros({out}, dtype);
  };

  mat("patch", patch_dim, d);
  mat("cond", enc.d_c, d);
  mat("cp", enc.d_p, d);
  mat("t.ff1", d, d);
  mat("t.ff2", d, d);
  mat("head", d, patch_dim);

  auto block_weights = [&](const std::string& prefix, bool two_streams) {
    mat(prefix + ".mod_x", d, 6 * d);
    if (two_streams) mat(prefix + ".mod_c", d, 6 * d);
    mat(prefix + ".attn.wq", d, d);
    mat(prefix + ".attn.wk", d, d);
    mat(prefix + ".attn.wv", d, d);
    mat(prefix + ".attn.wo", d, d);
    mat(prefix + ".ffx.l1", d, cfg.ff_mult * d);
    mat(prefix + ".ffx.l2", cfg.ff_mult * d, d);
    if (two_streams) {
      mat(prefix + ".ffc.l1", d, cfg.ff_mult * d);
      mat(prefix + ".ffc.l2", cfg.ff_mult * d, d);
    }
  };
  for (std::int64_t i = 0; i < cfg.blocks; ++i) {
    block_weights("block" + std::to_string(i), true);
  }
  for (std::int64_t i = 0; i < cfg.single_blocks; ++i) {
    block_weights("single" + std::to_string(i), false);
  }
}

Tensor Generator::param(const std::string& name) const {
  const Tensor& base = weights_.at(name);
  auto it = lora_.find(name);
  if (it == lora_.end()) return base;
  // B starts at zero, so a fresh adapter reproduces the frozen weight
  // bit for bit (adding a signed zero never changes the stored value).
  Tensor delta = ops::scale(ops::matmul(it->second.down, it->second.up), it->second.scale);
  return ops::add(base, delta);
}

Tensor Generator::lin(const std::string& base, const Tensor& x) const {
  return ops::linear(x, param(base + ".w"), weights_.at(base + ".b"));
}

Tensor Generator::condition_embedding(double t, const Tensor& c_p) const {
  if (!std::isfinite(t)) throw std::invalid_argument("Generator: non-finite timestep");
  Tensor feats = nn::timestep_features(t, cfg_.d_model, dtype_);
  Tensor emb = lin("t.ff2", ops::silu(lin("t.ff1", feats)));  // [1, d]
  return ops::silu(ops::add(emb, lin("cp", c_p)));            // [b, d]
}

Modulation Generator::adaln_modulate(const Tensor& x, const Tensor& e,
                                     const std::string& prefix) const {
  const std::int64_t b = x.shape()[0];
  const std::int64_t d = cfg_.d_model;
  Tensor all = lin(prefix, e);  // [b, 6d], a function of e alone
  auto piece = [&](std::int64_t i) {
    return ops::reshape(ops::slice(all, 1, i * d, d), {b, 1, d});
  };
  Modulation m{Tensor::zeros({1}, dtype_), piece(0), piece(1), piece(2),
               piece(3),                   piece(4), piece(5)};
  m.xhat = ops::add(ops::mul(ops::layer_norm(x, -1), ops::add_scalar(m.gamma1, 1.0)), m.beta1);
  return m;
}

std::pair<Tensor, Tensor> Generator::joint_attention(const Tensor& xhat, const Tensor& chat,
                                                     std::int64_t block) const {
  if (block < 0 || block >= cfg_.blocks) {
    throw std::invalid_argument("Generator::joint_attention: block index out of range");
  }
  const std::int64_t b = xhat.shape()[0];
  const std::int64_t nx = xhat.shape()[1], nc = chat.shape()[1];
  const std::int64_t d = cfg_.d_model, heads = cfg_.heads, d0 = d / heads;
  const std::string prefix = "block" + std::to_string(block) + ".attn";

  // One projection over the fused sequence: both streams share W_Q/W_K/W_V.
  Tensor j = ops::concat({xhat, chat}, 1);  // [b, nx + nc, d]
  auto split_heads = [&](const Tensor& tens) {
    return ops::permute(ops::reshape(tens, {b, nx + nc, heads, d0}), {0, 2, 1, 3});
  };
  Tensor q = split_heads(lin(prefix + ".wq", j));
  Tensor k = split_heads(lin(prefix + ".wk", j));
  Tensor v = split_heads(lin(prefix + ".wv", j));
  Tensor scores =
      ops::scale(ops::matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(d0)));
  Tensor attn = ops::softmax(scores, -1);
  Tensor o = ops::permute(ops::matmul(attn, v), {0, 2, 1, 3});
  o = lin(prefix + ".wo", ops::reshape(o, {b, nx + nc, d}));
  return {ops::slice(o, 1, 0, nx), ops::slice(o, 1, nx, nc)};
}

Tensor Generator::patchify(const Tensor& latent) const {
  const std::int64_t b = latent.shape()[0];
  const std::int64_t C = cfg_.latent_channels, hw = cfg_.latent_hw, p = cfg_.patch;
  const std::int64_t grid = hw / p;
  Tensor t = ops::reshape(latent, {b, C, grid, p, grid, p});
  t = ops::permute(t, {0, 2, 4, 1, 3, 5});  // [b, gy, gx, C, py, px]
  return ops::reshape(t, {b, grid * grid, C * p * p});
}

Tensor Generator::unpatchify(const Tensor& tokens, std::int64_t b) const {
  const std::int64_t C = cfg_.latent_channels, hw = cfg_.latent_hw, p = cfg_.patch;
  const std::int64_t grid = hw / p;
  Tensor t = ops::reshape(tokens, {b, grid, grid, C, p, p});
  t = ops::permute(t, {0, 3, 1, 4, 2, 5});  // [b, C, gy, py, gx, px]
  return ops::reshape(t, {b, C, hw, hw});
}

GeneratorOutput Generator::forward(const Tensor& latent, const Condition& cond, double t,
                                   const std::string& tap,
                                   const std::vector<Tensor>* injections) const {
  if (!known_tap(tap)) throw ConfigError("Generator: unknown tap position '" + tap + "'");
  if (latent.shape().size() != 4 || latent.shape()[1] != cfg_.latent_channels ||
      latent.shape()[2] != cfg_.latent_hw || latent.shape()[3] != cfg_.latent_hw) {
    throw std::invalid_argument("Generator: latent shape mismatch");
  }
  const std::int64_t b = latent.shape()[0];
  if (cond.seq.shape().size() != 3 || cond.seq.shape()[0] != b ||
      cond.seq.shape()[2] != enc_.d_c) {
    throw std::invalid_argument("Generator: condition sequence shape mismatch");
  }
  if (cond.pooled.shape().size() != 2 || cond.pooled.shape()[0] != b ||
      cond.pooled.shape()[1] != enc_.d_p) {
    throw std::invalid_argument("Generator: pooled condition shape mismatch");
  }
  const std::int64_t expected_inj =
      cfg_.blocks + (cfg_.inject_single ? cfg_.single_blocks : 0);
  if (injections != nullptr && static_cast<std::int64_t>(injections->size()) != expected_inj) {
    throw std::invalid_argument("Generator: injection count mismatch");
  }

  Tensor e = condition_embedding(t, cond.pooled);

  // Image tokens carry sinusoidal positions; condition tokens enter as a
  // set, so a shifted template prefix moves no positional reference frame.
  Tensor x = lin("patch", patchify(latent));
  x = ops::add(x, ops::reshape(nn::sinusoidal_table(n_tokens_, cfg_.d_model, dtype_),
                               {1, n_tokens_, cfg_.d_model}));
  Tensor c = lin("cond", cond.seq);

  TapSet taps;
  taps.position = tap;
  auto capture = [&](const std::string& at, const Tensor& xs, const Tensor& cs) {
    if (tap == at) {
      taps.x_taps.push_back(xs);
      taps.c_taps.push_back(cs);
    }
  };

  for (std::int64_t i = 0; i < cfg_.blocks; ++i) {
    const std::string prefix = "block" + std::to_string(i);
    Modulation mx = adaln_modulate(x, e, prefix + ".mod_x");
    Modulation mc = adaln_modulate(c, e, prefix + ".mod_c");
    auto [x_a, c_a] = joint_attention(mx.xhat, mc.xhat, i);
    capture("attn", x_a, c_a);
    if (tap == "oneside") taps.c_taps.push_back(c_a);

    auto finish = [&](const Tensor& in, const Tensor& attn_out, const Modulation& m,
                      const std::string& ff) {
      Tensor mid = ops::add(in, ops::mul(m.alpha1, attn_out));
      Tensor ln = ops::layer_norm(mid, -1);
      Tensor ffin = ops::add(ops::mul(ln, ops::add_scalar(m.gamma2, 1.0)), m.beta2);
      Tensor ffout = lin(prefix + "." + ff + ".l2", ops::silu(lin(prefix + "." + ff + ".l1", ffin)));
      Tensor out = ops::add(mid, ops::mul(ffout, m.alpha2));
      return std::array<Tensor, 3>{ln, ffout, out};
    };
    auto [x_ln, x_ff, x_o] = finish(x, x_a, mx, "ffx");
    auto [c_ln, c_ff, c_o] = finish(c, c_a, mc, "ffc");
    capture("ln", x_ln, c_ln);
    capture("ff", x_ff, c_ff);
    capture("block", x_o, c_o);

    if (injections != nullptr) {
      x_o = ops::add(x_o, (*injections)[static_cast<std::size_t>(i)]);
    }
    x = x_o;
    c = c_o;
  }

  if (cfg_.single_blocks > 0) {
    // Single-stream tail: the same block algebra over the fused sequence,
    // with one modulation side and one FF.
    Tensor j = ops::concat({x, c}, 1);
    for (std::int64_t i = 0; i < cfg_.single_blocks; ++i) {
      const std::string prefix = "single" + std::to_string(i);
      Modulation m = adaln_modulate(j, e, prefix + ".mod_x");
      const std::int64_t n = j.shape()[1];
      const std::int64_t heads = cfg_.heads, d0 = cfg_.d_model / heads;
      auto split_heads = [&](const Tensor& tens) {
        return ops::permute(ops::reshape(tens, {b, n, heads, d0}), {0, 2, 1, 3});
      };
      Tensor q = split_heads(lin(prefix + ".attn.wq", m.xhat));
      Tensor k = split_heads(lin(prefix + ".attn.wk", m.xhat));
      Tensor v = split_heads(lin(prefix + ".attn.wv", m.xhat));
      Tensor scores =
          ops::scale(ops::matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(d0)));
      Tensor o = ops::permute(ops::matmul(ops::softmax(scores, -1), v), {0, 2, 1, 3});
      o = lin(prefix + ".attn.wo", ops::reshape(o, {b, n, cfg_.d_model}));

      Tensor mid = ops::add(j, ops::mul(m.alpha1, o));
      Tensor ln = ops::layer_norm(mid, -1);
      Tensor ffin = ops::add(ops::mul(ln, ops::add_scalar(m.gamma2, 1.0)), m.beta2);
      Tensor ffout = lin(prefix + ".ffx.l2", ops::silu(lin(prefix + ".ffx.l1", ffin)));
      j = ops::add(mid, ops::mul(ffout, m.alpha2));
      if (injections != nullptr && cfg_.inject_single) {
        Tensor inj = (*injections)[static_cast<std::size_t>(cfg_.blocks + i)];
        // Only the image-token span receives control; pad the c span with
        // the untouched tail.
        Tensor xpart = ops::add(ops::slice(j, 1, 0, n_tokens_), inj);
        j = ops::concat({xpart, ops::slice(j, 1, n_tokens_, n - n_tokens_)}, 1);
      }
    }
    x = ops::slice(j, 1, 0, n_tokens_);
  }

  Tensor out_tokens = lin("head", ops::layer_norm(x, -1));
  return GeneratorOutput{unpatchify(out_tokens, b), std::move(taps)};
}

Tensor Generator::sample(const Condition& cond, std::int64_t steps, std::uint64_t seed) const {
  const std::int64_t b = cond.seq.shape()[0];
  Rng rng(derive_seed(seed, "sample.noise", 0));
  Tensor noise =
      Tensor::randn({b, cfg_.latent_channels, cfg_.latent_hw, cfg_.latent_hw}, rng, dtype_, 1.0);
  return sample_from(std::move(noise), cond, steps);
}

Tensor Generator::sample_from(Tensor noise, const Condition& cond, std::int64_t steps,
                              const std::vector<Tensor>* injections) const {
  if (steps <= 0) throw std::invalid_argument("Generator::sample: steps must be positive");
  Tensor x = std::move(noise);
  const double dt = 1.0 / static_cast<double>(steps);
  for (std::int64_t i = steps; i >= 1; --i) {
    const double t = static_cast<double>(i) * dt;
    Tensor v = forward(x, cond, t, "", injections).velocity;
    x = ops::sub(x, ops::scale(v, dt));
  }
  return x;
}

void Generator::attach_lora(const std::vector<std::string>& targets, std::int64_t rank,
                            double scale, std::uint64_t seed) {
  if (rank <= 0) throw ConfigError("attach_lora: rank must be positive");
  for (const std::string& target : targets) {
    const std::string key = target + ".w";
    auto it = weights_.find(key);
    if (it == weights_.end()) {
      throw ConfigError("attach_lora: no weight matrix named '" + target + "'");
    }
    if (lora_.count(key)) {
      throw ConfigError("attach_lora: target '" + target + "' already has an adapter");
    }
    const std::int64_t in = it->second.shape()[0], out = it->second.shape()[1];
    if (rank > std::min(in, out)) {
      throw ConfigError("attach_lora: rank exceeds the smaller extent of '" + target + "'");
    }
    LoraFactor f;
    f.down = Tensor::zeros({in, rank}, dtype_);
    f.up = nn::frozen_param(seed, "lora." + key, {rank, out},
                            1.0 / std::sqrt(static_cast<double>(rank)), dtype_);
    f.scale = scale;
    f.down.set_requires_grad(true);
    f.up.set_requires_grad(true);
    lora_[key] = std::move(f);
  }
}

void Generator::clear_lora() { lora_.clear(); }

std::vector<std::pair<std::string, Tensor>> Generator::lora_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [key, f] : lora_) {
    out.emplace_back("lora." + key + ".down", f.down);
    out.emplace_back("lora." + key + ".up", f.up);
  }
  return out;
}

}  // namespace xbridge
