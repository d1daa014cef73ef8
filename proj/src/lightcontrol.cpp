#include "xbridge/lightcontrol.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "xbridge/errors.hpp"
#include "xbridge/ops.hpp"
#include "xbridge/rng.hpp"

namespace xbridge {

using nlohmann::json;

LightControl::LightControl(const LightControlConfig& cfg, const MmditConfig& gen,
                           const EncoderConfig& enc, std::uint64_t seed, DType dtype)
    : cfg_(cfg), dtype_(dtype), d_model_(gen.d_model), d_p_(enc.d_p) {
  const std::int64_t required =
      gen.blocks + (gen.inject_single ? gen.single_blocks : 0);
  if (cfg_.blocks != 0 && cfg_.blocks != required) {
    throw ConfigError("lightcontrol: " + std::to_string(cfg_.blocks) +
                      " blocks cannot feed " + std::to_string(required) +
                      " generator injection points");
  }
  blocks_ = required;
  grid_ = gen.latent_hw / gen.patch;

  std::int64_t hw = cfg_.image_hw;
  std::int64_t halvings = 0;
  while (hw > grid_) {
    if (hw % 2 != 0) throw ConfigError("lightcontrol: image_hw does not reduce to the token grid");
    hw /= 2;
    ++halvings;
  }
  if (hw != grid_) throw ConfigError("lightcontrol: image_hw does not reduce to the token grid");
  stems_ = halvings == 0 ? 1 : halvings;

  const std::int64_t ch = cfg_.channels;
  auto add_conv = [&](const std::string& name, std::int64_t co, std::int64_t ci,
                      std::int64_t k, bool zero) {
    Tensor w;
    if (zero) {
      w = Tensor::zeros({co, ci, k, k}, dtype_);
    } else {
      Rng rng(derive_seed(seed, name, 0));
      w = Tensor::randn({co, ci, k, k}, rng, dtype_,
                        1.0 / std::sqrt(static_cast<double>(ci * k * k)));
    }
    params_.emplace(name + ".w", w.set_requires_grad(true));
    params_.emplace(name + ".b", Tensor::zeros({co}, dtype_).set_requires_grad(true));
  };

  for (std::int64_t i = 0; i < stems_; ++i) {
    add_conv("stem" + std::to_string(i), ch, i == 0 ? 3 : ch, 3, false);
  }
  {
    Rng rng(derive_seed(seed, "cp", 0));
    Tensor w = Tensor::randn({d_p_, ch}, rng, dtype_,
                             1.0 / std::sqrt(static_cast<double>(d_p_)));
    params_.emplace("cp.w", w.set_requires_grad(true));
    params_.emplace("cp.b", Tensor::zeros({ch}, dtype_).set_requires_grad(true));
  }
  for (std::int64_t l = 0; l < blocks_; ++l) {
    const std::string b = "block" + std::to_string(l);
    add_conv(b + ".c1", ch, ch, 3, false);
    add_conv(b + ".c2", ch, ch, 3, false);
    // The per-block exit: zero so a fresh stack injects nothing.
    add_conv("proj" + std::to_string(l), d_model_, ch, 1, true);
  }
}

std::vector<Tensor> LightControl::forward(const Tensor& c_i, const Tensor& c_p) const {
  const Shape want{c_i.shape().empty() ? 0 : c_i.shape()[0], 3, cfg_.image_hw, cfg_.image_hw};
  if (c_i.shape() != want) {
    throw ConfigError("lightcontrol: reference image must be [b, 3, " +
                      std::to_string(cfg_.image_hw) + ", " + std::to_string(cfg_.image_hw) + "]");
  }
  const std::int64_t b = c_i.shape()[0];
  if (c_p.shape() != Shape{b, d_p_}) {
    throw ConfigError("lightcontrol: pooled condition must be [b, " + std::to_string(d_p_) + "]");
  }

  Tensor x = c_i;
  for (std::int64_t i = 0; i < stems_; ++i) {
    const std::string s = "stem" + std::to_string(i);
    const std::int64_t stride = cfg_.image_hw == grid_ ? 1 : 2;
    x = ops::silu(ops::conv2d(x, params_.at(s + ".w"), params_.at(s + ".b"), stride, 1));
  }

  // Broadcast the projected pooled condition over the grid via an outer
  // product with ones; the constant carries no gradient of its own.
  Tensor proj = ops::linear(c_p, params_.at("cp.w"), params_.at("cp.b"));
  Tensor ones = Tensor::full({1, grid_ * grid_}, 1.0, dtype_);
  Tensor spread = ops::reshape(
      ops::matmul(ops::reshape(proj, {b * cfg_.channels, 1}), ones),
      {b, cfg_.channels, grid_, grid_});
  x = ops::add(x, spread);

  std::vector<Tensor> injections;
  injections.reserve(blocks_);
  for (std::int64_t l = 0; l < blocks_; ++l) {
    const std::string blk = "block" + std::to_string(l);
    Tensor t = ops::conv2d(x, params_.at(blk + ".c1.w"), params_.at(blk + ".c1.b"), 1, 1);
    t = ops::silu(ops::layer_norm(t, 1));
    t = ops::conv2d(t, params_.at(blk + ".c2.w"), params_.at(blk + ".c2.b"), 1, 1);
    x = ops::add(x, t);

    const std::string prj = "proj" + std::to_string(l);
    Tensor y = ops::conv2d(x, params_.at(prj + ".w"), params_.at(prj + ".b"), 1, 0);
    injections.push_back(
        ops::reshape(ops::permute(y, {0, 2, 3, 1}), {b, grid_ * grid_, d_model_}));
  }
  return injections;
}

std::vector<std::pair<std::string, Tensor>> LightControl::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.emplace_back(name, t);
  return out;
}

std::int64_t LightControl::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

std::vector<StylePair> make_style_pairs(const LightControlConfig& lc, const MmditConfig& gen,
                                        std::int64_t count, std::uint64_t seed, DType dtype) {
  if (count <= 0) throw std::invalid_argument("make_style_pairs: count must be positive");
  const std::int64_t hw = lc.image_hw;
  const std::int64_t lhw = gen.latent_hw;
  const std::int64_t c = gen.latent_channels;
  if (hw < 4 || hw % lhw != 0) {
    throw ConfigError("make_style_pairs: image_hw must be a multiple of latent_hw");
  }
  const std::int64_t f = hw / lhw;

  std::vector<StylePair> pairs;
  pairs.reserve(count);
  for (std::int64_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, "style_pair", static_cast<std::uint64_t>(i)));
    const std::int64_t r0 = rng.below(hw - 3);
    const std::int64_t r1 = r0 + 3 + rng.below(hw - r0 - 2);
    const std::int64_t c0 = rng.below(hw - 3);
    const std::int64_t c1 = c0 + 3 + rng.below(hw - c0 - 2);

    // Reference: the rectangle's outline, fading across the three channels.
    std::vector<double> ref(3 * hw * hw, 0.0);
    for (std::int64_t r = r0; r < r1; ++r) {
      for (std::int64_t col = c0; col < c1; ++col) {
        const bool edge = r == r0 || r == r1 - 1 || col == c0 || col == c1 - 1;
        if (!edge) continue;
        for (std::int64_t ch = 0; ch < 3; ++ch) {
          ref[(ch * hw + r) * hw + col] = 1.0 - 0.25 * static_cast<double>(ch);
        }
      }
    }

    // Target: latent cells fully inside the rectangle filled positive, the
    // rest negative, scaled per channel.
    std::vector<double> tgt(c * lhw * lhw, 0.0);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double level = static_cast<double>(ch + 1) / static_cast<double>(c);
      for (std::int64_t r = 0; r < lhw; ++r) {
        for (std::int64_t col = 0; col < lhw; ++col) {
          const bool inside = r * f >= r0 && (r + 1) * f <= r1 && col * f >= c0 &&
                              (col + 1) * f <= c1;
          tgt[(ch * lhw + r) * lhw + col] = inside ? level : -0.25 * level;
        }
      }
    }

    pairs.push_back({Tensor::from_vector(ref, {3, hw, hw}, dtype),
                     Tensor::from_vector(tgt, {c, lhw, lhw}, dtype)});
  }
  return pairs;
}

void dump_style_pairs(const std::vector<StylePair>& pairs, const std::string& prefix) {
  if (pairs.empty()) throw std::invalid_argument("dump_style_pairs: empty corpus");
  json side{{"count", pairs.size()},
            {"reference_shape", pairs[0].reference.shape()},
            {"target_shape", pairs[0].target.shape()},
            {"dtype", dtype_name(pairs[0].reference.dtype())}};
  std::ofstream meta(prefix + ".json", std::ios::trunc);
  if (!meta) throw std::runtime_error("dump_style_pairs: cannot write '" + prefix + ".json'");
  meta << side.dump(2) << "\n";

  std::ofstream bin(prefix + ".bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("dump_style_pairs: cannot write '" + prefix + ".bin'");
  for (const StylePair& p : pairs) {
    for (const Tensor* t : {&p.reference, &p.target}) {
      bin.write(reinterpret_cast<const char*>(t->bytes().data()),
                static_cast<std::streamsize>(t->bytes().size()));
    }
  }
  if (!bin) throw std::runtime_error("dump_style_pairs: short write to '" + prefix + ".bin'");
}

std::vector<StylePair> load_style_pairs(const std::string& prefix) {
  std::ifstream meta(prefix + ".json");
  if (!meta) throw std::runtime_error("load_style_pairs: cannot open '" + prefix + ".json'");
  json side;
  try {
    meta >> side;
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("load_style_pairs: malformed sidecar: ") + e.what());
  }

  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("load_style_pairs: cannot open '" + prefix + ".bin'");
  std::vector<char> raw((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  try {
    const std::int64_t count = side.at("count").get<std::int64_t>();
    const Shape ref_shape = side.at("reference_shape").get<Shape>();
    const Shape tgt_shape = side.at("target_shape").get<Shape>();
    const std::string dt_name = side.at("dtype").get<std::string>();
    if (dt_name != "f32" && dt_name != "f64") {
      throw std::runtime_error("load_style_pairs: unknown dtype '" + dt_name + "'");
    }
    const DType dt = dt_name == "f32" ? DType::f32 : DType::f64;

    std::vector<StylePair> pairs;
    pairs.reserve(count);
    std::size_t off = 0;
    for (std::int64_t i = 0; i < count; ++i) {
      StylePair p{Tensor::zeros(ref_shape, dt), Tensor::zeros(tgt_shape, dt)};
      for (Tensor* t : {&p.reference, &p.target}) {
        const std::size_t n = t->bytes().size();
        if (off + n > raw.size()) {
          throw std::runtime_error("load_style_pairs: truncated '" + prefix + ".bin'");
        }
        std::memcpy(t->bytes_mut().data(), raw.data() + off, n);
        off += n;
      }
      pairs.push_back(std::move(p));
    }
    if (off != raw.size()) {
      throw std::runtime_error("load_style_pairs: trailing bytes in '" + prefix + ".bin'");
    }
    return pairs;
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("load_style_pairs: malformed sidecar: ") + e.what());
  }
}

}  // namespace xbridge
