#include "xbridge/alignnet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "xbridge/errors.hpp"
#include "xbridge/nn.hpp"
#include "xbridge/ops.hpp"

namespace xbridge {

AlignNet::AlignNet(const AlignNetConfig& cfg, const EncoderConfig& enc, std::uint64_t seed,
                   DType dtype)
    : cfg_(cfg), enc_(enc), dtype_(dtype) {
  k_ = cfg.k == 0 ? enc.m : cfg.k;

  if (cfg.strategy == "A1" || cfg.strategy == "CNN") {
    // No layer subset: A1 reads the last layer, CNN spans all of them.
  } else if (cfg.strategy == "A3_mean") {
    subset_ = cfg.layer_subset;
    if (subset_.empty()) subset_ = {0, enc.m - 2, enc.m - 1};
  } else if (cfg.strategy == "ADA") {
    subset_ = cfg.layer_subset;
    if (subset_.empty()) {
      subset_.resize(static_cast<std::size_t>(enc.m));
      for (std::int64_t l = 0; l < enc.m; ++l) subset_[static_cast<std::size_t>(l)] = l;
    }
  } else {
    throw ConfigError("AlignNet: unknown strategy '" + cfg.strategy + "'");
  }
  // Repeated subset entries would double-count a layer silently.
  std::vector<std::int64_t> sorted = subset_;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError("AlignNet: layer_subset has duplicate entries");
  }
  for (std::int64_t l : subset_) {
    if (l < 0 || l >= enc.m) throw ConfigError("AlignNet: layer_subset index out of range");
  }
  if (cfg.strategy == "CNN" && k_ > enc.m + 2 * cfg.p) {
    throw ConfigError("AlignNet: kernel taps exceed layer count plus padding");
  }

  if (cfg.strategy == "ADA") {
    // Zero logits -> uniform softmax -> plain layer mean at initialization.
    Tensor logits = Tensor::zeros({static_cast<std::int64_t>(subset_.size())}, dtype);
    params_["ada.logits"] = logits;
  } else if (cfg.strategy == "CNN") {
    Tensor kernel = Tensor::full({k_}, 1.0 / static_cast<double>(k_), dtype);
    params_["fuse.kernel"] = kernel;
  }

  nn::add_linear(params_, seed, "head_y.l1", enc.z, cfg.hidden, dtype);
  nn::add_linear(params_, seed, "head_p.l1", enc.z, cfg.hidden, dtype);
  if (cfg.deep_mapper) {
    nn::add_linear(params_, seed, "head_y.mid", cfg.hidden, cfg.hidden, dtype);
    nn::add_linear(params_, seed, "head_p.mid", cfg.hidden, cfg.hidden, dtype);
  }
  // Zero-initialized final layers: a fresh AlignNet contributes nothing, so
  // conditioning starts from silence rather than noise.
  nn::add_zero_linear(params_, "head_y.l2", cfg.hidden, enc.d_c, dtype);
  nn::add_zero_linear(params_, "head_p.l2", cfg.hidden, enc.d_p, dtype);

  for (auto& [name, t] : params_) t.set_requires_grad(true);
}

Tensor AlignNet::fuse(const Tensor& h) const {
  if (h.shape().size() != 4) throw std::invalid_argument("AlignNet::fuse: expected rank-4 input");
  const std::int64_t b = h.shape()[0], m = h.shape()[1], s = h.shape()[2], z = h.shape()[3];
  if (m != enc_.m || z != enc_.z) {
    throw std::invalid_argument("AlignNet::fuse: layer count or width mismatch");
  }

  if (cfg_.strategy == "A1") {
    return ops::reshape(ops::slice(h, 1, m - 1, 1), {b, s, z});
  }
  if (cfg_.strategy == "A3_mean") {
    Tensor acc = ops::reshape(ops::slice(h, 1, subset_[0], 1), {b, s, z});
    for (std::size_t i = 1; i < subset_.size(); ++i) {
      acc = ops::add(acc, ops::reshape(ops::slice(h, 1, subset_[i], 1), {b, s, z}));
    }
    return ops::scale(acc, 1.0 / static_cast<double>(subset_.size()));
  }
  if (cfg_.strategy == "ADA") {
    const std::int64_t n = static_cast<std::int64_t>(subset_.size());
    Tensor sel = h;
    if (n != m) {
      std::vector<Tensor> slices;
      for (std::int64_t l : subset_) slices.push_back(ops::slice(h, 1, l, 1));
      sel = ops::concat(slices, 1);
    }
    Tensor w = ops::reshape(ops::softmax(params_.at("ada.logits"), 0), {n, 1, 1});
    return ops::sum_axis(ops::mul(sel, w), 1);
  }
  // CNN: slide the kernel along the layer axis and average the positions;
  // the result is a learned weighted sum over layers.
  return ops::reshape(ops::conv_layers(h, params_.at("fuse.kernel"), k_, cfg_.p), {b, s, z});
}

AlignedCondition AlignNet::project(const Tensor& fused, const Tensor& mask) const {
  Tensor hy = ops::silu(nn::apply_linear(params_, "head_y.l1", fused));
  if (cfg_.deep_mapper) hy = ops::silu(nn::apply_linear(params_, "head_y.mid", hy));
  Tensor y = nn::apply_linear(params_, "head_y.l2", hy);

  Tensor pooled = nn::masked_mean_pool(fused, mask);
  Tensor hp = ops::silu(nn::apply_linear(params_, "head_p.l1", pooled));
  if (cfg_.deep_mapper) hp = ops::silu(nn::apply_linear(params_, "head_p.mid", hp));
  Tensor y_p = nn::apply_linear(params_, "head_p.l2", hp);

  return AlignedCondition{y, y_p};
}

AlignedCondition AlignNet::forward(const HiddenStateStack& stack) const {
  return project(fuse(stack.h), stack.mask);
}

std::vector<std::pair<std::string, Tensor>> AlignNet::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.emplace_back(name, t);
  return out;
}

std::int64_t AlignNet::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

std::vector<double> AlignNet::ada_weights() const {
  if (cfg_.strategy != "ADA") {
    throw std::invalid_argument("AlignNet::ada_weights: strategy is not ADA");
  }
  const Tensor& logits = params_.at("ada.logits");
  std::vector<double> raw = logits.to_vector();
  double mx = raw[0];
  for (double v : raw) mx = std::max(mx, v);
  double sum = 0.0;
  for (double& v : raw) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : raw) v /= sum;
  return raw;
}

}  // namespace xbridge
