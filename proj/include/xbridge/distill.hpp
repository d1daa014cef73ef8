#pragma once

#include <string>
#include <vector>

#include "xbridge/mmdit.hpp"
#include "xbridge/tensor.hpp"

namespace xbridge::distill {

// The four per-layer objectives. The KL family compares per-token channel
// distributions; mse compares the raw tap features.
enum class Divergence { mse, kl, rkl, js };

// Maps a config string ("mse", "kl", "rkl", "js") to its kind.
Divergence divergence_from_name(const std::string& name);
const char* divergence_name(Divergence kind);

// softmax(a / tau) over the channel (last) axis, one distribution per token.
Tensor normalize_attn(const Tensor& a, double tau = 1.0);

// Scalar divergence between p and q of equal shape. For the KL family both
// must already be per-token distributions: kl sums p*(log(p+eps)-log(q+eps))
// over channels and averages over tokens, rkl swaps the roles (the student
// belongs in q), js is the symmetrized mean against m=(p+q)/2. mse is the
// plain mean squared difference of raw features.
Tensor divergence_loss(const Tensor& p, const Tensor& q, Divergence kind,
                       double epsilon = 1e-8);

// One scalar per block: the x- and c-side tap divergences averaged (c-side
// alone when the position captures only that stream). The teacher's taps are
// the reference p; gradients reach only the student side.
std::vector<Tensor> per_block_distill(const TapSet& student, const TapSet& teacher,
                                      Divergence kind, double tau = 1.0,
                                      double epsilon = 1e-8);

// Unweighted mean of per_block_distill over blocks.
Tensor layer_distill_loss(const TapSet& student, const TapSet& teacher, Divergence kind,
                          double tau = 1.0, double epsilon = 1e-8);

}  // namespace xbridge::distill
