#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "xbridge/condition.hpp"
#include "xbridge/config.hpp"
#include "xbridge/encoders.hpp"
#include "xbridge/tensor.hpp"

namespace xbridge {

// The trainable bridge from student hidden states to generator conditioning.
// fuse() collapses the layer axis to one sequence, project() maps it onto
// the teacher's two condition widths. Both projection heads end in a
// zero-initialized layer, so a fresh AlignNet emits exactly zero.
class AlignNet {
 public:
  AlignNet(const AlignNetConfig& cfg, const EncoderConfig& enc, std::uint64_t seed,
           DType dtype = DType::f32);

  // h [b, m, s, z] -> [b, s, z]. Linear in h for every strategy (ADA at
  // fixed weights).
  Tensor fuse(const Tensor& h) const;

  // fused [b, s, z] + mask [b, s] -> sequence head y [b, s, d_c] and pooled
  // head y_p [b, d_p] (masked mean-pool feeds the pooled head).
  AlignedCondition project(const Tensor& fused, const Tensor& mask) const;

  AlignedCondition forward(const HiddenStateStack& stack) const;

  // Trainable parameters in stable name order; all have requires_grad set.
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  std::int64_t parameter_count() const;

  // Softmax-normalized per-layer weights (ADA only; throws otherwise).
  std::vector<double> ada_weights() const;

  const AlignNetConfig& config() const { return cfg_; }
  const std::vector<std::int64_t>& layer_subset() const { return subset_; }

 private:
  AlignNetConfig cfg_;
  EncoderConfig enc_;
  DType dtype_;
  std::int64_t k_ = 0;  // resolved CNN taps
  std::vector<std::int64_t> subset_;
  std::map<std::string, Tensor> params_;
};

}  // namespace xbridge
