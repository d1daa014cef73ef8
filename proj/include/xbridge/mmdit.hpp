#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "xbridge/condition.hpp"
#include "xbridge/config.hpp"
#include "xbridge/tensor.hpp"

namespace xbridge {

// AdaLN output for one stream of one block: the modulated input plus the
// six regressed parameters. The parameters are a function of the shared
// conditioning embedding only, never of the stream content.
struct Modulation {
  Tensor xhat;    // LN(x) * (1 + gamma1) + beta1
  Tensor gamma1, beta1, alpha1;
  Tensor gamma2, beta2, alpha2;  // each [b, 1, d]
};

// Per-block observation points, captured pairwise for the two streams.
// "oneside" keeps only the condition stream's attention output.
struct TapSet {
  std::string position;        // attn | ln | ff | block | oneside; empty = off
  std::vector<Tensor> x_taps;  // one per double-stream block
  std::vector<Tensor> c_taps;
};

struct GeneratorOutput {
  Tensor velocity;  // [b, C, H, W]
  TapSet taps;
};

// Frozen double-stream diffusion transformer over latent patches and
// condition tokens. All weights are seeded at construction and never
// trained; the only trainable state is optional LoRA factors.
class Generator {
 public:
  Generator(const MmditConfig& cfg, const EncoderConfig& enc, std::uint64_t seed,
            DType dtype = DType::f32);

  // Conditioning embedding e = SiLU(embed(t) + proj(c_p)), one row per
  // batch element.
  Tensor condition_embedding(double t, const Tensor& c_p) const;

  Modulation adaln_modulate(const Tensor& x, const Tensor& e, const std::string& prefix) const;

  // Shared-projection attention over the concatenated streams; returns the
  // post-projection outputs split back at the x/c boundary.
  std::pair<Tensor, Tensor> joint_attention(const Tensor& xhat, const Tensor& chat,
                                            std::int64_t block) const;

  // One denoiser evaluation. `tap` names an observation point or stays
  // empty; unknown names raise ConfigError. `injections`, when given, are
  // added to each double-stream block's x output in order (LightControl).
  GeneratorOutput forward(const Tensor& latent, const Condition& cond, double t,
                          const std::string& tap = "",
                          const std::vector<Tensor>* injections = nullptr) const;

  // Euler integration of the velocity field from t=1 (pure noise) to t=0.
  Tensor sample(const Condition& cond, std::int64_t steps, std::uint64_t seed) const;
  Tensor sample_from(Tensor noise, const Condition& cond, std::int64_t steps,
                     const std::vector<Tensor>* injections = nullptr) const;

  // LoRA: W stays frozen; the effective weight is W + scale * B A with B
  // zero-initialized, so a fresh adapter changes nothing. Targets name
  // weight matrices, e.g. "block0.attn.wq".
  void attach_lora(const std::vector<std::string>& targets, std::int64_t rank, double scale,
                   std::uint64_t seed);
  void clear_lora();
  std::vector<std::pair<std::string, Tensor>> lora_parameters() const;

  // Token-space round trip between [b, C, H, W] and [b, n, C*p*p].
  Tensor patchify(const Tensor& latent) const;
  Tensor unpatchify(const Tensor& tokens, std::int64_t b) const;

  std::int64_t image_tokens() const { return n_tokens_; }
  const MmditConfig& config() const { return cfg_; }
  const std::map<std::string, Tensor>& weights() const { return weights_; }

 private:
  struct LoraFactor {
    Tensor down;  // [in, rank], zeros
    Tensor up;    // [rank, out], seeded
    double scale = 1.0;
  };

  Tensor param(const std::string& name) const;  // weight with LoRA applied
  Tensor lin(const std::string& base, const Tensor& x) const;

  MmditConfig cfg_;
  EncoderConfig enc_;
  DType dtype_;
  std::int64_t n_tokens_ = 0;
  std::map<std::string, Tensor> weights_;
  std::map<std::string, LoraFactor> lora_;
};

}  // namespace xbridge
