#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "xbridge/config.hpp"
#include "xbridge/tensor.hpp"

namespace xbridge {

// Stage-2 fidelity path: a ResNet stack running parallel to the generator.
// A stem of stride-2 convs brings the reference raster down to the image
// token grid, the pooled condition is broadcast into the first block, and
// every block's state leaves through a zero-initialized 1x1 projection --
// so a fresh LightControl injects exactly zero everywhere.
class LightControl {
 public:
  LightControl(const LightControlConfig& cfg, const MmditConfig& gen,
               const EncoderConfig& enc, std::uint64_t seed, DType dtype = DType::f32);

  // c_i [b, 3, image_hw, image_hw], c_p [b, d_p] -> one [b, tokens, d_model]
  // additive injection per injected generator block, in block order.
  std::vector<Tensor> forward(const Tensor& c_i, const Tensor& c_p) const;

  // Trainable parameters in stable name order.
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  std::int64_t parameter_count() const;
  std::int64_t block_count() const { return blocks_; }

  std::map<std::string, Tensor>& weights() { return params_; }

 private:
  LightControlConfig cfg_;
  DType dtype_;
  std::int64_t d_model_ = 0;
  std::int64_t d_p_ = 0;
  std::int64_t grid_ = 0;    // image token grid edge
  std::int64_t stems_ = 0;   // stride-2 stem convs (>=1; first maps 3 -> ch)
  std::int64_t blocks_ = 0;  // ResNet blocks == injections required
  std::map<std::string, Tensor> params_;
};

// One synthetic stage-2 sample: an edge-map raster and the filled-shape
// latent it should reconstruct.
struct StylePair {
  Tensor reference;  // [3, image_hw, image_hw]
  Tensor target;     // [latent_channels, latent_hw, latent_hw]
};

// Seeded rectangle corpus: the reference traces the outline, the target
// fills the interior across latent channels with alternating sign.
std::vector<StylePair> make_style_pairs(const LightControlConfig& lc,
                                        const MmditConfig& gen, std::int64_t count,
                                        std::uint64_t seed, DType dtype = DType::f32);

// Flat binary dump (reference, target alternating) plus a JSON sidecar
// describing count, shapes, and dtype; load round-trips bitwise.
void dump_style_pairs(const std::vector<StylePair>& pairs, const std::string& prefix);
std::vector<StylePair> load_style_pairs(const std::string& prefix);

}  // namespace xbridge
