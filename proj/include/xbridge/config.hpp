#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xbridge/tensor.hpp"

namespace xbridge {

// Frozen encoder stand-ins: teacher text encoders and the multimodal student.
struct EncoderConfig {
  std::int64_t vocab = 512;        // hash-bucketed byte-level tokenizer buckets
  std::int64_t max_seq = 32;       // fixed sequence length (pad-extended)
  std::int64_t d_c = 64;           // teacher sequence condition width
  std::int64_t d_p = 32;           // teacher pooled condition width
  std::int64_t z = 48;             // student shared embedding width
  std::int64_t m = 6;              // retained student layers; embedding is layer 0
  std::int64_t heads = 4;
  std::int64_t teacher_layers = 2;
  std::int64_t payload_dim = 16;   // continuous modality token width
  bool share_text_embedding = false;  // student reuses teacher embedding (needs z == d_c)
};

struct AlignNetConfig {
  std::string strategy = "CNN";         // A1 | A3_mean | ADA | CNN
  std::vector<std::int64_t> layer_subset;  // A3_mean/ADA selection; empty -> default
  std::int64_t k = 0;                   // CNN kernel taps; 0 -> m
  std::int64_t p = 0;                   // CNN layer-axis padding
  std::int64_t hidden = 96;             // projection MLP width
  bool deep_mapper = false;             // optional extra MLP stack, default off
};

struct MmditConfig {
  std::int64_t d_model = 64;
  std::int64_t heads = 4;
  std::int64_t blocks = 4;         // double-stream block count
  std::int64_t single_blocks = 0;  // optional single-stream tail
  std::int64_t ff_mult = 4;
  std::int64_t latent_channels = 4;
  std::int64_t latent_hw = 8;
  std::int64_t patch = 2;
  double init_std = 0.05;          // frozen-weight scale
  bool inject_single = false;      // feed LightControl outputs to single-stream blocks too
};

struct DistillConfig {
  std::string tap = "attn";   // attn | ln | ff | block | oneside
  std::string loss = "rkl";   // mse | kl | rkl | js
  double temperature = 1.0;
  double epsilon = 1e-8;      // probability floor before logs
};

struct LightControlConfig {
  std::int64_t blocks = 0;    // 0 -> follow the generator's block count
  std::int64_t channels = 16;
  std::int64_t image_hw = 16; // reference raster is image_hw x image_hw x 3
};

struct LoraConfig {
  std::vector<std::string> targets;  // e.g. "block0.attn.wq"
  std::int64_t rank = 2;
  double scale = 1.0;
};

struct TrainConfig {
  std::uint64_t seed = 0;
  std::int64_t steps = 2000;
  std::int64_t batch = 8;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::string pipeline = "sequential";  // sequential | overlapped
  bool strict = false;                  // forbid any reduction-order change
  double t_lo = 1.0;                    // t ~ uniform[t_lo, 1]; 1.0 pins t = 1
  std::string dtype = "f32";
  std::string prompts;       // training corpus, one prompt per line
  std::string eval_prompts;  // held-out corpus
};

struct RunConfig {
  EncoderConfig enc;
  AlignNetConfig align;
  MmditConfig gen;
  DistillConfig distill;
  LightControlConfig lc;
  LoraConfig lora;
  TrainConfig train;

  DType dtype() const;
  // Throws ConfigError on any inconsistent or out-of-range field.
  void validate() const;
};

// JSON round-trip. Parsing rejects unknown keys and validates the result.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string dump_run_config(const RunConfig& cfg);

}  // namespace xbridge
