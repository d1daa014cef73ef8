#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xbridge/condition.hpp"
#include "xbridge/config.hpp"
#include "xbridge/tensor.hpp"

namespace xbridge {

enum class Modality { text, image, video, audio };

const char* modality_name(Modality m);

// One element of a multimodal input stream: either a discrete text token
// (payload empty) or a continuous payload vector from a non-text modality.
struct StreamToken {
  Modality kind = Modality::text;
  std::int32_t id = 0;                // discrete id; 0 is reserved for padding
  std::vector<double> payload;       // fixed width per config for non-text kinds
};

struct TokenStream {
  std::vector<StreamToken> tokens;
  std::string raw_text;  // serialized template text, kept for round-trip parsing
};

// Whitespace-splitting hash-bucket tokenizer. Stable across runs and
// platforms: ids depend only on the word bytes and the vocab size.
class Tokenizer {
 public:
  static constexpr std::int32_t pad_id = 0;

  explicit Tokenizer(std::int64_t vocab);
  std::int32_t word_id(const std::string& word) const;
  std::vector<std::int32_t> encode(const std::string& text) const;
  TokenStream stream(const std::string& text) const;  // text-only stream

 private:
  std::int64_t vocab_;
};

// Structured-template assembly. Every prompt the pipeline sees is the same
// key/value form; absent modalities still appear with a "no" marker so the
// serialization has a fixed skeleton.
struct TemplateParts {
  std::string text_prompt;
  std::string editing_prompt;
  std::vector<StreamToken> image_tokens;
  std::vector<StreamToken> video_tokens;
  std::vector<StreamToken> audio_tokens;
};

TokenStream build_template(const TemplateParts& parts, const Tokenizer& tok);
// Recovers the five field values ("text prompt", "editing prompt",
// "image prompt", "video prompt", "audio prompt") from a serialized template.
std::map<std::string, std::string> parse_template(const std::string& serialized);

// Deterministic synthetic payload tokens for the non-text modalities: images
// are cut into patches, videos into per-frame patch runs, audio into chunks.
// Every payload is padded/projected to cfg.payload_dim entries.
std::vector<StreamToken> synth_image_tokens(const EncoderConfig& cfg, std::uint64_t seed);
std::vector<StreamToken> synth_video_tokens(const EncoderConfig& cfg, std::uint64_t seed,
                                            std::int64_t frames);
std::vector<StreamToken> synth_audio_tokens(const EncoderConfig& cfg, std::uint64_t seed,
                                            std::int64_t chunks);

// Stack of retained student hidden states plus the padding mask that
// produced them.
struct HiddenStateStack {
  Tensor h;     // [b, m, s, z]
  Tensor mask;  // [b, s], 1.0 at real tokens, 0.0 at padding
};

// Frozen teacher: a seeded sequence encoder (width d_c) and a separate
// seeded pooled encoder (width d_p). Weights never require gradients.
class TeacherEncoder {
 public:
  TeacherEncoder(const EncoderConfig& cfg, std::uint64_t seed, DType dtype = DType::f32);

  TeacherCondition encode(const std::vector<TokenStream>& prompts) const;
  TeacherCondition encode_one(const TokenStream& prompt) const;

  const EncoderConfig& config() const { return cfg_; }
  const std::map<std::string, Tensor>& weights() const { return weights_; }

 private:
  EncoderConfig cfg_;
  DType dtype_;
  std::map<std::string, Tensor> weights_;
  friend class StudentEncoder;
};

// Frozen student stand-in for the multimodal LLM. encode() returns the
// embedding output (layer 0) plus every subsequent transformer layer,
// m layers in total. Layer 0 carries no positional signal, so reordering
// two input tokens permutes layer 0 rows exactly.
class StudentEncoder {
 public:
  StudentEncoder(const EncoderConfig& cfg, std::uint64_t seed, DType dtype = DType::f32,
                 const TeacherEncoder* share_embedding_from = nullptr);

  HiddenStateStack encode(const std::vector<TokenStream>& streams) const;
  HiddenStateStack encode_one(const TokenStream& stream) const;

  const EncoderConfig& config() const { return cfg_; }
  const std::map<std::string, Tensor>& weights() const { return weights_; }

 private:
  EncoderConfig cfg_;
  DType dtype_;
  std::map<std::string, Tensor> weights_;
};

}  // namespace xbridge
