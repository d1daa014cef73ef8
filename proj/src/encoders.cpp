#include "xbridge/encoders.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "xbridge/errors.hpp"
#include "xbridge/nn.hpp"
#include "xbridge/ops.hpp"
#include "xbridge/rng.hpp"

namespace xbridge {

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::text: return "text";
    case Modality::image: return "image";
    case Modality::video: return "video";
    case Modality::audio: return "audio";
  }
  throw std::invalid_argument("modality_name: bad enum value");
}

// ---------------------------------------------------------------------------
// Tokenizer

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

Tokenizer::Tokenizer(std::int64_t vocab) : vocab_(vocab) {
  if (vocab < 2) throw std::invalid_argument("Tokenizer: vocab must be at least 2");
}

std::int32_t Tokenizer::word_id(const std::string& word) const {
  // Bucket 0 is padding; words land in [1, vocab).
  return static_cast<std::int32_t>(1 + fnv1a(word) % static_cast<std::uint64_t>(vocab_ - 1));
}

std::vector<std::int32_t> Tokenizer::encode(const std::string& text) const {
  std::vector<std::int32_t> ids;
  std::istringstream in(text);
  std::string word;
  while (in >> word) ids.push_back(word_id(word));
  return ids;
}

TokenStream Tokenizer::stream(const std::string& text) const {
  TokenStream out;
  out.raw_text = text;
  for (std::int32_t id : encode(text)) {
    StreamToken t;
    t.kind = Modality::text;
    t.id = id;
    out.tokens.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structured template

namespace {

std::string escape_value(const std::string& v) {
  std::string out;
  out.reserve(v.size());
  for (char c : v) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

void append_text_tokens(TokenStream& stream, const Tokenizer& tok, const std::string& text) {
  for (std::int32_t id : tok.encode(text)) {
    StreamToken t;
    t.kind = Modality::text;
    t.id = id;
    stream.tokens.push_back(std::move(t));
  }
}

}  // namespace

TokenStream build_template(const TemplateParts& parts, const Tokenizer& tok) {
  const bool has_image = !parts.image_tokens.empty();
  const bool has_video = !parts.video_tokens.empty();
  const bool has_audio = !parts.audio_tokens.empty();

  TokenStream out;
  std::string text = "{\"text prompt\":\"" + escape_value(parts.text_prompt) +
                     "\",\"editing prompt\":\"" + escape_value(parts.editing_prompt) +
                     "\",\"image prompt\":\"" + (has_image ? "yes" : "no") + "\",";
  append_text_tokens(out, tok, text);
  out.raw_text = text;
  // Continuous payloads sit directly after their slot marker; the serialized
  // text skips them, so raw_text stays parseable.
  out.tokens.insert(out.tokens.end(), parts.image_tokens.begin(), parts.image_tokens.end());

  text = std::string("\"video prompt\":\"") + (has_video ? "yes" : "no") + "\",";
  append_text_tokens(out, tok, text);
  out.raw_text += text;
  out.tokens.insert(out.tokens.end(), parts.video_tokens.begin(), parts.video_tokens.end());

  text = std::string("\"audio prompt\":\"") + (has_audio ? "yes" : "no") + "\"}";
  append_text_tokens(out, tok, text);
  out.raw_text += text;
  out.tokens.insert(out.tokens.end(), parts.audio_tokens.begin(), parts.audio_tokens.end());
  return out;
}

std::map<std::string, std::string> parse_template(const std::string& serialized) {
  static const char* keys[] = {"text prompt", "editing prompt", "image prompt", "video prompt",
                               "audio prompt"};
  std::map<std::string, std::string> fields;
  for (const char* key : keys) {
    const std::string marker = std::string("\"") + key + "\":\"";
    const std::size_t at = serialized.find(marker);
    if (at == std::string::npos) {
      throw std::invalid_argument(std::string("parse_template: missing field '") + key + "'");
    }
    std::string value;
    std::size_t i = at + marker.size();
    for (;; ++i) {
      if (i >= serialized.size()) {
        throw std::invalid_argument(std::string("parse_template: unterminated value for '") + key +
                                    "'");
      }
      const char c = serialized[i];
      if (c == '\\') {
        if (i + 1 >= serialized.size()) {
          throw std::invalid_argument("parse_template: dangling escape");
        }
        value.push_back(serialized[++i]);
      } else if (c == '"') {
        break;
      } else {
        value.push_back(c);
      }
    }
    fields[key] = value;
  }
  return fields;
}

// ---------------------------------------------------------------------------
// Synthetic continuous-modality payloads

namespace {

StreamToken payload_token(Modality kind, const std::vector<double>& values, std::int64_t width) {
  StreamToken t;
  t.kind = kind;
  t.id = 1;  // continuous tokens carry a generic non-pad id
  t.payload.assign(static_cast<std::size_t>(width), 0.0);
  const std::size_t n = std::min(values.size(), t.payload.size());
  std::copy(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(n), t.payload.begin());
  return t;
}

}  // namespace

std::vector<StreamToken> synth_image_tokens(const EncoderConfig& cfg, std::uint64_t seed) {
  // An 8x8 raster cut into four 4x4 patches, row-major over the patch grid.
  constexpr std::int64_t side = 8, patch = 4;
  Rng rng(derive_seed(seed, "synth.image", 0));
  std::vector<double> raster(side * side);
  for (double& v : raster) v = rng.normal();

  std::vector<StreamToken> tokens;
  for (std::int64_t py = 0; py < side / patch; ++py) {
    for (std::int64_t px = 0; px < side / patch; ++px) {
      std::vector<double> values;
      values.reserve(patch * patch);
      for (std::int64_t y = 0; y < patch; ++y) {
        for (std::int64_t x = 0; x < patch; ++x) {
          values.push_back(raster[(py * patch + y) * side + (px * patch + x)]);
        }
      }
      tokens.push_back(payload_token(Modality::image, values, cfg.payload_dim));
    }
  }
  return tokens;
}

std::vector<StreamToken> synth_video_tokens(const EncoderConfig& cfg, std::uint64_t seed,
                                            std::int64_t frames) {
  if (frames <= 0) throw std::invalid_argument("synth_video_tokens: frames must be positive");
  std::vector<StreamToken> tokens;
  for (std::int64_t f = 0; f < frames; ++f) {
    // One patch token per frame keeps streams short at desk scale.
    Rng rng(derive_seed(seed, "synth.video", static_cast<std::uint64_t>(f)));
    std::vector<double> values(static_cast<std::size_t>(cfg.payload_dim));
    for (double& v : values) v = rng.normal();
    tokens.push_back(payload_token(Modality::video, values, cfg.payload_dim));
  }
  return tokens;
}

std::vector<StreamToken> synth_audio_tokens(const EncoderConfig& cfg, std::uint64_t seed,
                                            std::int64_t chunks) {
  if (chunks <= 0) throw std::invalid_argument("synth_audio_tokens: chunks must be positive");
  std::vector<StreamToken> tokens;
  for (std::int64_t c = 0; c < chunks; ++c) {
    Rng rng(derive_seed(seed, "synth.audio", static_cast<std::uint64_t>(c)));
    std::vector<double> values(static_cast<std::size_t>(cfg.payload_dim));
    // Audio chunks are bounded waveforms rather than gaussians.
    for (double& v : values) v = std::sin(rng.uniform(0.0, 6.283185307179586));
    tokens.push_back(payload_token(Modality::audio, values, cfg.payload_dim));
  }
  return tokens;
}

// ---------------------------------------------------------------------------
// Shared frozen-transformer pieces

namespace {

void add_block(std::map<std::string, Tensor>& w, std::uint64_t seed, const std::string& prefix,
               std::int64_t d, std::int64_t ff, DType dt) {
  nn::add_linear(w, seed, prefix + ".wq", d, d, dt);
  nn::add_linear(w, seed, prefix + ".wk", d, d, dt);
  nn::add_linear(w, seed, prefix + ".wv", d, d, dt);
  nn::add_linear(w, seed, prefix + ".wo", d, d, dt);
  nn::add_linear(w, seed, prefix + ".ff1", d, ff, dt);
  nn::add_linear(w, seed, prefix + ".ff2", ff, d, dt);
}

// Pads/truncates a stream to max_seq and produces the id row plus mask row.
void fixed_length_ids(const TokenStream& stream, std::int64_t max_seq,
                      std::vector<std::int32_t>& ids, std::vector<double>& mask) {
  ids.assign(static_cast<std::size_t>(max_seq), Tokenizer::pad_id);
  mask.assign(static_cast<std::size_t>(max_seq), 0.0);
  const std::int64_t n =
      std::min<std::int64_t>(max_seq, static_cast<std::int64_t>(stream.tokens.size()));
  for (std::int64_t i = 0; i < n; ++i) {
    ids[static_cast<std::size_t>(i)] = stream.tokens[static_cast<std::size_t>(i)].id;
    mask[static_cast<std::size_t>(i)] = 1.0;
  }
}

Tensor embed_ids(const Tensor& table, const std::vector<std::vector<std::int32_t>>& ids) {
  const std::int64_t b = static_cast<std::int64_t>(ids.size());
  const std::int64_t s = static_cast<std::int64_t>(ids.front().size());
  const std::int64_t d = table.shape()[1];
  Tensor out = Tensor::zeros({b, s, d}, table.dtype());
  dispatch_dtype(table.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = table.data<T>();
    auto dst = out.data<T>();
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t j = 0; j < s; ++j) {
        const std::int64_t row = ids[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        if (row < 0 || row >= table.shape()[0]) {
          throw std::invalid_argument("embed_ids: token id out of vocab range");
        }
        std::memcpy(&dst[(i * s + j) * d], &src[row * d], sizeof(T) * static_cast<std::size_t>(d));
      }
    }
  });
  return out;
}

Tensor mask_tensor(const std::vector<std::vector<double>>& mask, DType dt) {
  const std::int64_t b = static_cast<std::int64_t>(mask.size());
  const std::int64_t s = static_cast<std::int64_t>(mask.front().size());
  Tensor out = Tensor::zeros({b, s}, dt);
  dispatch_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    auto dst = out.data<T>();
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t j = 0; j < s; ++j)
        dst[i * s + j] =
            static_cast<T>(mask[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
  });
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// TeacherEncoder

TeacherEncoder::TeacherEncoder(const EncoderConfig& cfg, std::uint64_t seed, DType dtype)
    : cfg_(cfg), dtype_(dtype) {
  // Two independent stacks: "seq" emits the sequence condition at width d_c,
  // "pool" emits the pooled condition at width d_p.
  weights_["seq.embed"] = nn::frozen_param(seed, "seq.embed", {cfg.vocab, cfg.d_c}, 1.0, dtype);
  weights_["pool.embed"] = nn::frozen_param(seed, "pool.embed", {cfg.vocab, cfg.d_p}, 1.0, dtype);
  for (std::int64_t l = 0; l < cfg.teacher_layers; ++l) {
    add_block(weights_, seed, "seq.block" + std::to_string(l), cfg.d_c, 4 * cfg.d_c, dtype);
    add_block(weights_, seed, "pool.block" + std::to_string(l), cfg.d_p, 4 * cfg.d_p, dtype);
  }
}

TeacherCondition TeacherEncoder::encode(const std::vector<TokenStream>& prompts) const {
  if (prompts.empty()) throw std::invalid_argument("TeacherEncoder::encode: empty batch");
  std::vector<std::vector<std::int32_t>> ids(prompts.size());
  std::vector<std::vector<double>> mask(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    fixed_length_ids(prompts[i], cfg_.max_seq, ids[i], mask[i]);
  }
  Tensor m = mask_tensor(mask, dtype_);

  Tensor c = embed_ids(weights_.at("seq.embed"), ids);
  c = ops::add(c, ops::reshape(nn::sinusoidal_table(cfg_.max_seq, cfg_.d_c, dtype_),
                               {1, cfg_.max_seq, cfg_.d_c}));
  for (std::int64_t l = 0; l < cfg_.teacher_layers; ++l) {
    c = nn::encoder_block(weights_, "seq.block" + std::to_string(l), c, cfg_.heads);
  }
  c = ops::layer_norm(c, -1);

  Tensor p = embed_ids(weights_.at("pool.embed"), ids);
  p = ops::add(p, ops::reshape(nn::sinusoidal_table(cfg_.max_seq, cfg_.d_p, dtype_),
                               {1, cfg_.max_seq, cfg_.d_p}));
  for (std::int64_t l = 0; l < cfg_.teacher_layers; ++l) {
    p = nn::encoder_block(weights_, "pool.block" + std::to_string(l), p, cfg_.heads);
  }
  Tensor pooled = nn::masked_mean_pool(ops::layer_norm(p, -1), m);

  return TeacherCondition{c, pooled};
}

TeacherCondition TeacherEncoder::encode_one(const TokenStream& prompt) const {
  return encode(std::vector<TokenStream>{prompt});
}

// ---------------------------------------------------------------------------
// StudentEncoder

StudentEncoder::StudentEncoder(const EncoderConfig& cfg, std::uint64_t seed, DType dtype,
                               const TeacherEncoder* share_embedding_from)
    : cfg_(cfg), dtype_(dtype) {
  if (share_embedding_from != nullptr) {
    if (cfg.z != cfg.d_c) {
      throw ConfigError("shared text embedding requires z == d_c");
    }
    // Same storage, not a copy: the option exists to test embedding reuse.
    weights_["embed"] = share_embedding_from->weights_.at("seq.embed");
  } else {
    weights_["embed"] = nn::frozen_param(seed, "embed", {cfg.vocab, cfg.z}, 1.0, dtype);
  }
  weights_["modality.embed"] = nn::frozen_param(seed, "modality.embed", {4, cfg.z}, 1.0, dtype);
  nn::add_linear(weights_, seed, "payload.proj", cfg.payload_dim, cfg.z, dtype);
  for (std::int64_t l = 0; l + 1 < cfg.m; ++l) {
    add_block(weights_, seed, "block" + std::to_string(l), cfg.z, 4 * cfg.z, dtype);
  }
}

HiddenStateStack StudentEncoder::encode(const std::vector<TokenStream>& streams) const {
  if (streams.empty()) throw std::invalid_argument("StudentEncoder::encode: empty batch");
  const std::int64_t b = static_cast<std::int64_t>(streams.size());
  const std::int64_t s = cfg_.max_seq, z = cfg_.z;

  // Layer 0: token content only. Text tokens take an embedding row; payload
  // tokens take a frozen projection plus their modality's type embedding.
  // No positional term, so swapping two input tokens swaps layer-0 rows
  // exactly.
  Tensor layer0 = Tensor::zeros({b, s, z}, dtype_);
  std::vector<std::vector<double>> mask(streams.size());
  dispatch_dtype(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto embed = weights_.at("embed").data<T>();
    auto mod_embed = weights_.at("modality.embed").data<T>();
    auto pw = weights_.at("payload.proj.w").data<T>();
    auto pb = weights_.at("payload.proj.b").data<T>();
    auto dst = layer0.data<T>();
    for (std::int64_t i = 0; i < b; ++i) {
      const auto& toks = streams[static_cast<std::size_t>(i)].tokens;
      mask[static_cast<std::size_t>(i)].assign(static_cast<std::size_t>(s), 0.0);
      const std::int64_t n = std::min<std::int64_t>(s, static_cast<std::int64_t>(toks.size()));
      for (std::int64_t j = 0; j < n; ++j) {
        const StreamToken& t = toks[static_cast<std::size_t>(j)];
        mask[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = 1.0;
        T* row = &dst[(i * s + j) * z];
        if (t.kind == Modality::text) {
          if (t.id < 0 || t.id >= cfg_.vocab) {
            throw std::invalid_argument("StudentEncoder: token id out of vocab range");
          }
          std::memcpy(row, &embed[t.id * z], sizeof(T) * static_cast<std::size_t>(z));
        } else {
          if (static_cast<std::int64_t>(t.payload.size()) != cfg_.payload_dim) {
            throw std::invalid_argument("StudentEncoder: payload width mismatch");
          }
          const std::int64_t kind = static_cast<std::int64_t>(t.kind);
          for (std::int64_t c = 0; c < z; ++c) {
            double acc = static_cast<double>(pb[c]);
            for (std::int64_t u = 0; u < cfg_.payload_dim; ++u) {
              acc += t.payload[static_cast<std::size_t>(u)] * static_cast<double>(pw[u * z + c]);
            }
            row[c] = static_cast<T>(acc + static_cast<double>(mod_embed[kind * z + c]));
          }
        }
      }
      // Padding rows stay zero.
    }
  });
  Tensor m = mask_tensor(mask, dtype_);

  std::vector<Tensor> layers;
  layers.push_back(layer0);
  Tensor x = ops::add(layer0, ops::reshape(nn::sinusoidal_table(s, z, dtype_), {1, s, z}));
  for (std::int64_t l = 0; l + 1 < cfg_.m; ++l) {
    x = nn::encoder_block(weights_, "block" + std::to_string(l), x, cfg_.heads);
    layers.push_back(x);
  }

  Tensor h = Tensor::zeros({b, cfg_.m, s, z}, dtype_);
  dispatch_dtype(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto dst = h.data<T>();
    for (std::int64_t l = 0; l < cfg_.m; ++l) {
      auto src = layers[static_cast<std::size_t>(l)].data<T>();
      for (std::int64_t i = 0; i < b; ++i) {
        std::memcpy(&dst[((i * cfg_.m + l) * s) * z], &src[i * s * z],
                    sizeof(T) * static_cast<std::size_t>(s * z));
      }
    }
  });
  return HiddenStateStack{h, m};
}

HiddenStateStack StudentEncoder::encode_one(const TokenStream& stream) const {
  return encode(std::vector<TokenStream>{stream});
}

}  // namespace xbridge
