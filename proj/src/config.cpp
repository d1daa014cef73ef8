#include "xbridge/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "xbridge/errors.hpp"

namespace xbridge {

using nlohmann::json;

DType RunConfig::dtype() const {
  if (train.dtype == "f32") return DType::f32;
  if (train.dtype == "f64") return DType::f64;
  throw ConfigError("train.dtype must be f32 or f64, got '" + train.dtype + "'");
}

namespace {

void require_positive(std::int64_t v, const char* name) {
  if (v <= 0) {
    throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(v));
  }
}

// Rejects keys that no field consumes; silent typos in config files are worse
// than a hard error.
void check_keys(const json& j, const std::string& where, const std::set<std::string>& known) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
  }
}

template <typename T>
void pick(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void RunConfig::validate() const {
  require_positive(enc.vocab, "enc.vocab");
  require_positive(enc.max_seq, "enc.max_seq");
  require_positive(enc.d_c, "enc.d_c");
  require_positive(enc.d_p, "enc.d_p");
  require_positive(enc.z, "enc.z");
  require_positive(enc.heads, "enc.heads");
  require_positive(enc.teacher_layers, "enc.teacher_layers");
  require_positive(enc.payload_dim, "enc.payload_dim");
  if (enc.m < 2) throw ConfigError("enc.m must be at least 2 (embedding plus one layer)");
  if (enc.z % enc.heads != 0) throw ConfigError("enc.z must be divisible by enc.heads");
  if (enc.d_c % enc.heads != 0) throw ConfigError("enc.d_c must be divisible by enc.heads");
  if (enc.share_text_embedding && enc.z != enc.d_c) {
    throw ConfigError("share_text_embedding requires enc.z == enc.d_c");
  }

  if (align.strategy != "A1" && align.strategy != "A3_mean" && align.strategy != "ADA" &&
      align.strategy != "CNN") {
    throw ConfigError("align.strategy must be one of A1, A3_mean, ADA, CNN, got '" +
                      align.strategy + "'");
  }
  require_positive(align.hidden, "align.hidden");
  if (align.k < 0 || align.p < 0) throw ConfigError("align.k and align.p must be non-negative");
  const std::int64_t k_eff = align.k == 0 ? enc.m : align.k;
  if (align.strategy == "CNN" && k_eff > enc.m + 2 * align.p) {
    throw ConfigError("align.k exceeds layer count plus padding");
  }
  for (std::int64_t l : align.layer_subset) {
    if (l < 0 || l >= enc.m) {
      throw ConfigError("align.layer_subset index " + std::to_string(l) + " out of range");
    }
  }

  require_positive(gen.d_model, "gen.d_model");
  require_positive(gen.heads, "gen.heads");
  require_positive(gen.blocks, "gen.blocks");
  require_positive(gen.ff_mult, "gen.ff_mult");
  require_positive(gen.latent_channels, "gen.latent_channels");
  require_positive(gen.latent_hw, "gen.latent_hw");
  require_positive(gen.patch, "gen.patch");
  if (gen.single_blocks < 0) throw ConfigError("gen.single_blocks must be non-negative");
  if (gen.d_model % gen.heads != 0) throw ConfigError("gen.d_model must be divisible by gen.heads");
  if (gen.latent_hw % gen.patch != 0) {
    throw ConfigError("gen.latent_hw must be divisible by gen.patch");
  }
  if (!(gen.init_std > 0.0)) throw ConfigError("gen.init_std must be positive");

  if (distill.tap != "attn" && distill.tap != "ln" && distill.tap != "ff" &&
      distill.tap != "block" && distill.tap != "oneside") {
    throw ConfigError("distill.tap must be one of attn, ln, ff, block, oneside, got '" +
                      distill.tap + "'");
  }
  if (distill.loss != "mse" && distill.loss != "kl" && distill.loss != "rkl" &&
      distill.loss != "js") {
    throw ConfigError("distill.loss must be one of mse, kl, rkl, js, got '" + distill.loss + "'");
  }
  if (!(distill.temperature > 0.0)) throw ConfigError("distill.temperature must be positive");
  if (!(distill.epsilon >= 0.0)) throw ConfigError("distill.epsilon must be non-negative");

  if (lc.blocks < 0) throw ConfigError("lc.blocks must be non-negative");
  require_positive(lc.channels, "lc.channels");
  require_positive(lc.image_hw, "lc.image_hw");
  const std::int64_t tokens_hw = gen.latent_hw / gen.patch;
  std::int64_t down = lc.image_hw;
  while (down > tokens_hw && down % 2 == 0) down /= 2;
  if (down != tokens_hw) {
    throw ConfigError("lc.image_hw must reduce to the token grid by stride-2 halvings");
  }

  require_positive(lora.rank, "lora.rank");
  if (!(lora.scale > 0.0)) throw ConfigError("lora.scale must be positive");

  require_positive(train.steps, "train.steps");
  require_positive(train.batch, "train.batch");
  if (!(train.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (!(train.weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
  if (!(train.beta1 >= 0.0 && train.beta1 < 1.0)) throw ConfigError("train.beta1 out of [0,1)");
  if (!(train.beta2 >= 0.0 && train.beta2 < 1.0)) throw ConfigError("train.beta2 out of [0,1)");
  if (!(train.adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
  if (train.pipeline != "sequential" && train.pipeline != "overlapped") {
    throw ConfigError("train.pipeline must be sequential or overlapped, got '" + train.pipeline +
                      "'");
  }
  if (!(train.t_lo > 0.0 && train.t_lo <= 1.0)) throw ConfigError("train.t_lo must be in (0,1]");
  dtype();  // validates train.dtype
}

namespace {

json enc_to_json(const EncoderConfig& c) {
  return json{{"vocab", c.vocab},
              {"max_seq", c.max_seq},
              {"d_c", c.d_c},
              {"d_p", c.d_p},
              {"z", c.z},
              {"m", c.m},
              {"heads", c.heads},
              {"teacher_layers", c.teacher_layers},
              {"payload_dim", c.payload_dim},
              {"share_text_embedding", c.share_text_embedding}};
}

void enc_from_json(const json& j, EncoderConfig& c) {
  check_keys(j, "enc",
             {"vocab", "max_seq", "d_c", "d_p", "z", "m", "heads", "teacher_layers", "payload_dim",
              "share_text_embedding"});
  pick(j, "vocab", c.vocab);
  pick(j, "max_seq", c.max_seq);
  pick(j, "d_c", c.d_c);
  pick(j, "d_p", c.d_p);
  pick(j, "z", c.z);
  pick(j, "m", c.m);
  pick(j, "heads", c.heads);
  pick(j, "teacher_layers", c.teacher_layers);
  pick(j, "payload_dim", c.payload_dim);
  pick(j, "share_text_embedding", c.share_text_embedding);
}

json align_to_json(const AlignNetConfig& c) {
  return json{{"strategy", c.strategy}, {"layer_subset", c.layer_subset}, {"k", c.k},
              {"p", c.p},               {"hidden", c.hidden},             {"deep_mapper", c.deep_mapper}};
}

void align_from_json(const json& j, AlignNetConfig& c) {
  check_keys(j, "align", {"strategy", "layer_subset", "k", "p", "hidden", "deep_mapper"});
  pick(j, "strategy", c.strategy);
  pick(j, "layer_subset", c.layer_subset);
  pick(j, "k", c.k);
  pick(j, "p", c.p);
  pick(j, "hidden", c.hidden);
  pick(j, "deep_mapper", c.deep_mapper);
}

json gen_to_json(const MmditConfig& c) {
  return json{{"d_model", c.d_model},
              {"heads", c.heads},
              {"blocks", c.blocks},
              {"single_blocks", c.single_blocks},
              {"ff_mult", c.ff_mult},
              {"latent_channels", c.latent_channels},
              {"latent_hw", c.latent_hw},
              {"patch", c.patch},
              {"init_std", c.init_std},
              {"inject_single", c.inject_single}};
}

void gen_from_json(const json& j, MmditConfig& c) {
  check_keys(j, "gen",
             {"d_model", "heads", "blocks", "single_blocks", "ff_mult", "latent_channels",
              "latent_hw", "patch", "init_std", "inject_single"});
  pick(j, "d_model", c.d_model);
  pick(j, "heads", c.heads);
  pick(j, "blocks", c.blocks);
  pick(j, "single_blocks", c.single_blocks);
  pick(j, "ff_mult", c.ff_mult);
  pick(j, "latent_channels", c.latent_channels);
  pick(j, "latent_hw", c.latent_hw);
  pick(j, "patch", c.patch);
  pick(j, "init_std", c.init_std);
  pick(j, "inject_single", c.inject_single);
}

json distill_to_json(const DistillConfig& c) {
  return json{{"tap", c.tap},
              {"loss", c.loss},
              {"temperature", c.temperature},
              {"epsilon", c.epsilon}};
}

void distill_from_json(const json& j, DistillConfig& c) {
  check_keys(j, "distill", {"tap", "loss", "temperature", "epsilon"});
  pick(j, "tap", c.tap);
  pick(j, "loss", c.loss);
  pick(j, "temperature", c.temperature);
  pick(j, "epsilon", c.epsilon);
}

json lc_to_json(const LightControlConfig& c) {
  return json{{"blocks", c.blocks}, {"channels", c.channels}, {"image_hw", c.image_hw}};
}

void lc_from_json(const json& j, LightControlConfig& c) {
  check_keys(j, "lc", {"blocks", "channels", "image_hw"});
  pick(j, "blocks", c.blocks);
  pick(j, "channels", c.channels);
  pick(j, "image_hw", c.image_hw);
}

json lora_to_json(const LoraConfig& c) {
  return json{{"targets", c.targets}, {"rank", c.rank}, {"scale", c.scale}};
}

void lora_from_json(const json& j, LoraConfig& c) {
  check_keys(j, "lora", {"targets", "rank", "scale"});
  pick(j, "targets", c.targets);
  pick(j, "rank", c.rank);
  pick(j, "scale", c.scale);
}

json train_to_json(const TrainConfig& c) {
  return json{{"seed", c.seed},
              {"steps", c.steps},
              {"batch", c.batch},
              {"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"pipeline", c.pipeline},
              {"strict", c.strict},
              {"t_lo", c.t_lo},
              {"dtype", c.dtype},
              {"prompts", c.prompts},
              {"eval_prompts", c.eval_prompts}};
}

void train_from_json(const json& j, TrainConfig& c) {
  check_keys(j, "train",
             {"seed", "steps", "batch", "lr", "weight_decay", "beta1", "beta2", "adam_eps",
              "pipeline", "strict", "t_lo", "dtype", "prompts", "eval_prompts"});
  pick(j, "seed", c.seed);
  pick(j, "steps", c.steps);
  pick(j, "batch", c.batch);
  pick(j, "lr", c.lr);
  pick(j, "weight_decay", c.weight_decay);
  pick(j, "beta1", c.beta1);
  pick(j, "beta2", c.beta2);
  pick(j, "adam_eps", c.adam_eps);
  pick(j, "pipeline", c.pipeline);
  pick(j, "strict", c.strict);
  pick(j, "t_lo", c.t_lo);
  pick(j, "dtype", c.dtype);
  pick(j, "prompts", c.prompts);
  pick(j, "eval_prompts", c.eval_prompts);
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, "config", {"enc", "align", "gen", "distill", "lc", "lora", "train"});
  RunConfig cfg;
  if (j.contains("enc")) enc_from_json(j.at("enc"), cfg.enc);
  if (j.contains("align")) align_from_json(j.at("align"), cfg.align);
  if (j.contains("gen")) gen_from_json(j.at("gen"), cfg.gen);
  if (j.contains("distill")) distill_from_json(j.at("distill"), cfg.distill);
  if (j.contains("lc")) lc_from_json(j.at("lc"), cfg.lc);
  if (j.contains("lora")) lora_from_json(j.at("lora"), cfg.lora);
  if (j.contains("train")) train_from_json(j.at("train"), cfg.train);
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string dump_run_config(const RunConfig& cfg) {
  json j{{"enc", enc_to_json(cfg.enc)},       {"align", align_to_json(cfg.align)},
         {"gen", gen_to_json(cfg.gen)},       {"distill", distill_to_json(cfg.distill)},
         {"lc", lc_to_json(cfg.lc)},          {"lora", lora_to_json(cfg.lora)},
         {"train", train_to_json(cfg.train)}};
  return j.dump(2);
}

}  // namespace xbridge
