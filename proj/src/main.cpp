// x2i — command surface for the encoder-bridging laboratory. One process
// per command; every write lands inside --out; errors come out as a single
// JSON line on stderr (bad config -> exit 2, runtime failure -> exit 1).

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xbridge/checkpoint.hpp"
#include "xbridge/config.hpp"
#include "xbridge/distill.hpp"
#include "xbridge/errors.hpp"
#include "xbridge/metrics.hpp"
#include "xbridge/ops.hpp"
#include "xbridge/rng.hpp"
#include "xbridge/tensor.hpp"
#include "xbridge/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Flag values plus the CLI11 handles needed to tell "given" from "default";
// only flags the user actually passed may override config-file fields.
struct Flags {
  std::string config_path;
  std::string out;
  std::string ckpt;
  std::string axis;
  std::string tap;
  std::string loss;
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  bool strict = false;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* steps_opt = nullptr;
  CLI::Option* tap_opt = nullptr;
  CLI::Option* loss_opt = nullptr;
};

void add_common(CLI::App& cmd, Flags& f, bool with_ckpt) {
  cmd.add_option("--config", f.config_path, "JSON run config; flags override file fields");
  cmd.add_option("--out", f.out, "output directory; all files are written under it");
  f.seed_opt = cmd.add_option("--seed", f.seed, "run seed");
  f.steps_opt = cmd.add_option("--steps", f.steps, "step count");
  f.tap_opt = cmd.add_option("--tap", f.tap, "feature tap: attn|ln|ff|block|oneside");
  f.loss_opt = cmd.add_option("--loss", f.loss, "divergence: mse|kl|rkl|js");
  cmd.add_flag("--strict", f.strict, "bitwise determinism mode");
  if (with_ckpt) cmd.add_option("--ckpt", f.ckpt, "stage-1 checkpoint to load");
}

xbridge::RunConfig resolve_config(const Flags& f) {
  xbridge::RunConfig cfg;
  if (!f.config_path.empty()) cfg = xbridge::load_run_config(f.config_path);
  if (f.seed_opt != nullptr && *f.seed_opt) cfg.train.seed = f.seed;
  if (f.steps_opt != nullptr && *f.steps_opt) cfg.train.steps = f.steps;
  if (f.tap_opt != nullptr && *f.tap_opt) cfg.distill.tap = f.tap;
  if (f.loss_opt != nullptr && *f.loss_opt) cfg.distill.loss = f.loss;
  if (f.strict) cfg.train.strict = true;
  cfg.validate();
  return cfg;
}

void need_out(const Flags& f, const char* verb) {
  if (f.out.empty())
    throw xbridge::ConfigError(std::string(verb) + ": --out is required");
}

// Every run echoes the exact config it resolved to, next to its outputs,
// so the run can be reproduced from the artifacts alone.
void write_resolved(const xbridge::RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const fs::path path = fs::path(out_dir) / "config.json";
  std::ofstream file(path);
  if (!file) throw std::runtime_error("cannot write " + path.string());
  file << xbridge::dump_run_config(cfg) << "\n";
}

void print_result(const json& j) { std::printf("%s\n", j.dump().c_str()); }

json train_result_json(const char* verb, const xbridge::TrainResult& res) {
  json j{{"verb", verb},
         {"initial_loss", res.initial_loss},
         {"smoothed_loss", res.smoothed_loss},
         {"wall_seconds", res.wall_seconds},
         {"checkpoint", res.checkpoint_path},
         {"log", res.log_path}};
  for (const auto& [key, value] : res.extras) j[key] = value;
  return j;
}

std::vector<std::string> eval_lines(const xbridge::RunConfig& cfg, const char* verb) {
  if (cfg.train.eval_prompts.empty())
    throw xbridge::ConfigError(std::string(verb) + ": config needs train.eval_prompts");
  return xbridge::load_prompt_lines(cfg.train.eval_prompts);
}

xbridge::Lab make_lab(const xbridge::RunConfig& cfg, const std::string& ckpt) {
  xbridge::Lab lab(cfg);
  if (!ckpt.empty()) lab.load_align(xbridge::checkpoint_load(ckpt));
  return lab;
}

int cmd_train_align(const Flags& f) {
  need_out(f, "train-align");
  const auto cfg = resolve_config(f);
  if (cfg.train.prompts.empty())
    throw xbridge::ConfigError("train-align: config needs train.prompts");
  write_resolved(cfg, f.out);
  const auto res = xbridge::train_align(cfg, f.out);
  print_result(train_result_json("train-align", res));
  return 0;
}

int cmd_train_lightcontrol(const Flags& f) {
  need_out(f, "train-lightcontrol");
  if (f.ckpt.empty())
    throw xbridge::ConfigError("train-lightcontrol: --ckpt (stage-1 checkpoint) is required");
  const auto cfg = resolve_config(f);
  write_resolved(cfg, f.out);
  const auto res = xbridge::train_lightcontrol(cfg, f.ckpt, f.out);
  print_result(train_result_json("train-lightcontrol", res));
  return 0;
}

int cmd_train_lora(const Flags& f) {
  need_out(f, "train-lora");
  const auto cfg = resolve_config(f);
  write_resolved(cfg, f.out);
  const auto res = xbridge::train_lora(cfg, f.ckpt, f.out);
  print_result(train_result_json("train-lora", res));
  return 0;
}

int cmd_ablate(const Flags& f) {
  need_out(f, "ablate");
  if (f.axis.empty())
    throw xbridge::ConfigError("ablate: --axis {alignnet|position|loss} is required");
  const auto cfg = resolve_config(f);
  write_resolved(cfg, f.out);
  const auto rep = xbridge::run_ablation(cfg, f.axis, f.out);
  std::printf("%s", xbridge::ablate_report_table(rep).c_str());
  return 0;
}

int cmd_eval(const Flags& f) {
  const auto cfg = resolve_config(f);
  const auto lab = make_lab(cfg, f.ckpt);
  const auto summary = xbridge::evaluate_alignment(lab, eval_lines(cfg, "eval"));
  const json j{{"verb", "eval"},
               {"latent_cosine", summary.latent_cosine},
               {"teacher_mse", summary.teacher_mse},
               {"ssim", summary.ssim},
               {"prompts", summary.prompts}};
  if (!f.out.empty()) {
    write_resolved(cfg, f.out);
    std::ofstream file(fs::path(f.out) / "eval.json");
    file << j.dump(2) << "\n";
  }
  print_result(j);
  return 0;
}

int cmd_sample(const Flags& f) {
  need_out(f, "sample");
  const auto cfg = resolve_config(f);
  // --steps means sampler steps here, not optimizer steps.
  const std::int64_t steps =
      (f.steps_opt != nullptr && *f.steps_opt) ? f.steps : 8;
  if (steps <= 0) throw xbridge::ConfigError("sample: --steps must be positive");
  write_resolved(cfg, f.out);

  const auto lab = make_lab(cfg, f.ckpt);
  std::vector<std::string> lines;
  if (!cfg.train.eval_prompts.empty()) {
    lines = xbridge::load_prompt_lines(cfg.train.eval_prompts);
    if (lines.size() > 4) lines.resize(4);  // a peek, not a benchmark
  } else {
    lines = {"a red square on a white field"};
  }

  const auto streams = lab.wrap_prompts(lines);
  const auto cond = lab.aligned_condition(streams);
  xbridge::Checkpoint ck;
  ck.config_json = xbridge::dump_run_config(cfg);
  ck.seed_state = cfg.train.seed;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    xbridge::Rng rng(xbridge::derive_seed(cfg.train.seed, "sample.noise",
                                          static_cast<std::uint64_t>(i)));
    auto noise = xbridge::Tensor::randn(
        {1, cfg.gen.latent_channels, cfg.gen.latent_hw, cfg.gen.latent_hw}, rng, cfg.dtype());
    xbridge::Condition row{xbridge::ops::slice(cond.seq, 0, static_cast<std::int64_t>(i), 1),
                           xbridge::ops::slice(cond.pooled, 0, static_cast<std::int64_t>(i), 1)};
    auto latent = lab.gen.sample_from(std::move(noise), row, steps);
    ck.arrays.emplace_back("sample" + std::to_string(i), std::move(latent));
  }
  const fs::path path = fs::path(f.out) / "samples.x2i";
  xbridge::checkpoint_save(ck, path.string());

  json j{{"verb", "sample"}, {"path", path.string()}, {"steps", steps}, {"prompts", json::array()}};
  for (const auto& line : lines) j["prompts"].push_back(line);
  print_result(j);
  return 0;
}

int cmd_gap_report(const Flags& f) {
  const auto cfg = resolve_config(f);
  const auto rep = xbridge::modality_gap_report(cfg, f.ckpt);
  if (!f.out.empty()) {
    write_resolved(cfg, f.out);
    std::ofstream jf(fs::path(f.out) / "gap_report.json");
    jf << xbridge::gap_report_json(rep) << "\n";
    std::ofstream tf(fs::path(f.out) / "gap_report.txt");
    tf << xbridge::gap_report_table(rep);
  }
  std::printf("%s", xbridge::gap_report_table(rep).c_str());
  return 0;
}

// Desk-scale dims small enough that the whole self-test stays subsecond.
xbridge::RunConfig selftest_config() {
  xbridge::RunConfig cfg;
  cfg.enc.vocab = 64;
  cfg.enc.max_seq = 8;
  cfg.enc.d_c = 12;
  cfg.enc.d_p = 6;
  cfg.enc.z = 8;
  cfg.enc.m = 2;
  cfg.enc.heads = 2;
  cfg.enc.teacher_layers = 1;
  cfg.enc.payload_dim = 4;
  cfg.align.hidden = 16;
  cfg.gen.d_model = 12;
  cfg.gen.heads = 2;
  cfg.gen.blocks = 2;
  cfg.gen.ff_mult = 2;
  cfg.gen.latent_channels = 2;
  cfg.gen.latent_hw = 4;
  cfg.gen.patch = 2;
  cfg.train.dtype = "f64";
  return cfg;
}

void expect(bool ok, const char* name) {
  if (!ok) throw std::runtime_error(std::string("selftest: ") + name + " failed");
  std::printf("ok — %s\n", name);
}

int cmd_selftest() {
  // Closed-form anchor: 0.7*ln(0.7/0.5) + 0.3*ln(0.3/0.5).
  const auto p = xbridge::Tensor::from_vector({0.7, 0.3}, {1, 2}, xbridge::DType::f64);
  const auto q = xbridge::Tensor::from_vector({0.5, 0.5}, {1, 2}, xbridge::DType::f64);
  const double kl =
      xbridge::distill::divergence_loss(p, q, xbridge::distill::Divergence::kl).item();
  expect(std::abs(kl - 0.08228287850505178) < 1e-12, "kl closed-form oracle");

  xbridge::Rng rng(41);
  bool bounded = true;
  for (int i = 0; i < 100 && bounded; ++i) {
    auto a = xbridge::ops::softmax(xbridge::Tensor::randn({1, 8}, rng, xbridge::DType::f64), 1);
    auto b = xbridge::ops::softmax(xbridge::Tensor::randn({1, 8}, rng, xbridge::DType::f64), 1);
    const double js =
        xbridge::distill::divergence_loss(a, b, xbridge::distill::Divergence::js).item();
    bounded = js >= 0.0 && js <= std::log(2.0) + 1e-12;
  }
  expect(bounded, "js within [0, ln 2]");

  auto img = xbridge::Tensor::randn({16, 16}, rng, xbridge::DType::f64);
  expect(xbridge::metrics::ssim(img, img, 4.0) == 1.0, "ssim self-identity");

  auto v = xbridge::Tensor::randn({1, 9}, rng, xbridge::DType::f64);
  expect(xbridge::metrics::cosine(v, v) == 1.0, "cosine self-identity");

  bool grads_ok = true;
  for (std::uint64_t s = 0; s < 3 && grads_ok; ++s) {
    xbridge::Rng gr(s);
    auto x = xbridge::Tensor::randn({3, 5}, gr, xbridge::DType::f64);
    const double e1 = xbridge::ops::grad_check(
        [](const xbridge::Tensor& t) { return xbridge::ops::sum(xbridge::ops::silu(t)); }, x);
    const double e2 = xbridge::ops::grad_check(
        [](const xbridge::Tensor& t) {
          return xbridge::ops::sum(xbridge::ops::silu(xbridge::ops::layer_norm(t, 1)));
        },
        x);
    grads_ok = e1 < 1e-4 && e2 < 1e-4;
  }
  expect(grads_ok, "gradient spot checks");

  const auto cfg = selftest_config();
  expect(xbridge::zero_loss_probe(cfg, "attn") == 0.0, "identity-wiring zero loss");

  xbridge::Checkpoint ck;
  ck.config_json = xbridge::dump_run_config(cfg);
  ck.step = 7;
  xbridge::Rng cr(9);
  ck.arrays.emplace_back("w", xbridge::Tensor::randn({2, 3}, cr, xbridge::DType::f32));
  const auto bytes = xbridge::checkpoint_serialize(ck);
  expect(!bytes.empty() && bytes == xbridge::checkpoint_serialize(ck) &&
             xbridge::checkpoint_hash(ck) != 0,
         "checkpoint serialization is stable");

  std::printf("selftest: all checks passed\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"x2i — desk-scale encoder-to-generator bridging laboratory"};
  app.require_subcommand(1);

  Flags train_align_f, lightcontrol_f, lora_f, ablate_f, eval_f, sample_f, gap_f;

  auto* train_align_cmd =
      app.add_subcommand("train-align", "stage 1: distill the AlignNet bridge");
  add_common(*train_align_cmd, train_align_f, false);

  auto* lightcontrol_cmd = app.add_subcommand(
      "train-lightcontrol", "stage 2: train the LightControl injection path");
  add_common(*lightcontrol_cmd, lightcontrol_f, true);

  auto* lora_cmd =
      app.add_subcommand("train-lora", "adapt the frozen generator with LoRA");
  add_common(*lora_cmd, lora_f, true);

  auto* ablate_cmd =
      app.add_subcommand("ablate", "re-run stage 1 across one design axis");
  add_common(*ablate_cmd, ablate_f, false);
  ablate_cmd->add_option("--axis", ablate_f.axis, "alignnet|position|loss");

  auto* eval_cmd =
      app.add_subcommand("eval", "held-out agreement between teacher and student");
  add_common(*eval_cmd, eval_f, true);

  auto* sample_cmd =
      app.add_subcommand("sample", "generate latents from held-out prompts");
  add_common(*sample_cmd, sample_f, true);

  auto* gap_cmd =
      app.add_subcommand("gap-report", "per-modality pooled-feature distances");
  add_common(*gap_cmd, gap_f, true);

  auto* selftest_cmd =
      app.add_subcommand("selftest", "quick oracle and gradient health checks");

  try {
    app.parse(argc, argv);
    if (*train_align_cmd) return cmd_train_align(train_align_f);
    if (*lightcontrol_cmd) return cmd_train_lightcontrol(lightcontrol_f);
    if (*lora_cmd) return cmd_train_lora(lora_f);
    if (*ablate_cmd) return cmd_ablate(ablate_f);
    if (*eval_cmd) return cmd_eval(eval_f);
    if (*sample_cmd) return cmd_sample(sample_f);
    if (*gap_cmd) return cmd_gap_report(gap_f);
    if (*selftest_cmd) return cmd_selftest();
    return 2;  // unreachable: require_subcommand guards this
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "%s\n", json{{"error", "usage"}, {"what", e.what()}}.dump().c_str());
    return 2;
  } catch (const xbridge::ConfigError& e) {
    std::fprintf(stderr, "%s\n", json{{"error", "config"}, {"what", e.what()}}.dump().c_str());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "%s\n", json{{"error", "usage"}, {"what", e.what()}}.dump().c_str());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", json{{"error", "runtime"}, {"what", e.what()}}.dump().c_str());
    return 1;
  }
}
