// Integration tests driving the built x2i binary end to end: artifact
// layout, config echo reproducibility, and the exit-code contract.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include <json.hpp>

#include "xbridge/checkpoint.hpp"
#include "xbridge/config.hpp"

using namespace xbridge;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
  int status = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// One scratch tree per test binary run; every CLI invocation gets its own
// stdout/stderr capture files inside it.
fs::path scratch_root() {
  static const fs::path root = [] {
    auto p = fs::temp_directory_path() / ("x2i_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

CliResult run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path out_f = scratch_root() / ("stdout" + std::to_string(counter) + ".txt");
  const fs::path err_f = scratch_root() / ("stderr" + std::to_string(counter) + ".txt");
  ++counter;
  const std::string cmd = std::string(X2I_BIN) + " " + args + " >" + out_f.string() +
                          " 2>" + err_f.string();
  const int rc = std::system(cmd.c_str());
  CliResult res;
  res.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  res.out = slurp(out_f);
  res.err = slurp(err_f);
  return res;
}

// Desk dims shrunk until a full train-align run is a few milliseconds.
RunConfig tiny_config() {
  RunConfig cfg;
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
  cfg.gen.latent_hw = 8;
  cfg.gen.patch = 2;
  cfg.lc.channels = 4;
  cfg.lc.image_hw = 8;
  cfg.train.steps = 3;
  cfg.train.batch = 2;
  return cfg;
}

// Writes the tiny config plus its prompt files; returns the config path.
fs::path write_tiny_config() {
  static fs::path cached;
  if (!cached.empty()) return cached;
  const auto root = scratch_root();
  {
    std::ofstream f(root / "prompts.txt");
    f << "a red square on white\nblue circles overlap\na green bar\nfour small dots\n";
  }
  {
    std::ofstream f(root / "eval.txt");
    f << "held out steel bridge\nheld out paper crane\n";
  }
  auto cfg = tiny_config();
  cfg.train.prompts = (root / "prompts.txt").string();
  cfg.train.eval_prompts = (root / "eval.txt").string();
  cached = root / "tiny.json";
  std::ofstream f(cached);
  f << dump_run_config(cfg) << "\n";
  return cached;
}

// The result line is the last non-empty stdout line.
json last_json_line(const std::string& text) {
  std::istringstream ss(text);
  std::string line, last;
  while (std::getline(ss, line))
    if (!line.empty()) last = line;
  return json::parse(last);
}

std::size_t line_count(const fs::path& p) {
  std::ifstream f(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line))
    if (!line.empty()) ++n;
  return n;
}

}  // namespace

TEST_CASE("selftest passes on a healthy build") {
  const auto res = run_cli("selftest");
  CHECK(res.status == 0);
  CHECK(res.out.find("all checks passed") != std::string::npos);
}

TEST_CASE("train-align produces checkpoint, log, and config echo") {
  const auto cfg_path = write_tiny_config();
  const auto out = scratch_root() / "run_align";
  const auto res = run_cli("train-align --config " + cfg_path.string() + " --seed 11 --out " +
                           out.string());
  REQUIRE(res.status == 0);

  CHECK(fs::exists(out / "checkpoint.x2i"));
  CHECK(fs::exists(out / "train.jsonl"));
  CHECK(fs::exists(out / "config.json"));

  const auto line = last_json_line(res.out);
  CHECK(line.at("verb") == "train-align");
  CHECK(line.at("smoothed_loss").is_number());
  CHECK(line.at("checkpoint") == (out / "checkpoint.x2i").string());

  // The echo is a complete, reloadable config with the flag override applied.
  const auto echoed = load_run_config((out / "config.json").string());
  CHECK(echoed.train.seed == 11);
  CHECK(echoed.train.steps == 3);

  const auto ck = checkpoint_load((out / "checkpoint.x2i").string());
  CHECK(ck.step == 3);
  CHECK(line_count(out / "train.jsonl") == 3);
}

TEST_CASE("re-running from the echoed config reproduces the checkpoint") {
  const auto cfg_path = write_tiny_config();
  const auto out_a = scratch_root() / "echo_a";
  const auto out_b = scratch_root() / "echo_b";
  auto res = run_cli("train-align --config " + cfg_path.string() +
                     " --seed 7 --steps 4 --strict --out " + out_a.string());
  REQUIRE(res.status == 0);
  // No flag overrides the second time: everything comes from the echo.
  res = run_cli("train-align --config " + (out_a / "config.json").string() + " --out " +
                out_b.string());
  REQUIRE(res.status == 0);

  const auto ck_a = checkpoint_load((out_a / "checkpoint.x2i").string());
  const auto ck_b = checkpoint_load((out_b / "checkpoint.x2i").string());
  CHECK(checkpoint_hash(ck_a) == checkpoint_hash(ck_b));
  CHECK(slurp(out_a / "checkpoint.x2i") == slurp(out_b / "checkpoint.x2i"));
}

TEST_CASE("eval prints a summary line and honors --out") {
  const auto cfg_path = write_tiny_config();
  const auto run_dir = scratch_root() / "run_align";  // from the earlier case
  if (!fs::exists(run_dir / "checkpoint.x2i")) {
    REQUIRE(run_cli("train-align --config " + cfg_path.string() + " --seed 11 --out " +
                    run_dir.string())
                .status == 0);
  }
  const auto out = scratch_root() / "eval_out";
  const auto res = run_cli("eval --config " + cfg_path.string() + " --ckpt " +
                           (run_dir / "checkpoint.x2i").string() + " --out " + out.string());
  REQUIRE(res.status == 0);
  const auto line = last_json_line(res.out);
  CHECK(line.at("latent_cosine").is_number());
  CHECK(line.at("ssim").is_number());
  CHECK(line.at("prompts") == 2);
  CHECK(fs::exists(out / "eval.json"));
  CHECK(fs::exists(out / "config.json"));
}

TEST_CASE("sample writes loadable latents") {
  const auto cfg_path = write_tiny_config();
  const auto out = scratch_root() / "sample_out";
  const auto res =
      run_cli("sample --config " + cfg_path.string() + " --steps 2 --out " + out.string());
  REQUIRE(res.status == 0);
  const auto ck = checkpoint_load((out / "samples.x2i").string());
  REQUIRE(ck.arrays.size() == 2);  // both held-out prompts
  CHECK(ck.arrays[0].first == "sample0");
  CHECK(ck.arrays[0].second.shape() == Shape{1, 2, 8, 8});
}

TEST_CASE("ablate writes the report pair and prints the table") {
  const auto cfg_path = write_tiny_config();
  const auto out = scratch_root() / "ablate_out";
  const auto res = run_cli("ablate --config " + cfg_path.string() + " --axis loss --out " +
                           out.string());
  REQUIRE(res.status == 0);
  CHECK(res.out.find("rkl") != std::string::npos);
  const auto rep = json::parse(slurp(out / "ablation.json"));
  CHECK(rep.at("rows").size() == 4);
  CHECK(fs::exists(out / "ablation.txt"));
}

TEST_CASE("gap-report prints the teacher-self anchor row") {
  const auto cfg_path = write_tiny_config();
  const auto res = run_cli("gap-report --config " + cfg_path.string());
  REQUIRE(res.status == 0);
  CHECK(res.out.find("teacher-self") != std::string::npos);
  CHECK(res.out.find("audio") != std::string::npos);
}

TEST_CASE("exit-code contract: config problems are 2, runtime failures 1") {
  const auto cfg_path = write_tiny_config();

  auto res = run_cli("train-align --config " + cfg_path.string());
  CHECK(res.status == 2);  // missing --out
  CHECK(last_json_line(res.err).at("error") == "config");

  res = run_cli("train-align --config " + cfg_path.string() + " --out x --bogus");
  CHECK(res.status == 2);  // unknown flag rejected
  CHECK(last_json_line(res.err).at("error") == "usage");

  res = run_cli("eval --config " + cfg_path.string() + " --tap nowhere");
  CHECK(res.status == 2);  // validation failure
  CHECK(last_json_line(res.err).at("error") == "config");

  res = run_cli("ablate --config " + cfg_path.string() + " --axis bogus --out " +
                (scratch_root() / "ab_bogus").string());
  CHECK(res.status == 2);

  res = run_cli("eval --config " + cfg_path.string() + " --ckpt does_not_exist.x2i");
  CHECK(res.status == 1);  // IO failure at runtime
  CHECK(last_json_line(res.err).at("error") == "runtime");

  res = run_cli("");
  CHECK(res.status == 2);  // a verb is required
}

TEST_CASE("commands write only under --out") {
  const auto cfg_path = write_tiny_config();
  const auto probe = scratch_root() / "cwd_probe";
  fs::create_directories(probe);
  std::vector<std::string> before;
  for (const auto& e : fs::directory_iterator(probe)) before.push_back(e.path().string());

  const auto out = scratch_root() / "contained_run";
  const std::string cmd = "cd " + probe.string() + " && " + X2I_BIN + " train-align --config " +
                          cfg_path.string() + " --out " + out.string() + " >/dev/null 2>&1";
  REQUIRE(std::system(cmd.c_str()) == 0);

  std::vector<std::string> after;
  for (const auto& e : fs::directory_iterator(probe)) after.push_back(e.path().string());
  CHECK(before == after);  // nothing leaked into the working directory
  CHECK(fs::exists(out / "checkpoint.x2i"));
}
