#include "xbridge/trainer.hpp"

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "xbridge/distill.hpp"
#include "xbridge/errors.hpp"
#include "xbridge/metrics.hpp"
#include "xbridge/ops.hpp"
#include "xbridge/rng.hpp"

namespace xbridge {

using nlohmann::json;

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, double lr,
             double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2),
      eps_(eps) {
  if (!(lr_ > 0.0)) throw std::invalid_argument("AdamW: lr must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& param = params_[p].second;
    if (!param.has_grad()) continue;  // no adjoint reached it this step
    const auto g = param.grad().to_vector();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::int64_t i = 0; i < param.numel(); ++i) {
      m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
      v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      const double x = param.value_at(i);
      param.set_value_at(i, x - lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * x));
    }
    param.zero_grad();
  }
}

void AdamW::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

std::string step_record_json(const StepRecord& r) {
  return json{{"step", r.step},        {"loss", r.loss}, {"loss_per_block", r.loss_per_block},
              {"lr", r.lr},            {"wall_ms", r.wall_ms},
              {"seed", r.seed}}
      .dump();
}

namespace {

const RunConfig& validated(const RunConfig& cfg) {
  cfg.validate();
  return cfg;
}

}  // namespace

Lab::Lab(const RunConfig& run)
    : cfg(validated(run)),
      tok(cfg.enc.vocab),
      teacher(cfg.enc, derive_seed(cfg.train.seed, "teacher.encoder", 0), cfg.dtype()),
      student(cfg.enc, derive_seed(cfg.train.seed, "student.encoder", 0), cfg.dtype(),
              cfg.enc.share_text_embedding ? &teacher : nullptr),
      align(cfg.align, cfg.enc, derive_seed(cfg.train.seed, "alignnet", 0), cfg.dtype()),
      gen(cfg.gen, cfg.enc, derive_seed(cfg.train.seed, "generator", 0), cfg.dtype()) {}

std::vector<TokenStream> Lab::wrap_prompts(const std::vector<std::string>& lines) const {
  std::vector<TokenStream> streams;
  streams.reserve(lines.size());
  for (const std::string& line : lines) {
    TemplateParts parts;
    parts.text_prompt = line;
    streams.push_back(build_template(parts, tok));
  }
  return streams;
}

TeacherCondition Lab::teacher_condition(const std::vector<TokenStream>& streams) const {
  return teacher.encode(streams);
}

AlignedCondition Lab::aligned_condition(const std::vector<TokenStream>& streams) const {
  return align.forward(student.encode(streams));
}

void Lab::load_align(const Checkpoint& ck) { restore_parameters(align.parameters(), ck); }

std::vector<std::string> load_prompt_lines(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open prompt file '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  if (lines.empty()) throw std::runtime_error("prompt file '" + path + "' has no prompts");
  return lines;
}

void restore_parameters(const std::vector<std::pair<std::string, Tensor>>& params,
                        const Checkpoint& ck) {
  std::map<std::string, Tensor> by_name(params.begin(), params.end());
  std::size_t matched = 0;
  for (const auto& [name, stored] : ck.arrays) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw std::runtime_error("checkpoint array '" + name + "' has no matching parameter");
    }
    Tensor& live = it->second;
    if (live.shape() != stored.shape() || live.dtype() != stored.dtype()) {
      throw std::runtime_error("checkpoint array '" + name +
                               "' disagrees with this config's shape or dtype");
    }
    std::memcpy(live.bytes_mut().data(), stored.bytes().data(), stored.bytes().size());
    ++matched;
  }
  if (matched != by_name.size()) {
    throw std::runtime_error("checkpoint restores " + std::to_string(matched) + " of " +
                             std::to_string(by_name.size()) + " parameters");
  }
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

// Everything the frozen side of one stage-1 step produces: the noised
// latent, the teacher's taps, and the student encoder stack. Computing a
// payload touches no trainable parameter, so it may run ahead on another
// thread while the optimizer works.
struct BatchPayload {
  std::int64_t step = 0;
  std::uint64_t batch_seed = 0;
  double t = 1.0;
  Tensor noise;
  TapSet teacher_taps;
  HiddenStateStack stack;
};

std::vector<std::string> batch_lines(const std::vector<std::string>& corpus,
                                     std::int64_t step, std::int64_t batch) {
  std::vector<std::string> lines;
  lines.reserve(batch);
  for (std::int64_t j = 0; j < batch; ++j) {
    lines.push_back(corpus[static_cast<std::size_t>((step * batch + j) %
                                                    static_cast<std::int64_t>(corpus.size()))]);
  }
  return lines;
}

Tensor batch_noise(const RunConfig& cfg, const char* tag, std::int64_t first_index,
                   std::int64_t batch) {
  std::vector<Tensor> rows;
  rows.reserve(batch);
  for (std::int64_t j = 0; j < batch; ++j) {
    Rng rng(derive_seed(cfg.train.seed, tag,
                        static_cast<std::uint64_t>(first_index + j)));
    rows.push_back(Tensor::randn({1, cfg.gen.latent_channels, cfg.gen.latent_hw,
                                  cfg.gen.latent_hw},
                                 rng, cfg.dtype()));
  }
  return rows.size() == 1 ? rows[0] : ops::concat(rows, 0);
}

double step_timestep(const RunConfig& cfg, std::int64_t step) {
  if (cfg.train.t_lo >= 1.0) return 1.0;
  Rng rng(derive_seed(cfg.train.seed, "t", static_cast<std::uint64_t>(step)));
  return rng.uniform(cfg.train.t_lo, 1.0);
}

BatchPayload make_align_payload(const Lab& lab, const std::vector<std::string>& corpus,
                                std::int64_t step) {
  const RunConfig& cfg = lab.cfg;
  BatchPayload pl;
  pl.step = step;
  pl.batch_seed = derive_seed(cfg.train.seed, "batch", static_cast<std::uint64_t>(step));
  pl.t = step_timestep(cfg, step);
  pl.noise = batch_noise(cfg, "noise", step * cfg.train.batch, cfg.train.batch);

  const auto streams = lab.wrap_prompts(batch_lines(corpus, step, cfg.train.batch));
  const TeacherCondition cond_t = lab.teacher_condition(streams);
  pl.teacher_taps = lab.gen.forward(pl.noise, cond_t, pl.t, cfg.distill.tap).taps;
  pl.stack = lab.student.encode(streams);
  return pl;
}

// The trainable half of one stage-1 step: AlignNet forward, distillation
// loss, backward, optimizer update. Any failure — a non-finite loss or a
// numeric guard deeper in the graph — aborts with the offending batch seed.
StepRecord consume_align_payload(Lab& lab, AdamW& opt, const BatchPayload& pl) {
  const auto t0 = Clock::now();
  const RunConfig& cfg = lab.cfg;

  StepRecord rec;
  rec.step = pl.step;
  rec.lr = opt.lr();
  rec.seed = pl.batch_seed;
  try {
    Tape tape;
    TapeScope scope(tape);
    AlignedCondition cond = lab.align.forward(pl.stack);
    GeneratorOutput out = lab.gen.forward(pl.noise, cond, pl.t, cfg.distill.tap);

    const auto kind = distill::divergence_from_name(cfg.distill.loss);
    std::vector<Tensor> blocks =
        distill::per_block_distill(out.taps, pl.teacher_taps, kind,
                                   cfg.distill.temperature, cfg.distill.epsilon);
    Tensor total = blocks[0];
    for (std::size_t i = 1; i < blocks.size(); ++i) total = ops::add(total, blocks[i]);
    Tensor loss = ops::scale(total, 1.0 / static_cast<double>(blocks.size()));

    rec.loss = loss.item();
    for (const Tensor& b : blocks) rec.loss_per_block.push_back(b.item());
    if (!std::isfinite(rec.loss)) throw std::runtime_error("non-finite loss");

    tape.backward(loss);
    opt.step();
  } catch (const std::exception& e) {
    char buf[192];
    std::snprintf(buf, sizeof(buf), "train_align: step %lld failed (batch seed 0x%016llx): %s",
                  static_cast<long long>(pl.step),
                  static_cast<unsigned long long>(pl.batch_seed), e.what());
    throw std::runtime_error(buf);
  }
  rec.wall_ms = ms_between(t0, Clock::now());
  return rec;
}

// Bounded two-slot hand-off between the frozen producer and the training
// consumer. The producer can be at most two batches ahead, and payloads
// leave in push order, so step ids stay monotone in the log.
struct PayloadQueue {
  std::mutex mu;
  std::condition_variable can_push, can_pop;
  std::deque<BatchPayload> q;
  bool done = false;       // producer finished
  bool abandoned = false;  // consumer bailed out
  std::exception_ptr producer_error;

  void push(BatchPayload&& pl) {
    std::unique_lock lk(mu);
    can_push.wait(lk, [&] { return q.size() < 2 || abandoned; });
    if (abandoned) return;
    q.push_back(std::move(pl));
    can_pop.notify_one();
  }

  bool pop(BatchPayload& out) {
    std::unique_lock lk(mu);
    can_pop.wait(lk, [&] { return !q.empty() || done || producer_error; });
    if (producer_error) std::rethrow_exception(producer_error);
    if (q.empty()) return false;
    out = std::move(q.front());
    q.pop_front();
    can_push.notify_one();
    return true;
  }

  void finish() {
    std::lock_guard lk(mu);
    done = true;
    can_pop.notify_one();
  }

  void fail(std::exception_ptr e) {
    std::lock_guard lk(mu);
    producer_error = std::move(e);
    can_pop.notify_one();
  }

  void abandon() {
    std::lock_guard lk(mu);
    abandoned = true;
    can_push.notify_one();
  }
};

struct RunLog {
  std::ofstream file;
  TrainResult* res = nullptr;
  double smoothed = 0.0;

  void add(const StepRecord& rec) {
    if (file.is_open()) file << step_record_json(rec) << "\n";
    smoothed = rec.step == 0 ? rec.loss : 0.01 * rec.loss + 0.99 * smoothed;
    res->log.push_back(rec);
  }

  void diagnostic(const std::string& what) {
    if (file.is_open()) file << json{{"error", what}}.dump() << "\n";
  }
};

std::string prepare_out_dir(const std::string& out_dir) {
  if (out_dir.empty()) return {};
  std::filesystem::create_directories(out_dir);
  return out_dir;
}

Checkpoint make_checkpoint(const RunConfig& cfg, std::int64_t step,
                           std::vector<std::pair<std::string, Tensor>> arrays) {
  Checkpoint ck;
  ck.config_json = dump_run_config(cfg);
  ck.step = step;
  ck.seed_state = cfg.train.seed;
  ck.arrays = std::move(arrays);
  return ck;
}

void finalize_run(TrainResult& res, RunLog& log, const RunConfig& cfg,
                  const std::string& out_dir,
                  std::vector<std::pair<std::string, Tensor>> arrays) {
  res.initial_loss = res.log.empty() ? 0.0 : res.log.front().loss;
  res.smoothed_loss = log.smoothed;
  res.ckpt = make_checkpoint(cfg, cfg.train.steps, std::move(arrays));
  if (!out_dir.empty()) {
    res.checkpoint_path = out_dir + "/checkpoint.x2i";
    checkpoint_save(res.ckpt, res.checkpoint_path);
  }
}

}  // namespace

TrainResult train_align(const RunConfig& cfg, const std::string& out_dir) {
  Lab lab(cfg);
  const auto corpus = load_prompt_lines(cfg.train.prompts);
  AdamW opt(lab.align.parameters(), cfg.train.lr, cfg.train.weight_decay, cfg.train.beta1,
            cfg.train.beta2, cfg.train.adam_eps);

  TrainResult res;
  RunLog log;
  log.res = &res;
  if (!prepare_out_dir(out_dir).empty()) {
    res.log_path = out_dir + "/train.jsonl";
    log.file.open(res.log_path, std::ios::trunc);
    if (!log.file) throw std::runtime_error("cannot open '" + res.log_path + "'");
  }

  const auto t0 = Clock::now();
  try {
    if (cfg.train.pipeline == "overlapped") {
      PayloadQueue queue;
      std::thread producer([&] {
        try {
          for (std::int64_t step = 0; step < cfg.train.steps; ++step) {
            queue.push(make_align_payload(lab, corpus, step));
            std::lock_guard lk(queue.mu);
            if (queue.abandoned) return;
          }
          queue.finish();
        } catch (...) {
          queue.fail(std::current_exception());
        }
      });
      try {
        BatchPayload pl;
        while (queue.pop(pl)) log.add(consume_align_payload(lab, opt, pl));
      } catch (...) {
        queue.abandon();
        producer.join();
        throw;
      }
      producer.join();
    } else {
      for (std::int64_t step = 0; step < cfg.train.steps; ++step) {
        log.add(consume_align_payload(lab, opt, make_align_payload(lab, corpus, step)));
      }
    }
  } catch (const std::exception& e) {
    log.diagnostic(e.what());
    throw;
  }

  res.wall_seconds = ms_between(t0, Clock::now()) / 1000.0;
  finalize_run(res, log, cfg, out_dir, lab.align.parameters());
  return res;
}

double zero_loss_probe(const RunConfig& cfg, const std::string& tap) {
  Lab lab(cfg);
  const std::vector<std::string> lines{"a red square on a white field",
                                       "two blue circles overlapping",
                                       "a green triangle above a bar"};
  const auto streams = lab.wrap_prompts(lines);
  const TeacherCondition cond_t = lab.teacher_condition(streams);
  // Identity wiring: the student slot receives the teacher's own condition.
  const AlignedCondition cond_s{cond_t.seq.clone(), cond_t.pooled.clone()};

  Tensor noise = batch_noise(cfg, "probe.noise", 0, static_cast<std::int64_t>(lines.size()));
  const auto teacher_out = lab.gen.forward(noise, cond_t, 1.0, tap);
  const auto student_out = lab.gen.forward(noise, cond_s, 1.0, tap);
  const auto kind = distill::divergence_from_name(cfg.distill.loss);
  return distill::layer_distill_loss(student_out.taps, teacher_out.taps, kind,
                                     cfg.distill.temperature, cfg.distill.epsilon)
      .item();
}

namespace {

struct PairBatch {
  Tensor refs;     // [n, 3, hw, hw]
  Tensor targets;  // [n, C, lhw, lhw]
};

PairBatch gather_pairs(const std::vector<StylePair>& pairs,
                       const std::vector<std::int64_t>& idx) {
  std::vector<Tensor> refs, tgts;
  refs.reserve(idx.size());
  tgts.reserve(idx.size());
  for (std::int64_t i : idx) {
    const StylePair& p = pairs[static_cast<std::size_t>(i)];
    Shape r = p.reference.shape(), t = p.target.shape();
    refs.push_back(ops::reshape(p.reference, {1, r[0], r[1], r[2]}));
    tgts.push_back(ops::reshape(p.target, {1, t[0], t[1], t[2]}));
  }
  return {refs.size() == 1 ? refs[0] : ops::concat(refs, 0),
          tgts.size() == 1 ? tgts[0] : ops::concat(tgts, 0)};
}

std::vector<std::int64_t> round_robin(std::int64_t step, std::int64_t batch, std::int64_t n) {
  std::vector<std::int64_t> idx;
  idx.reserve(batch);
  for (std::int64_t j = 0; j < batch; ++j) idx.push_back((step * batch + j) % n);
  return idx;
}

// Rectified-flow regression loss: noise the data to x_t, predict the
// velocity, compare against the straight-path target noise - x0.
Tensor flow_loss(const Generator& gen, const Tensor& x0, const Condition& cond, double t,
                 const Tensor& noise, const std::vector<Tensor>* injections) {
  Tensor xt = ops::add(ops::scale(x0, 1.0 - t), ops::scale(noise, t));
  Tensor target = ops::sub(noise, x0);
  Tensor d = ops::sub(gen.forward(xt, cond, t, "", injections).velocity, target);
  return ops::mean(ops::mul(d, d));
}

}  // namespace

TrainResult train_lightcontrol(const RunConfig& cfg, const std::string& stage1_ckpt,
                               const std::string& out_dir) {
  Checkpoint stage1;
  try {
    stage1 = checkpoint_load(stage1_ckpt);
  } catch (const std::runtime_error& e) {
    throw std::invalid_argument(std::string("train-lightcontrol needs a stage-1 checkpoint: ") +
                                e.what());
  }

  Lab lab(cfg);
  lab.load_align(stage1);
  for (auto& [name, t] : lab.align.parameters()) t.set_requires_grad(false);

  LightControl control(cfg.lc, cfg.gen, cfg.enc,
                       derive_seed(cfg.train.seed, "lightcontrol", 0), cfg.dtype());
  AdamW opt(control.parameters(), cfg.train.lr, cfg.train.weight_decay, cfg.train.beta1,
            cfg.train.beta2, cfg.train.adam_eps);

  const auto pairs =
      make_style_pairs(cfg.lc, cfg.gen, 128, derive_seed(cfg.train.seed, "style", 0),
                       cfg.dtype());
  const auto val_pairs =
      make_style_pairs(cfg.lc, cfg.gen, 16, derive_seed(cfg.train.seed, "style.val", 0),
                       cfg.dtype());
  const auto corpus = load_prompt_lines(cfg.train.prompts);
  const auto val_corpus = cfg.train.eval_prompts.empty()
                              ? corpus
                              : load_prompt_lines(cfg.train.eval_prompts);

  auto val_loss = [&](const LightControl* net) {
    const auto n = static_cast<std::int64_t>(val_pairs.size());
    PairBatch batch = gather_pairs(val_pairs, round_robin(0, n, n));
    const auto streams = lab.wrap_prompts(batch_lines(val_corpus, 0, n));
    const AlignedCondition cond = lab.aligned_condition(streams);
    Tensor noise = batch_noise(cfg, "lc.val.noise", 0, n);
    if (net == nullptr) return flow_loss(lab.gen, batch.targets, cond, 1.0, noise, nullptr).item();
    const auto injections = net->forward(batch.refs, cond.pooled);
    return flow_loss(lab.gen, batch.targets, cond, 1.0, noise, &injections).item();
  };

  TrainResult res;
  RunLog log;
  log.res = &res;
  if (!prepare_out_dir(out_dir).empty()) {
    res.log_path = out_dir + "/train.jsonl";
    log.file.open(res.log_path, std::ios::trunc);
    if (!log.file) throw std::runtime_error("cannot open '" + res.log_path + "'");
  }

  const double baseline = val_loss(nullptr);
  const double step0 = val_loss(&control);

  const auto t0 = Clock::now();
  try {
    for (std::int64_t step = 0; step < cfg.train.steps; ++step) {
      const auto ts = Clock::now();
      const std::int64_t n = static_cast<std::int64_t>(pairs.size());
      PairBatch batch = gather_pairs(pairs, round_robin(step, cfg.train.batch, n));
      const auto streams =
          lab.wrap_prompts(batch_lines(corpus, step, cfg.train.batch));
      const AlignedCondition cond = lab.aligned_condition(streams);
      Tensor noise = batch_noise(cfg, "lc.noise", step * cfg.train.batch, cfg.train.batch);
      const double t = step_timestep(cfg, step);

      Tape tape;
      TapeScope scope(tape);
      const auto injections = control.forward(batch.refs, cond.pooled);
      Tensor loss = flow_loss(lab.gen, batch.targets, cond, t, noise, &injections);

      StepRecord rec;
      rec.step = step;
      rec.loss = loss.item();
      rec.lr = opt.lr();
      rec.seed = derive_seed(cfg.train.seed, "batch", static_cast<std::uint64_t>(step));
      if (!std::isfinite(rec.loss)) {
        throw std::runtime_error("train_lightcontrol: non-finite loss at step " +
                                 std::to_string(step));
      }
      tape.backward(loss);
      opt.step();
      rec.wall_ms = ms_between(ts, Clock::now());
      log.add(rec);
    }
  } catch (const std::exception& e) {
    log.diagnostic(e.what());
    throw;
  }

  res.wall_seconds = ms_between(t0, Clock::now()) / 1000.0;
  res.extras = {{"baseline_val", baseline}, {"step0_val", step0}, {"final_val", val_loss(&control)}};
  finalize_run(res, log, cfg, out_dir, control.parameters());
  return res;
}

TrainResult train_lora(const RunConfig& cfg, const std::string& align_ckpt,
                       const std::string& out_dir) {
  Lab lab(cfg);
  if (!align_ckpt.empty()) lab.load_align(checkpoint_load(align_ckpt));
  for (auto& [name, t] : lab.align.parameters()) t.set_requires_grad(false);

  std::vector<std::string> targets = cfg.lora.targets;
  if (targets.empty()) {
    for (std::int64_t i = 0; i < cfg.gen.blocks; ++i) {
      targets.push_back("block" + std::to_string(i) + ".attn.wq");
      targets.push_back("block" + std::to_string(i) + ".attn.wv");
    }
  }
  lab.gen.attach_lora(targets, cfg.lora.rank, cfg.lora.scale,
                      derive_seed(cfg.train.seed, "lora", 0));
  AdamW opt(lab.gen.lora_parameters(), cfg.train.lr, cfg.train.weight_decay,
            cfg.train.beta1, cfg.train.beta2, cfg.train.adam_eps);

  const auto pairs = make_style_pairs(cfg.lc, cfg.gen, 64,
                                      derive_seed(cfg.train.seed, "lora.style", 0),
                                      cfg.dtype());
  const auto val_pairs = make_style_pairs(cfg.lc, cfg.gen, 16,
                                          derive_seed(cfg.train.seed, "lora.style.val", 0),
                                          cfg.dtype());
  const auto corpus = load_prompt_lines(cfg.train.prompts);

  // Image-conditioned template prompts: the reference enters the student
  // stream as payload tokens alongside the text.
  auto image_streams = [&](const std::vector<std::int64_t>& idx, const char* tag) {
    std::vector<TokenStream> streams;
    streams.reserve(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
      TemplateParts parts;
      parts.text_prompt = corpus[static_cast<std::size_t>(idx[j]) % corpus.size()];
      parts.image_tokens = synth_image_tokens(
          cfg.enc, derive_seed(cfg.train.seed, tag, static_cast<std::uint64_t>(idx[j])));
      streams.push_back(build_template(parts, lab.tok));
    }
    return streams;
  };

  auto val_loss = [&] {
    const auto n = static_cast<std::int64_t>(val_pairs.size());
    PairBatch batch = gather_pairs(val_pairs, round_robin(0, n, n));
    const AlignedCondition cond =
        lab.aligned_condition(image_streams(round_robin(0, n, n), "lora.val.img"));
    Tensor noise = batch_noise(cfg, "lora.val.noise", 0, n);
    return flow_loss(lab.gen, batch.targets, cond, 1.0, noise, nullptr).item();
  };

  TrainResult res;
  RunLog log;
  log.res = &res;
  if (!prepare_out_dir(out_dir).empty()) {
    res.log_path = out_dir + "/train.jsonl";
    log.file.open(res.log_path, std::ios::trunc);
    if (!log.file) throw std::runtime_error("cannot open '" + res.log_path + "'");
  }

  const double pre = val_loss();
  const auto t0 = Clock::now();
  try {
    for (std::int64_t step = 0; step < cfg.train.steps; ++step) {
      const auto ts = Clock::now();
      const std::int64_t n = static_cast<std::int64_t>(pairs.size());
      const auto idx = round_robin(step, cfg.train.batch, n);
      PairBatch batch = gather_pairs(pairs, idx);
      const AlignedCondition cond = lab.aligned_condition(image_streams(idx, "lora.img"));
      Tensor noise =
          batch_noise(cfg, "lora.noise", step * cfg.train.batch, cfg.train.batch);
      const double t = step_timestep(cfg, step);

      Tape tape;
      TapeScope scope(tape);
      Tensor loss = flow_loss(lab.gen, batch.targets, cond, t, noise, nullptr);

      StepRecord rec;
      rec.step = step;
      rec.loss = loss.item();
      rec.lr = opt.lr();
      rec.seed = derive_seed(cfg.train.seed, "batch", static_cast<std::uint64_t>(step));
      if (!std::isfinite(rec.loss)) {
        throw std::runtime_error("train_lora: non-finite loss at step " +
                                 std::to_string(step));
      }
      tape.backward(loss);
      opt.step();
      rec.wall_ms = ms_between(ts, Clock::now());
      log.add(rec);
    }
  } catch (const std::exception& e) {
    log.diagnostic(e.what());
    throw;
  }

  res.wall_seconds = ms_between(t0, Clock::now()) / 1000.0;
  res.extras = {{"pre_loss", pre}, {"post_loss", val_loss()}};
  finalize_run(res, log, cfg, out_dir, lab.gen.lora_parameters());
  return res;
}

EvalSummary evaluate_alignment(const Lab& lab, const std::vector<std::string>& prompts) {
  if (prompts.empty()) throw std::invalid_argument("evaluate_alignment: no prompts");
  const RunConfig& cfg = lab.cfg;
  const auto streams = lab.wrap_prompts(prompts);
  const TeacherCondition cond_t = lab.teacher_condition(streams);
  const AlignedCondition cond_s = lab.aligned_condition(streams);

  const auto n = static_cast<std::int64_t>(prompts.size());
  Tensor noise = batch_noise(cfg, "eval.noise", 0, n);
  Tensor teacher_latent = lab.gen.sample_from(noise, cond_t, 1);
  Tensor student_latent = lab.gen.sample_from(noise, cond_s, 1);

  EvalSummary sum;
  sum.prompts = n;
  const Shape latent{cfg.gen.latent_channels, cfg.gen.latent_hw, cfg.gen.latent_hw};
  for (std::int64_t j = 0; j < n; ++j) {
    Tensor tj = ops::reshape(ops::slice(teacher_latent, 0, j, 1), latent);
    Tensor sj = ops::reshape(ops::slice(student_latent, 0, j, 1), latent);
    sum.latent_cosine += metrics::cosine(sj, tj);
    const auto tv = tj.to_vector();
    const auto sv = sj.to_vector();
    double mse = 0.0;
    for (std::size_t i = 0; i < tv.size(); ++i) mse += (sv[i] - tv[i]) * (sv[i] - tv[i]);
    sum.teacher_mse += mse / static_cast<double>(tv.size());
    // Latents concentrate within a few standard units; 4.0 is the declared
    // dynamic range for the structural comparison.
    sum.ssim += metrics::latent_ssim(sj, tj, 4.0);
  }
  sum.latent_cosine /= static_cast<double>(n);
  sum.teacher_mse /= static_cast<double>(n);
  sum.ssim /= static_cast<double>(n);
  return sum;
}

namespace {

std::string format_table(const std::vector<std::string>& head,
                         const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(head.size());
  for (std::size_t c = 0; c < head.size(); ++c) width[c] = head[c].size();
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      width[c] = std::max(width[c], row[c].size());
    }
  }
  std::string out;
  auto emit = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      out += row[c];
      if (c + 1 < row.size()) out.append(width[c] - row[c].size() + 2, ' ');
    }
    out += '\n';
  };
  emit(head);
  std::string rule;
  for (std::size_t c = 0; c < head.size(); ++c) {
    rule.append(width[c], '-');
    if (c + 1 < head.size()) rule.append(2, ' ');
  }
  out += rule + '\n';
  for (const auto& row : rows) emit(row);
  return out;
}

std::string fixed6(double v) {
  if (std::isnan(v)) return "-";
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

AblateReport run_ablation(const RunConfig& cfg, const std::string& axis,
                          const std::string& out_dir) {
  std::vector<std::string> variants;
  if (axis == "alignnet") {
    variants = {"A1", "A3_mean", "ADA", "CNN"};
  } else if (axis == "position") {
    variants = {"attn", "ln", "ff", "block", "oneside"};
  } else if (axis == "loss") {
    variants = {"mse", "kl", "rkl", "js"};
  } else {
    throw ConfigError("ablate: unknown axis '" + axis + "', expected alignnet, position or loss");
  }

  const auto eval_lines = load_prompt_lines(cfg.train.eval_prompts);
  AblateReport rep;
  rep.axis = axis;
  for (const std::string& variant : variants) {
    RunConfig v = cfg;
    if (axis == "alignnet") {
      v.align.strategy = variant;
    } else if (axis == "position") {
      v.distill.tap = variant;
    } else {
      v.distill.loss = variant;
    }
    v.validate();
    TrainResult r = train_align(v, "");
    Lab lab(v);
    lab.load_align(r.ckpt);
    EvalSummary e = evaluate_alignment(lab, eval_lines);
    rep.rows.push_back({variant, r.smoothed_loss, e.latent_cosine, e.ssim});
  }

  if (!prepare_out_dir(out_dir).empty()) {
    std::ofstream j(out_dir + "/ablation.json", std::ios::trunc);
    j << ablate_report_json(rep) << "\n";
    std::ofstream t(out_dir + "/ablation.txt", std::ios::trunc);
    t << ablate_report_table(rep);
  }
  return rep;
}

std::string ablate_report_json(const AblateReport& rep) {
  json rows = json::array();
  for (const AblateRow& r : rep.rows) {
    rows.push_back({{"variant", r.variant},
                    {"final_loss", r.final_loss},
                    {"latent_cosine", r.latent_cosine},
                    {"ssim", r.ssim}});
  }
  return json{{"axis", rep.axis}, {"rows", rows}}.dump(2);
}

std::string ablate_report_table(const AblateReport& rep) {
  std::vector<std::vector<std::string>> rows;
  for (const AblateRow& r : rep.rows) {
    rows.push_back({r.variant, fixed6(r.final_loss), fixed6(r.latent_cosine), fixed6(r.ssim)});
  }
  return format_table({"variant", "final_loss", "latent_cosine", "ssim"}, rows);
}

GapReport modality_gap_report(const RunConfig& cfg, const std::string& align_ckpt) {
  Lab fresh(cfg);
  std::unique_ptr<Lab> trained;
  if (!align_ckpt.empty()) {
    trained = std::make_unique<Lab>(cfg);
    trained->load_align(checkpoint_load(align_ckpt));
  }

  const std::vector<std::string> base{
      "a lighthouse on a rocky shore", "three copper gears interlocking",
      "a paper crane on a desk",       "fog rolling over a pine ridge",
      "a tiled courtyard at noon",     "an open book under a lamp",
      "a kite above a wheat field",    "rain on a tin roof"};
  const auto n = static_cast<std::int64_t>(base.size());

  // Teacher pooled text features are the reference points for every row.
  const auto text_streams = fresh.wrap_prompts(base);
  const Tensor teacher_pooled = fresh.teacher_condition(text_streams).pooled;

  auto pooled_distance = [&](const Tensor& pooled) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      acc += 1.0 - metrics::cosine(ops::slice(pooled, 0, j, 1),
                                   ops::slice(teacher_pooled, 0, j, 1));
    }
    return acc / static_cast<double>(n);
  };

  auto modality_streams = [&](Modality m) {
    std::vector<TokenStream> streams;
    streams.reserve(base.size());
    for (std::int64_t i = 0; i < n; ++i) {
      TemplateParts parts;
      parts.text_prompt = base[static_cast<std::size_t>(i)];
      const std::uint64_t seed =
          derive_seed(cfg.train.seed, "gap", static_cast<std::uint64_t>(i));
      if (m == Modality::image) parts.image_tokens = synth_image_tokens(cfg.enc, seed);
      if (m == Modality::video) parts.video_tokens = synth_video_tokens(cfg.enc, seed, 4);
      if (m == Modality::audio) parts.audio_tokens = synth_audio_tokens(cfg.enc, seed, 6);
      streams.push_back(build_template(parts, fresh.tok));
    }
    return streams;
  };

  GapReport rep;
  for (Modality m : {Modality::text, Modality::image, Modality::video, Modality::audio}) {
    const auto streams = modality_streams(m);
    GapRow row;
    row.modality = modality_name(m);
    row.initial_distance = pooled_distance(fresh.aligned_condition(streams).pooled);
    row.trained_distance =
        trained ? pooled_distance(trained->aligned_condition(streams).pooled)
                : std::nan("");
    rep.rows.push_back(row);
  }
  rep.teacher_self = pooled_distance(teacher_pooled);
  return rep;
}

std::string gap_report_json(const GapReport& rep) {
  json rows = json::array();
  for (const GapRow& r : rep.rows) {
    rows.push_back({{"modality", r.modality},
                    {"initial_distance", r.initial_distance},
                    {"trained_distance",
                     std::isnan(r.trained_distance) ? json() : json(r.trained_distance)}});
  }
  return json{{"teacher_self", rep.teacher_self}, {"rows", rows}}.dump(2);
}

std::string gap_report_table(const GapReport& rep) {
  std::vector<std::vector<std::string>> rows;
  for (const GapRow& r : rep.rows) {
    rows.push_back({r.modality, fixed6(r.initial_distance), fixed6(r.trained_distance)});
  }
  rows.push_back({"teacher-self", fixed6(rep.teacher_self), fixed6(rep.teacher_self)});
  return format_table({"modality", "initial", "trained"}, rows);
}

}  // namespace xbridge
