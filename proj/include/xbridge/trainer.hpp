#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "xbridge/alignnet.hpp"
#include "xbridge/checkpoint.hpp"
#include "xbridge/config.hpp"
#include "xbridge/encoders.hpp"
#include "xbridge/lightcontrol.hpp"
#include "xbridge/mmdit.hpp"
#include "xbridge/tensor.hpp"

namespace xbridge {

// Decoupled-weight-decay adaptive-moments optimizer over named parameter
// tensors. step() consumes the gradients the tape accumulated since the
// last call and clears them; moments are kept in f64 regardless of the
// parameter dtype, and the update loop is strictly sequential so a run's
// arithmetic never depends on thread count.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor>> params, double lr,
        double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);

  void step();
  void zero_grad();
  double lr() const { return lr_; }
  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
};

// One training-step log record; one JSON object per line on disk.
struct StepRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  std::vector<double> loss_per_block;
  double lr = 0.0;
  double wall_ms = 0.0;
  std::uint64_t seed = 0;
};
std::string step_record_json(const StepRecord& r);

// The wired-up experiment: frozen teacher and student encoders, the
// trainable AlignNet bridge, and the frozen generator, all seeded from the
// run seed so (seed, config) pins every weight.
struct Lab {
  explicit Lab(const RunConfig& run);

  RunConfig cfg;
  Tokenizer tok;
  TeacherEncoder teacher;
  StudentEncoder student;
  AlignNet align;
  Generator gen;

  // Wraps plain text lines in the fixed prompt template.
  std::vector<TokenStream> wrap_prompts(const std::vector<std::string>& lines) const;
  TeacherCondition teacher_condition(const std::vector<TokenStream>& streams) const;
  AlignedCondition aligned_condition(const std::vector<TokenStream>& streams) const;
  // Bitwise restore of AlignNet parameters from a stage-1 checkpoint.
  void load_align(const Checkpoint& ck);
};

// Reads non-empty lines; throws std::runtime_error when missing or empty.
std::vector<std::string> load_prompt_lines(const std::string& path);

// Copies checkpoint arrays into same-named parameter tensors, bitwise.
// Name, shape, or dtype disagreement throws std::runtime_error.
void restore_parameters(const std::vector<std::pair<std::string, Tensor>>& params,
                        const Checkpoint& ck);

struct TrainResult {
  Checkpoint ckpt;
  std::vector<StepRecord> log;
  double initial_loss = 0.0;
  double smoothed_loss = 0.0;  // EMA (alpha = 0.01) at the final step
  double wall_seconds = 0.0;
  std::string checkpoint_path;  // empty when out_dir was empty
  std::string log_path;
  std::vector<std::pair<std::string, double>> extras;  // stage-specific numbers
};

// Stage 1: distill teacher taps into the AlignNet-conditioned student.
// Honors cfg.train.pipeline ("sequential" | "overlapped"); both derive all
// randomness from (seed, step) so they produce identical checkpoints.
TrainResult train_align(const RunConfig& cfg, const std::string& out_dir);

// Wires the teacher's own condition into the student slot; the resulting
// distillation loss is the pipeline's noise floor at the given tap.
double zero_loss_probe(const RunConfig& cfg, const std::string& tap);

// Stage 2: freeze the stage-1 AlignNet, train LightControl on synthetic
// outline->fill pairs by rectified-flow regression.
TrainResult train_lightcontrol(const RunConfig& cfg, const std::string& stage1_ckpt,
                               const std::string& out_dir);

// LoRA adaptation of the frozen generator on the same synthetic targets,
// driven by image-conditioned template prompts. align_ckpt may be empty
// (fresh AlignNet: the null condition).
TrainResult train_lora(const RunConfig& cfg, const std::string& align_ckpt,
                       const std::string& out_dir);

// Shared-noise single-step agreement between teacher- and student-driven
// generation on held-out prompts.
struct EvalSummary {
  double latent_cosine = 0.0;  // mean cosine of final latents
  double teacher_mse = 0.0;    // mean squared error against the teacher latent
  double ssim = 0.0;           // mean channel-averaged SSIM
  std::int64_t prompts = 0;
};
EvalSummary evaluate_alignment(const Lab& lab, const std::vector<std::string>& prompts);

struct AblateRow {
  std::string variant;
  double final_loss = 0.0;
  double latent_cosine = 0.0;
  double ssim = 0.0;
};
struct AblateReport {
  std::string axis;
  std::vector<AblateRow> rows;
};

// Re-runs stage 1 per variant of one axis with identical seed and steps.
// axis: "alignnet" | "position" | "loss".
AblateReport run_ablation(const RunConfig& cfg, const std::string& axis,
                          const std::string& out_dir);
std::string ablate_report_json(const AblateReport& rep);
std::string ablate_report_table(const AblateReport& rep);

// Per-modality distance between the aligned pooled feature and the
// teacher's pooled text feature, fresh vs trained AlignNet.
struct GapRow {
  std::string modality;
  double initial_distance = 0.0;
  double trained_distance = 0.0;  // NaN when no checkpoint was given
};
struct GapReport {
  std::vector<GapRow> rows;
  double teacher_self = 0.0;  // teacher text against itself; exactly zero
};
GapReport modality_gap_report(const RunConfig& cfg, const std::string& align_ckpt);
std::string gap_report_json(const GapReport& rep);
std::string gap_report_table(const GapReport& rep);

}  // namespace xbridge
