#pragma once

#include <cstdint>
#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "evakit/model.hpp"
#include "evakit/optim.hpp"

namespace evakit {

struct FinetuneRecipe {
  std::size_t warmup_steps = 0;
  double warmup_lr = 3e-4;
  std::size_t main_steps = 0;
  OneCycleCosine main_schedule;  // total_steps is taken from main_steps
  bool attention_only_warmup = true;
  std::size_t batch_size = 4;
  AdamWConfig adamw;
  double grad_clip = 1.0;  // 0 disables clipping

  void validate() const;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;  // pre-clip, over every parameter
  double lr = 0.0;
  std::string stage;
};

// Stage 1: warmup_steps updates of the attention parameters at warmup_lr.
// Stage 2: main_steps updates of all parameters under the one-cycle schedule.
// Each stage draws batches from its own stream of `seed`, so runs that differ
// only in warmup see the same stage-2 batches. Throws NumericalError on a
// non-finite loss or gradient.
// `main_step_limit` stops stage 2 early without changing its schedule.
std::vector<StepRecord> train_warmup_finetune(TinyLM& model, const std::vector<int>& corpus,
                                              const FinetuneRecipe& recipe, std::uint64_t seed,
                                              std::size_t main_step_limit = SIZE_MAX);

struct WarmupComparison {
  double with_warmup = 0.0;     // max grad norm over the first stage-2 steps
  double without_warmup = 0.0;
};

// Runs the recipe with and without its warmup from the same swapped model and
// compares the max gradient norm over the first `steps` stage-2 steps.
WarmupComparison compare_warmup(const TinyLM& swapped, const std::vector<int>& corpus, const FinetuneRecipe& recipe,
                                std::uint64_t seed, std::size_t steps);

// Plain training of all parameters under the one-cycle schedule (stage "pretrain").
std::vector<StepRecord> pretrain(TinyLM& model, const std::vector<int>& corpus, std::size_t steps,
                                 const OneCycleCosine& schedule, std::size_t batch_size, std::uint64_t seed,
                                 const AdamWConfig& adamw = {}, double grad_clip = 1.0);

// Mean next-token loss over `windows` strided windows of seq_len + 1 tokens.
double eval_loss(const TinyLM& model, const std::vector<int>& corpus, std::size_t windows);

double max_grad_norm(const std::vector<StepRecord>& records, const std::string& stage, std::size_t first_n);

void write_metrics_csv(std::ostream& out, const std::vector<StepRecord>& records,
                       const std::vector<std::string>& comment_lines);

struct Checkpoint {
  TinyLMConfig config;
  TinyLMWeights weights;
  std::size_t step = 0;
  std::uint64_t seed = 0;
};

// Directory of fixture tensors (one per parameter) plus manifest.json.
void save_checkpoint(const std::string& dir, const TinyLM& model, std::size_t step, std::uint64_t seed);
Checkpoint load_checkpoint(const std::string& dir);

// Pretrain a softmax model, swap in FlashEVA, then finetune with and (optionally)
// without the attention warmup from the same swapped weights.
struct DemoConfig {
  TinyLMConfig model;
  EvaConfig eva;
  std::size_t pretrain_steps = 300;
  OneCycleCosine pretrain_schedule{3e-3, 300, 0.1, 25.0, 1e4};
  std::size_t batch_size = 4;
  FinetuneRecipe recipe;
  std::size_t eval_windows = 16;
  double val_fraction = 0.1;
  bool compare_no_warmup = true;
  // Stage-2 steps over which the two runs' max grad norms are compared. Kept short:
  // once both runs have adapted, the max is set by batch noise.
  std::size_t compare_steps = 10;

  void validate() const;
};

struct DemoResult {
  double baseline_loss = 0.0;  // softmax model after pretraining, held-out windows
  double swapped_loss = 0.0;   // right after the swap, before any finetuning
  double final_loss = 0.0;     // after warmup + finetune
  double final_loss_no_warmup = 0.0;
  double max_grad_norm_warmup = 0.0;
  double max_grad_norm_no_warmup = 0.0;
  std::vector<StepRecord> records;             // pretrain + warmup + finetune
  std::vector<StepRecord> records_no_warmup;   // finetune only
  TinyLMConfig base_config;  // the pretrained softmax model
  TinyLMWeights base_weights;
  TinyLMConfig final_config;  // the finetuned FlashEVA model
  TinyLMWeights final_weights;
};

DemoResult run_adaptation_demo(const DemoConfig& cfg, const std::vector<int>& tokens, std::uint64_t seed);

}  // namespace evakit
