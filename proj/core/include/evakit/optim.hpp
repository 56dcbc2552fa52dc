#pragma once

#include <cstddef>

#include "evakit/model.hpp"

namespace evakit {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;

  void validate() const;
};

// Decoupled weight decay Adam over the parameters of a TinyLMWeights layout.
// Moment buffers are keyed by parameter position, so the layout must not change
// between steps.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {});

  // One update with learning rate `lr`. When `attention_only` is set, only
  // attention parameters move (and only their step counts advance).
  void step(TinyLMWeights& weights, TinyLMWeights& grads, double lr, bool attention_only = false);

  const AdamWConfig& config() const { return cfg_; }

 private:
  struct Slot {
    Matrix m, v;
    std::size_t t = 0;
  };
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
};

// One-cycle schedule with cosine annealing in both phases: initial = max / div,
// rising to max at step pct_start * total - 1, then falling to initial / final_div
// at step total - 1.
struct OneCycleCosine {
  double max_lr = 1e-3;
  std::size_t total_steps = 1;
  double pct_start = 0.1;
  double div_factor = 25.0;
  double final_div_factor = 1e4;

  void validate() const;
  double at(std::size_t step) const;
};

// L2 norm over every parameter gradient.
double global_grad_norm(TinyLMWeights& grads);
// Rescales grads so the global norm is at most max_norm; returns the pre-clip norm.
double clip_grad_norm(TinyLMWeights& grads, double max_norm);

}  // namespace evakit
