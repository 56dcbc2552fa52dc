#include "evakit/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "evakit/linalg.hpp"

namespace evakit {

void AdamWConfig::validate() const {
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adamw: betas in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("adamw: eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("adamw: weight_decay must be nonnegative");
}

AdamW::AdamW(AdamWConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void AdamW::step(TinyLMWeights& weights, TinyLMWeights& grads, double lr, bool attention_only) {
  if (!(lr > 0.0)) throw ConfigError("adamw: learning rate must be positive");
  auto params = parameter_refs(weights);
  auto gparams = parameter_refs(grads);
  if (params.size() != gparams.size()) throw ShapeError("adamw: gradient layout differs from weights");
  if (slots_.empty()) {
    slots_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      slots_[i].m = Matrix(params[i].value->rows(), params[i].value->cols());
      slots_[i].v = slots_[i].m;
    }
  }
  if (slots_.size() != params.size()) throw ShapeError("adamw: parameter layout changed between steps");

  for (std::size_t i = 0; i < params.size(); ++i) {
    if (attention_only && !params[i].attention) continue;
    Matrix& w = *params[i].value;
    const Matrix& g = *gparams[i].value;
    Slot& s = slots_[i];
    if (g.size() != w.size() || s.m.size() != w.size()) throw ShapeError("adamw: shape mismatch in " + params[i].name);
    ++s.t;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
    const double decay = params[i].decay ? lr * cfg_.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.data()[j];
      double& m = s.m.data()[j];
      double& v = s.v.data()[j];
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * gj;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * gj * gj;
      double& x = w.data()[j];
      x -= decay * x;
      x -= lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
    }
  }
}

void OneCycleCosine::validate() const {
  if (!(max_lr > 0.0)) throw ConfigError("one-cycle: max_lr must be positive");
  if (total_steps == 0) throw ConfigError("one-cycle: total_steps must be >= 1");
  if (!(pct_start > 0.0 && pct_start < 1.0)) throw ConfigError("one-cycle: pct_start in (0, 1)");
  if (!(div_factor > 0.0) || !(final_div_factor > 0.0)) throw ConfigError("one-cycle: div factors must be positive");
}

namespace {

double cosine_anneal(double start, double end, double pct) {
  return end + (start - end) / 2.0 * (1.0 + std::cos(std::numbers::pi * pct));
}

}  // namespace

double OneCycleCosine::at(std::size_t step) const {
  const double initial = max_lr / div_factor;
  const double final_lr = initial / final_div_factor;
  if (total_steps == 1) return max_lr;
  const double last = static_cast<double>(total_steps - 1);
  const double peak = std::max(pct_start * static_cast<double>(total_steps) - 1.0, 0.0);
  const double s = std::min(static_cast<double>(step), last);
  if (s <= peak) return peak == 0.0 ? max_lr : cosine_anneal(initial, max_lr, s / peak);
  return cosine_anneal(max_lr, final_lr, (s - peak) / (last - peak));
}

double global_grad_norm(TinyLMWeights& grads) {
  double sq = 0.0;
  for (const auto& ref : parameter_refs(grads))
    for (double g : ref.value->storage()) sq += g * g;
  return std::sqrt(sq);
}

double clip_grad_norm(TinyLMWeights& grads, double max_norm) {
  const double norm = global_grad_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / (norm + 1e-12);
    for (auto& ref : parameter_refs(grads)) scale_inplace(*ref.value, f);
  }
  return norm;
}

}  // namespace evakit
