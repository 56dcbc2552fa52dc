#include "evakit/config_io.hpp"

#include <set>

#include "json.hpp"

#ifndef EVAKIT_GIT_DESCRIBE
#define EVAKIT_GIT_DESCRIBE "unknown"
#endif

namespace evakit {

using nlohmann::json;

std::string git_describe() { return EVAKIT_GIT_DESCRIBE; }

namespace {

json parse_object(std::string_view text, const char* what) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
  return j;
}

void reject_unknown(const json& j, const std::set<std::string>& known, const char* what) {
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError(std::string(what) + ": unknown key '" + key + "'");
}

// Reads j[key] into out when present; type errors become ConfigError.
template <typename T>
void read(const json& j, const char* key, T& out, const char* what) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(what) + ": bad value for '" + key + "'");
  }
}

json eva_json(const EvaConfig& c) {
  return {{"window", c.window},   {"chunk", c.chunk},   {"mode", to_string(c.mode)},
          {"samples", c.samples}, {"proposal", to_string(c.proposal)},
          {"lambda", c.lambda},   {"clip_mode", to_string(c.clip_mode)}, {"seed", c.seed}};
}

EvaConfig eva_from(const json& j) {
  constexpr const char* what = "eva config";
  if (!j.is_object()) throw ConfigError("eva config: expected a JSON object");
  reject_unknown(j, {"window", "chunk", "mode", "samples", "proposal", "lambda", "clip_mode", "seed", "layer", "head"},
                 what);
  EvaConfig c;
  read(j, "window", c.window, what);
  read(j, "chunk", c.chunk, what);
  read(j, "samples", c.samples, what);
  read(j, "lambda", c.lambda, what);
  read(j, "seed", c.seed, what);
  read(j, "layer", c.layer, what);
  read(j, "head", c.head, what);
  std::string s;
  if (j.contains("mode")) {
    read(j, "mode", s, what);
    c.mode = parse_window_mode(s);
  }
  if (j.contains("proposal")) {
    read(j, "proposal", s, what);
    c.proposal = parse_chunk_proposal(s);
  }
  if (j.contains("clip_mode")) {
    read(j, "clip_mode", s, what);
    c.clip_mode = parse_clip_mode(s);
  }
  c.validate();
  return c;
}

json lm_json(const TinyLMConfig& c) {
  return {{"layers", c.layers},       {"d_model", c.d_model}, {"heads", c.heads},
          {"vocab", c.vocab},         {"seq_len", c.seq_len}, {"mlp_mult", c.mlp_mult},
          {"attention", to_string(c.attention)}, {"eva", eva_json(c.eva)},
          {"rope_base", c.rope_base}, {"gated", c.gated}};
}

TinyLMConfig lm_from(const json& j) {
  constexpr const char* what = "model config";
  if (!j.is_object()) throw ConfigError("model config: expected a JSON object");
  reject_unknown(j, {"layers", "d_model", "heads", "vocab", "seq_len", "mlp_mult", "attention", "eva", "rope_base", "gated"},
                 what);
  TinyLMConfig c;
  read(j, "layers", c.layers, what);
  read(j, "d_model", c.d_model, what);
  read(j, "heads", c.heads, what);
  read(j, "vocab", c.vocab, what);
  read(j, "seq_len", c.seq_len, what);
  read(j, "mlp_mult", c.mlp_mult, what);
  read(j, "rope_base", c.rope_base, what);
  read(j, "gated", c.gated, what);
  if (j.contains("attention")) {
    std::string s;
    read(j, "attention", s, what);
    c.attention = parse_attention_kind(s);
  }
  if (j.contains("eva")) c.eva = eva_from(j.at("eva"));
  c.validate();
  return c;
}

json schedule_json(const OneCycleCosine& s) {
  return {{"max_lr", s.max_lr},
          {"pct_start", s.pct_start},
          {"div_factor", s.div_factor},
          {"final_div_factor", s.final_div_factor}};
}

OneCycleCosine schedule_from(const json& j, OneCycleCosine s) {
  constexpr const char* what = "schedule";
  if (!j.is_object()) throw ConfigError("schedule: expected a JSON object");
  reject_unknown(j, {"max_lr", "pct_start", "div_factor", "final_div_factor"}, what);
  read(j, "max_lr", s.max_lr, what);
  read(j, "pct_start", s.pct_start, what);
  read(j, "div_factor", s.div_factor, what);
  read(j, "final_div_factor", s.final_div_factor, what);
  return s;
}

json recipe_json(const FinetuneRecipe& r) {
  return {{"warmup_steps", r.warmup_steps},
          {"warmup_lr", r.warmup_lr},
          {"main_steps", r.main_steps},
          {"main_schedule", schedule_json(r.main_schedule)},
          {"attention_only_warmup", r.attention_only_warmup},
          {"batch_size", r.batch_size},
          {"adamw",
           {{"beta1", r.adamw.beta1},
            {"beta2", r.adamw.beta2},
            {"eps", r.adamw.eps},
            {"weight_decay", r.adamw.weight_decay}}},
          {"grad_clip", r.grad_clip}};
}

FinetuneRecipe recipe_from(const json& j) {
  constexpr const char* what = "finetune recipe";
  if (!j.is_object()) throw ConfigError("finetune recipe: expected a JSON object");
  reject_unknown(j, {"warmup_steps", "warmup_lr", "main_steps", "main_schedule", "attention_only_warmup", "batch_size",
                     "adamw", "grad_clip"},
                 what);
  FinetuneRecipe r;
  read(j, "warmup_steps", r.warmup_steps, what);
  read(j, "warmup_lr", r.warmup_lr, what);
  read(j, "main_steps", r.main_steps, what);
  read(j, "attention_only_warmup", r.attention_only_warmup, what);
  read(j, "batch_size", r.batch_size, what);
  read(j, "grad_clip", r.grad_clip, what);
  if (j.contains("main_schedule")) r.main_schedule = schedule_from(j.at("main_schedule"), r.main_schedule);
  if (j.contains("adamw")) {
    const json& a = j.at("adamw");
    if (!a.is_object()) throw ConfigError("adamw: expected a JSON object");
    reject_unknown(a, {"beta1", "beta2", "eps", "weight_decay"}, "adamw");
    read(a, "beta1", r.adamw.beta1, "adamw");
    read(a, "beta2", r.adamw.beta2, "adamw");
    read(a, "eps", r.adamw.eps, "adamw");
    read(a, "weight_decay", r.adamw.weight_decay, "adamw");
  }
  r.validate();
  return r;
}

}  // namespace

std::string to_json(const EvaConfig& cfg) { return eva_json(cfg).dump(); }
std::string to_json(const TinyLMConfig& cfg) { return lm_json(cfg).dump(); }
std::string to_json(const FinetuneRecipe& recipe) { return recipe_json(recipe).dump(); }

std::string to_json(const DemoConfig& cfg) {
  json j = {{"model", lm_json(cfg.model)},
            {"eva", eva_json(cfg.eva)},
            {"pretrain_steps", cfg.pretrain_steps},
            {"pretrain_schedule", schedule_json(cfg.pretrain_schedule)},
            {"batch_size", cfg.batch_size},
            {"recipe", recipe_json(cfg.recipe)},
            {"eval_windows", cfg.eval_windows},
            {"val_fraction", cfg.val_fraction},
            {"compare_no_warmup", cfg.compare_no_warmup},
            {"compare_steps", cfg.compare_steps}};
  return j.dump();
}

EvaConfig eva_config_from_json(std::string_view text) { return eva_from(parse_object(text, "eva config")); }
TinyLMConfig tiny_lm_config_from_json(std::string_view text) { return lm_from(parse_object(text, "model config")); }
FinetuneRecipe finetune_recipe_from_json(std::string_view text) {
  return recipe_from(parse_object(text, "finetune recipe"));
}

DemoConfig demo_config_from_json(std::string_view text) {
  constexpr const char* what = "demo config";
  const json j = parse_object(text, what);
  reject_unknown(j, {"model", "eva", "pretrain_steps", "pretrain_schedule", "batch_size", "recipe", "eval_windows",
                     "val_fraction", "compare_no_warmup", "compare_steps"},
                 what);
  DemoConfig c;
  if (j.contains("model")) c.model = lm_from(j.at("model"));
  if (j.contains("eva")) c.eva = eva_from(j.at("eva"));
  read(j, "pretrain_steps", c.pretrain_steps, what);
  if (j.contains("pretrain_schedule")) c.pretrain_schedule = schedule_from(j.at("pretrain_schedule"), c.pretrain_schedule);
  read(j, "batch_size", c.batch_size, what);
  if (j.contains("recipe")) c.recipe = recipe_from(j.at("recipe"));
  read(j, "eval_windows", c.eval_windows, what);
  read(j, "val_fraction", c.val_fraction, what);
  read(j, "compare_no_warmup", c.compare_no_warmup, what);
  read(j, "compare_steps", c.compare_steps, what);
  c.validate();
  return c;
}

}  // namespace evakit
