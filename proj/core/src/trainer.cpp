#include "evakit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>

#include "evakit/config_io.hpp"
#include "evakit/corpus.hpp"
#include "evakit/fixture.hpp"
#include "json.hpp"

namespace evakit {

void FinetuneRecipe::validate() const {
  if (!(warmup_lr > 0.0)) throw ConfigError("recipe: warmup_lr must be positive");
  if (batch_size == 0) throw ConfigError("recipe: batch_size must be >= 1");
  if (!(grad_clip >= 0.0)) throw ConfigError("recipe: grad_clip must be nonnegative");
  adamw.validate();
  if (main_steps > 0) {
    OneCycleCosine s = main_schedule;
    s.total_steps = main_steps;
    s.validate();
  }
}

namespace {

enum StageStream : std::uint64_t { kPretrainStream = 1, kWarmupStream = 2, kMainStream = 3 };

StepRecord train_step(TinyLM& model, AdamW& opt, const std::vector<int>& corpus, CounterRng& rng,
                      std::size_t batch_size, double lr, bool attention_only, double grad_clip) {
  const std::size_t window = model.config().seq_len + 1;
  TinyLMWeights grads = zeros_like(model.weights());
  double loss = 0.0;
  const double inv = 1.0 / static_cast<double>(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::vector<int> tokens = sample_window(corpus, window, rng);
    loss += model.loss_and_grad(tokens, &grads, inv) * inv;
  }
  const double norm = clip_grad_norm(grads, grad_clip);
  if (!std::isfinite(loss) || !std::isfinite(norm)) throw NumericalError("training diverged: non-finite loss");
  opt.step(model.weights(), grads, lr, attention_only);
  return {0, loss, norm, lr, ""};
}

}  // namespace

std::vector<StepRecord> pretrain(TinyLM& model, const std::vector<int>& corpus, std::size_t steps,
                                 const OneCycleCosine& schedule, std::size_t batch_size, std::uint64_t seed,
                                 const AdamWConfig& adamw, double grad_clip) {
  if (batch_size == 0) throw ConfigError("pretrain: batch_size must be >= 1");
  OneCycleCosine sched = schedule;
  sched.total_steps = std::max<std::size_t>(steps, 1);
  sched.validate();
  AdamW opt(adamw);
  CounterRng rng(seed, kPretrainStream);
  std::vector<StepRecord> records;
  for (std::size_t i = 0; i < steps; ++i) {
    StepRecord r = train_step(model, opt, corpus, rng, batch_size, sched.at(i), false, grad_clip);
    r.step = i;
    r.stage = "pretrain";
    records.push_back(r);
  }
  return records;
}

std::vector<StepRecord> train_warmup_finetune(TinyLM& model, const std::vector<int>& corpus,
                                              const FinetuneRecipe& recipe, std::uint64_t seed,
                                              std::size_t main_step_limit) {
  recipe.validate();
  std::vector<StepRecord> records;
  std::size_t step = 0;
  {
    AdamW opt(recipe.adamw);
    CounterRng rng(seed, kWarmupStream);
    for (std::size_t i = 0; i < recipe.warmup_steps; ++i, ++step) {
      StepRecord r = train_step(model, opt, corpus, rng, recipe.batch_size, recipe.warmup_lr,
                                recipe.attention_only_warmup, recipe.grad_clip);
      r.step = step;
      r.stage = "warmup";
      records.push_back(r);
    }
  }
  if (recipe.main_steps > 0) {
    OneCycleCosine sched = recipe.main_schedule;
    sched.total_steps = recipe.main_steps;
    AdamW opt(recipe.adamw);
    CounterRng rng(seed, kMainStream);
    const std::size_t run = std::min(recipe.main_steps, main_step_limit);
    for (std::size_t i = 0; i < run; ++i, ++step) {
      StepRecord r = train_step(model, opt, corpus, rng, recipe.batch_size, sched.at(i), false, recipe.grad_clip);
      r.step = step;
      r.stage = "finetune";
      records.push_back(r);
    }
  }
  return records;
}

WarmupComparison compare_warmup(const TinyLM& swapped, const std::vector<int>& corpus, const FinetuneRecipe& recipe,
                                std::uint64_t seed, std::size_t steps) {
  WarmupComparison c;
  TinyLM warm = swapped;
  c.with_warmup = max_grad_norm(train_warmup_finetune(warm, corpus, recipe, seed, steps), "finetune", steps);
  TinyLM cold = swapped;
  FinetuneRecipe no_warmup = recipe;
  no_warmup.warmup_steps = 0;
  c.without_warmup = max_grad_norm(train_warmup_finetune(cold, corpus, no_warmup, seed, steps), "finetune", steps);
  return c;
}

double eval_loss(const TinyLM& model, const std::vector<int>& corpus, std::size_t windows) {
  if (windows == 0) throw ConfigError("eval_loss: windows must be >= 1");
  double total = 0.0;
  for (const auto& w : strided_windows(corpus, model.config().seq_len + 1, windows)) total += model.loss(w);
  return total / static_cast<double>(windows);
}

double max_grad_norm(const std::vector<StepRecord>& records, const std::string& stage, std::size_t first_n) {
  double mx = 0.0;
  std::size_t seen = 0;
  for (const auto& r : records) {
    if (r.stage != stage) continue;
    if (seen++ >= first_n) break;
    mx = std::max(mx, r.grad_norm);
  }
  return mx;
}

void write_metrics_csv(std::ostream& out, const std::vector<StepRecord>& records,
                       const std::vector<std::string>& comment_lines) {
  for (const auto& line : comment_lines) out << "# " << line << '\n';
  out << "step,loss,grad_norm,lr,stage\n";
  out << std::setprecision(10);
  for (const auto& r : records)
    out << r.step << ',' << r.loss << ',' << r.grad_norm << ',' << r.lr << ',' << r.stage << '\n';
}

namespace fs = std::filesystem;

void save_checkpoint(const std::string& dir, const TinyLM& model, std::size_t step, std::uint64_t seed) {
  fs::create_directories(dir);
  TinyLMWeights copy = model.weights();
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& ref : parameter_refs(copy)) {
    const std::string file = ref.name + ".evat";
    write_tensor_file((fs::path(dir) / file).string(), to_tensor(*ref.value, 8));
    tensors.push_back({{"name", ref.name}, {"file", file}});
  }
  nlohmann::json manifest = {{"config", nlohmann::json::parse(to_json(model.config()))},
                             {"step", step},
                             {"seed", seed},
                             {"git_describe", git_describe()},
                             {"tensors", tensors}};
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw ConfigError("cannot write checkpoint manifest in " + dir);
  out << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw ConfigError("no checkpoint manifest in " + dir);
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint manifest: ") + e.what());
  }
  Checkpoint ck;
  ck.config = tiny_lm_config_from_json(manifest.at("config").dump());
  ck.step = manifest.value("step", std::size_t{0});
  ck.seed = manifest.value("seed", std::uint64_t{0});

  // Shapes come from a freshly initialized model of the same config.
  TinyLM shape_model(ck.config, 0);
  ck.weights = shape_model.weights();
  std::map<std::string, std::string> files;
  for (const auto& t : manifest.at("tensors")) files[t.at("name").get<std::string>()] = t.at("file").get<std::string>();
  for (auto& ref : parameter_refs(ck.weights)) {
    const auto it = files.find(ref.name);
    if (it == files.end()) throw ConfigError("checkpoint missing tensor " + ref.name);
    const fs::path file = fs::path(dir) / it->second;
    if (!fs::exists(file)) throw ConfigError("checkpoint tensor file missing: " + file.string());
    Matrix m = to_matrix(read_tensor_file(file.string()));
    if (m.rows() != ref.value->rows() || m.cols() != ref.value->cols())
      throw ShapeError("checkpoint tensor " + ref.name + " has the wrong shape");
    *ref.value = std::move(m);
  }
  return ck;
}

void DemoConfig::validate() const {
  model.validate();
  eva.validate();
  recipe.validate();
  if (model.attention != AttentionKind::softmax) throw ConfigError("demo: the base model must use softmax attention");
  if (batch_size == 0 || eval_windows == 0) throw ConfigError("demo: batch_size and eval_windows must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("demo: val_fraction in (0, 1)");
}

DemoResult run_adaptation_demo(const DemoConfig& cfg, const std::vector<int>& tokens, std::uint64_t seed) {
  cfg.validate();
  const CorpusSplit split = split_corpus(tokens, cfg.val_fraction);
  DemoResult res;

  TinyLM base(cfg.model, derive_seed(seed, 0x696e6974));
  res.records = pretrain(base, split.train, cfg.pretrain_steps, cfg.pretrain_schedule, cfg.batch_size, seed,
                         cfg.recipe.adamw, cfg.recipe.grad_clip);
  res.baseline_loss = eval_loss(base, split.val, cfg.eval_windows);
  res.base_config = base.config();
  res.base_weights = base.weights();

  EvaConfig eva = cfg.eva;
  eva.seed = derive_seed(seed, 0x657661);
  const TinyLM swapped = swap_attention(base, AttentionKind::flasheva, eva);
  res.swapped_loss = eval_loss(swapped, split.val, cfg.eval_windows);

  TinyLM tuned = swapped;
  const std::uint64_t ft_seed = derive_seed(seed, 0x6674);
  auto ft = train_warmup_finetune(tuned, split.train, cfg.recipe, ft_seed);
  res.max_grad_norm_warmup = max_grad_norm(ft, "finetune", cfg.compare_steps);
  res.records.insert(res.records.end(), ft.begin(), ft.end());
  res.final_loss = eval_loss(tuned, split.val, cfg.eval_windows);

  if (cfg.compare_no_warmup) {
    TinyLM cold = swapped;
    FinetuneRecipe no_warmup = cfg.recipe;
    no_warmup.warmup_steps = 0;
    res.records_no_warmup = train_warmup_finetune(cold, split.train, no_warmup, ft_seed);
    res.max_grad_norm_no_warmup = max_grad_norm(res.records_no_warmup, "finetune", cfg.compare_steps);
    res.final_loss_no_warmup = eval_loss(cold, split.val, cfg.eval_windows);
  }
  res.final_config = tuned.config();
  res.final_weights = tuned.weights();
  return res;
}

}  // namespace evakit
