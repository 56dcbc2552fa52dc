#include "evakit/model.hpp"

#include <cmath>
#include <limits>

#include "evakit/attention.hpp"
#include "evakit/flasheva.hpp"
#include "evakit/linalg.hpp"
#include "evakit/rng.hpp"

namespace evakit {

std::string to_string(AttentionKind kind) { return kind == AttentionKind::softmax ? "softmax" : "flasheva"; }

AttentionKind parse_attention_kind(const std::string& s) {
  if (s == "softmax") return AttentionKind::softmax;
  if (s == "flasheva") return AttentionKind::flasheva;
  throw ConfigError("unknown attention kind '" + s + "'");
}

// --- RoPE ------------------------------------------------------------------

namespace {

Matrix rope_rotate(const Matrix& x, std::span<const double> positions, double base, double direction) {
  if (x.cols() % 2 != 0) throw ShapeError("rope: feature dimension must be even");
  if (positions.size() != x.rows()) throw ShapeError("rope: one position per row required");
  const std::size_t d = x.cols();
  Matrix out(x.rows(), d);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double angle = direction * positions[t] * theta;
      const double c = std::cos(angle), s = std::sin(angle);
      const double a = x(t, 2 * i), b = x(t, 2 * i + 1);
      out(t, 2 * i) = a * c - b * s;
      out(t, 2 * i + 1) = a * s + b * c;
    }
  }
  return out;
}

Matrix positions_matrix_rope(const Matrix& x, std::size_t heads, double base, double direction) {
  const std::size_t dh = x.cols() / heads;
  std::vector<double> pos(x.rows());
  for (std::size_t t = 0; t < pos.size(); ++t) pos[t] = static_cast<double>(t);
  Matrix out(x.rows(), x.cols());
  for (std::size_t h = 0; h < heads; ++h)
    set_cols(out, rope_rotate(slice_cols(x, h * dh, dh), pos, base, direction), h * dh);
  return out;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

Matrix rope_apply(const Matrix& x, std::span<const double> positions, double base) {
  return rope_rotate(x, positions, base, 1.0);
}

Matrix rope_inverse(const Matrix& x, std::span<const double> positions, double base) {
  return rope_rotate(x, positions, base, -1.0);
}

// --- Gated attention block -------------------------------------------------

namespace {

AttentionProblem head_problem(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t h, std::size_t dh) {
  return AttentionProblem{slice_cols(q, h * dh, dh), slice_cols(k, h * dh, dh), slice_cols(v, h * dh, dh),
                          1.0 / std::sqrt(static_cast<double>(dh))};
}

EvaConfig head_eva(const AttentionSpec& spec, std::size_t h) {
  EvaConfig cfg = spec.eva;
  cfg.head = static_cast<std::uint32_t>(h);
  return cfg;
}

void check_block_weights(const Matrix& x, const AttentionWeights& w, const AttentionSpec& spec) {
  const std::size_t d = x.cols();
  if (w.wq.rows() != d || w.wq.cols() != d || w.wk.rows() != d || w.wk.cols() != d || w.wv.rows() != d ||
      w.wv.cols() != d || w.wo.rows() != d || w.wo.cols() != d)
    throw ShapeError("attention block: projection weights must be d x d");
  if (w.gated() && (w.wg.rows() != d || w.wg.cols() != d || w.bg.rows() != 1 || w.bg.cols() != d))
    throw ShapeError("attention block: gate weights must be d x d and 1 x d");
  if (spec.heads == 0 || d % spec.heads != 0 || (d / spec.heads) % 2 != 0)
    throw ShapeError("attention block: d must split into heads of even width");
}

}  // namespace

Matrix gated_attention_block(const Matrix& x, const AttentionWeights& w, const AttentionSpec& spec,
                             AttentionBlockCache* cache) {
  check_block_weights(x, w, spec);
  const std::size_t d = x.cols();
  const std::size_t dh = d / spec.heads;
  Matrix q_rot = positions_matrix_rope(matmul(x, w.wq), spec.heads, spec.rope_base, 1.0);
  Matrix k_rot = positions_matrix_rope(matmul(x, w.wk), spec.heads, spec.rope_base, 1.0);
  Matrix v = matmul(x, w.wv);

  Matrix attn_out(x.rows(), d);
  for (std::size_t h = 0; h < spec.heads; ++h) {
    const AttentionProblem p = head_problem(q_rot, k_rot, v, h, dh);
    const Matrix o = spec.kind == AttentionKind::softmax
                         ? tiled_softmax_attn(p, Mask::causal(x.rows()), spec.tiles)
                         : flasheva_attn(p, head_eva(spec, h), spec.tiles);
    set_cols(attn_out, o, h * dh);
  }

  Matrix gate;
  Matrix gated = attn_out;
  if (w.gated()) {
    gate = matmul(x, w.wg);
    for (std::size_t t = 0; t < gate.rows(); ++t)
      for (std::size_t j = 0; j < d; ++j) gate(t, j) = sigmoid(gate(t, j) + w.bg(0, j));
    for (std::size_t i = 0; i < gated.size(); ++i) gated.data()[i] *= gate.data()[i];
  }
  Matrix out = matmul(gated, w.wo);
  if (cache) {
    cache->x = x;
    cache->q_rot = std::move(q_rot);
    cache->k_rot = std::move(k_rot);
    cache->v = std::move(v);
    cache->attn_out = std::move(attn_out);
    cache->gate = std::move(gate);
    cache->gated = std::move(gated);
  }
  return out;
}

Matrix gated_attention_block_backward(const AttentionBlockCache& cache, const AttentionWeights& w,
                                      const AttentionSpec& spec, const Matrix& d_out, AttentionWeights& grads) {
  const Matrix& x = cache.x;
  const std::size_t d = x.cols();
  const std::size_t dh = d / spec.heads;
  const std::size_t t_len = x.rows();

  matmul_tn_accumulate(cache.gated, d_out, grads.wo);
  const Matrix d_gated = matmul_nt(d_out, w.wo);

  Matrix d_attn = d_gated;
  Matrix dx(t_len, d);
  if (w.gated()) {
    Matrix d_pre(t_len, d);
    for (std::size_t i = 0; i < d_pre.size(); ++i) {
      const double g = cache.gate.data()[i];
      d_attn.data()[i] = d_gated.data()[i] * g;
      d_pre.data()[i] = d_gated.data()[i] * cache.attn_out.data()[i] * g * (1.0 - g);
    }
    matmul_tn_accumulate(x, d_pre, grads.wg);
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t j = 0; j < d; ++j) grads.bg(0, j) += d_pre(t, j);
    add_inplace(dx, matmul_nt(d_pre, w.wg));
  }

  Matrix dq_rot(t_len, d), dk_rot(t_len, d), dv(t_len, d);
  for (std::size_t h = 0; h < spec.heads; ++h) {
    const AttentionProblem p = head_problem(cache.q_rot, cache.k_rot, cache.v, h, dh);
    const Matrix d_head = slice_cols(d_attn, h * dh, dh);
    const AttentionGrads g = spec.kind == AttentionKind::softmax
                                 ? attn_backward(p, Mask::causal(t_len), d_head, spec.tiles)
                                 : flasheva_backward(p, head_eva(spec, h), d_head, spec.tiles);
    set_cols(dq_rot, g.dq, h * dh);
    set_cols(dk_rot, g.dk, h * dh);
    set_cols(dv, g.dv, h * dh);
  }
  const Matrix dq = positions_matrix_rope(dq_rot, spec.heads, spec.rope_base, -1.0);
  const Matrix dk = positions_matrix_rope(dk_rot, spec.heads, spec.rope_base, -1.0);

  matmul_tn_accumulate(x, dq, grads.wq);
  matmul_tn_accumulate(x, dk, grads.wk);
  matmul_tn_accumulate(x, dv, grads.wv);
  add_inplace(dx, matmul_nt(dq, w.wq));
  add_inplace(dx, matmul_nt(dk, w.wk));
  add_inplace(dx, matmul_nt(dv, w.wv));
  return dx;
}

// --- TinyLM ----------------------------------------------------------------

void TinyLMConfig::validate() const {
  if (layers == 0 || d_model == 0 || heads == 0 || vocab < 2 || seq_len < 2 || mlp_mult == 0)
    throw ConfigError("tiny LM: layers, d_model, heads, mlp_mult >= 1; vocab, seq_len >= 2");
  if (d_model % heads != 0) throw ConfigError("tiny LM: d_model must be divisible by heads");
  if (head_dim() % 2 != 0) throw ConfigError("tiny LM: head dim must be even for RoPE");
  if (!(rope_base > 1.0)) throw ConfigError("tiny LM: rope_base must be > 1");
  eva.validate();
}

std::vector<ParamRef> parameter_refs(TinyLMWeights& w) {
  std::vector<ParamRef> refs;
  refs.push_back({"embedding", &w.embedding, false, false});
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& lw = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    refs.push_back({p + "ln1_gain", &lw.ln1_gain, false, false});
    refs.push_back({p + "ln1_bias", &lw.ln1_bias, false, false});
    refs.push_back({p + "attn.wq", &lw.attn.wq, true, true});
    refs.push_back({p + "attn.wk", &lw.attn.wk, true, true});
    refs.push_back({p + "attn.wv", &lw.attn.wv, true, true});
    refs.push_back({p + "attn.wo", &lw.attn.wo, true, true});
    if (lw.attn.gated()) {
      refs.push_back({p + "attn.wg", &lw.attn.wg, true, true});
      refs.push_back({p + "attn.bg", &lw.attn.bg, true, false});
    }
    refs.push_back({p + "ln2_gain", &lw.ln2_gain, false, false});
    refs.push_back({p + "ln2_bias", &lw.ln2_bias, false, false});
    refs.push_back({p + "mlp.w1", &lw.w1, false, true});
    refs.push_back({p + "mlp.b1", &lw.b1, false, false});
    refs.push_back({p + "mlp.w2", &lw.w2, false, true});
    refs.push_back({p + "mlp.b2", &lw.b2, false, false});
  }
  refs.push_back({"lnf_gain", &w.lnf_gain, false, false});
  refs.push_back({"lnf_bias", &w.lnf_bias, false, false});
  refs.push_back({"unembed", &w.unembed, false, true});
  return refs;
}

TinyLMWeights zeros_like(const TinyLMWeights& w) {
  TinyLMWeights z = w;
  for (auto& ref : parameter_refs(z)) ref.value->fill(0.0);
  return z;
}

std::size_t parameter_count(const TinyLMWeights& w) {
  TinyLMWeights copy = w;
  std::size_t n = 0;
  for (const auto& ref : parameter_refs(copy)) n += ref.value->size();
  return n;
}

namespace {

Matrix random_matrix(CounterRng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (double& x : m.storage()) x = stddev * rng.normal();
  return m;
}

TinyLMWeights init_weights(const TinyLMConfig& cfg, std::uint64_t seed) {
  CounterRng rng(seed, 0x6d6f64656cull);
  const std::size_t d = cfg.d_model;
  const std::size_t hidden = cfg.mlp_mult * d;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid_std = proj_std / std::sqrt(2.0 * static_cast<double>(cfg.layers));
  TinyLMWeights w;
  w.embedding = random_matrix(rng, cfg.vocab, d, 1.0);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerWeights lw;
    lw.ln1_gain = Matrix(1, d, 1.0);
    lw.ln1_bias = Matrix(1, d);
    lw.attn.wq = random_matrix(rng, d, d, proj_std);
    lw.attn.wk = random_matrix(rng, d, d, proj_std);
    lw.attn.wv = random_matrix(rng, d, d, proj_std);
    lw.attn.wo = random_matrix(rng, d, d, resid_std);
    if (cfg.gated) {
      lw.attn.wg = random_matrix(rng, d, d, proj_std);
      lw.attn.bg = Matrix(1, d);
    }
    lw.ln2_gain = Matrix(1, d, 1.0);
    lw.ln2_bias = Matrix(1, d);
    lw.w1 = random_matrix(rng, d, hidden, proj_std);
    lw.b1 = Matrix(1, hidden);
    lw.w2 = random_matrix(rng, hidden, d, resid_std / 2.0);
    lw.b2 = Matrix(1, d);
    w.layers.push_back(std::move(lw));
  }
  w.lnf_gain = Matrix(1, d, 1.0);
  w.lnf_bias = Matrix(1, d);
  w.unembed = random_matrix(rng, d, cfg.vocab, proj_std);
  return w;
}

constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Matrix xhat;
  Vector rstd;
};

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache& cache) {
  const std::size_t d = x.cols();
  Matrix y(x.rows(), d);
  cache.xhat = Matrix(x.rows(), d);
  cache.rstd.assign(x.rows(), 0.0);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto row = x.row(t);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd[t] = rstd;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mean) * rstd;
      cache.xhat(t, j) = xh;
      y(t, j) = xh * gain(0, j) + bias(0, j);
    }
  }
  return y;
}

Matrix layer_norm_backward(const LayerNormCache& cache, const Matrix& gain, const Matrix& dy, Matrix& d_gain,
                           Matrix& d_bias) {
  const std::size_t d = dy.cols();
  Matrix dx(dy.rows(), d);
  for (std::size_t t = 0; t < dy.rows(); ++t) {
    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double dxh = dy(t, j) * gain(0, j);
      mean_dxh += dxh;
      mean_dxh_xh += dxh * cache.xhat(t, j);
      d_gain(0, j) += dy(t, j) * cache.xhat(t, j);
      d_bias(0, j) += dy(t, j);
    }
    mean_dxh /= static_cast<double>(d);
    mean_dxh_xh /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double dxh = dy(t, j) * gain(0, j);
      dx(t, j) = cache.rstd[t] * (dxh - mean_dxh - cache.xhat(t, j) * mean_dxh_xh);
    }
  }
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

void add_row_bias(Matrix& m, const Matrix& bias) {
  for (std::size_t t = 0; t < m.rows(); ++t)
    for (std::size_t j = 0; j < m.cols(); ++j) m(t, j) += bias(0, j);
}

void accumulate_row_sums(const Matrix& m, Matrix& bias_grad) {
  for (std::size_t t = 0; t < m.rows(); ++t)
    for (std::size_t j = 0; j < m.cols(); ++j) bias_grad(0, j) += m(t, j);
}

struct LayerCache {
  LayerNormCache ln1, ln2;
  AttentionBlockCache attn;
  Matrix h_in;   // ln2 output
  Matrix pre;    // h_in W1 + b1
  Matrix act;    // gelu(pre)
};

}  // namespace

TinyLM::TinyLM(TinyLMConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  weights_ = init_weights(cfg_, init_seed);
}

TinyLM::TinyLM(TinyLMConfig cfg, TinyLMWeights weights) : cfg_(std::move(cfg)), weights_(std::move(weights)) {
  cfg_.validate();
  if (weights_.layers.size() != cfg_.layers || weights_.embedding.rows() != cfg_.vocab ||
      weights_.embedding.cols() != cfg_.d_model)
    throw ShapeError("tiny LM: weights do not match config");
}

AttentionSpec TinyLM::attention_spec(std::size_t layer) const {
  AttentionSpec spec;
  spec.kind = cfg_.attention;
  spec.eva = cfg_.eva;
  spec.eva.layer = static_cast<std::uint32_t>(layer);
  spec.heads = cfg_.heads;
  spec.rope_base = cfg_.rope_base;
  return spec;
}

namespace {

struct ForwardState {
  std::vector<LayerCache> layers;
  LayerNormCache lnf;
  Matrix final_norm;
  Matrix logits;
};

Matrix forward(const TinyLM& model, std::span<const int> tokens, ForwardState* state) {
  const auto& cfg = model.config();
  const auto& w = model.weights();
  const std::size_t t_len = tokens.size();
  if (t_len == 0 || t_len > cfg.seq_len) throw ShapeError("tiny LM: context must hold 1..seq_len tokens");
  Matrix x(t_len, cfg.d_model);
  for (std::size_t t = 0; t < t_len; ++t) {
    const int tok = tokens[t];
    if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab) throw ShapeError("tiny LM: token out of range");
    std::copy(w.embedding.row(static_cast<std::size_t>(tok)).begin(),
              w.embedding.row(static_cast<std::size_t>(tok)).end(), x.row(t).begin());
  }
  if (state) state->layers.resize(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& lw = w.layers[l];
    LayerCache local;
    LayerCache& c = state ? state->layers[l] : local;
    const Matrix a_in = layer_norm(x, lw.ln1_gain, lw.ln1_bias, c.ln1);
    add_inplace(x, gated_attention_block(a_in, lw.attn, model.attention_spec(l), state ? &c.attn : nullptr));
    c.h_in = layer_norm(x, lw.ln2_gain, lw.ln2_bias, c.ln2);
    c.pre = matmul(c.h_in, lw.w1);
    add_row_bias(c.pre, lw.b1);
    c.act = c.pre;
    for (double& v : c.act.storage()) v = gelu(v);
    Matrix mlp = matmul(c.act, lw.w2);
    add_row_bias(mlp, lw.b2);
    add_inplace(x, mlp);
  }
  LayerNormCache lnf_local;
  Matrix final_norm = layer_norm(x, w.lnf_gain, w.lnf_bias, state ? state->lnf : lnf_local);
  Matrix logits = matmul(final_norm, w.unembed);
  if (state) state->final_norm = std::move(final_norm);
  return logits;
}

}  // namespace

Matrix TinyLM::logits(std::span<const int> tokens) const { return forward(*this, tokens, nullptr); }

double TinyLM::loss_and_grad(std::span<const int> tokens, TinyLMWeights* grads, double grad_scale) const {
  if (tokens.size() < 2) throw ShapeError("tiny LM: need at least two tokens for a next-token loss");
  const std::span<const int> context = tokens.first(tokens.size() - 1);
  const std::size_t t_len = context.size();
  ForwardState state;
  Matrix logits = forward(*this, context, grads ? &state : nullptr);

  // Softmax cross entropy; logits become d loss / d logits in place.
  double loss = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    auto row = logits.row(t);
    const std::size_t target = static_cast<std::size_t>(tokens[t + 1]);
    if (target >= cfg_.vocab) throw ShapeError("tiny LM: target out of range");
    const double lse = log_sum_exp(row);
    loss += lse - row[target];
    for (double& v : row) v = std::exp(v - lse) / static_cast<double>(t_len) * grad_scale;
    row[target] -= grad_scale / static_cast<double>(t_len);
  }
  loss /= static_cast<double>(t_len);
  if (!std::isfinite(loss)) throw NumericalError("tiny LM: non-finite loss");
  if (!grads) return loss;

  const auto& w = weights_;
  TinyLMWeights& g = *grads;
  matmul_tn_accumulate(state.final_norm, logits, g.unembed);
  Matrix dx = layer_norm_backward(state.lnf, w.lnf_gain, matmul_nt(logits, w.unembed), g.lnf_gain, g.lnf_bias);

  for (std::size_t l = cfg_.layers; l-- > 0;) {
    const auto& lw = w.layers[l];
    auto& lg = g.layers[l];
    LayerCache& c = state.layers[l];

    // MLP branch.
    accumulate_row_sums(dx, lg.b2);
    matmul_tn_accumulate(c.act, dx, lg.w2);
    Matrix d_pre = matmul_nt(dx, lw.w2);
    for (std::size_t i = 0; i < d_pre.size(); ++i) d_pre.data()[i] *= gelu_grad(c.pre.data()[i]);
    accumulate_row_sums(d_pre, lg.b1);
    matmul_tn_accumulate(c.h_in, d_pre, lg.w1);
    add_inplace(dx, layer_norm_backward(c.ln2, lw.ln2_gain, matmul_nt(d_pre, lw.w1), lg.ln2_gain, lg.ln2_bias));

    // Attention branch.
    const Matrix d_a_in = gated_attention_block_backward(c.attn, lw.attn, attention_spec(l), dx, lg.attn);
    add_inplace(dx, layer_norm_backward(c.ln1, lw.ln1_gain, d_a_in, lg.ln1_gain, lg.ln1_bias));
  }

  for (std::size_t t = 0; t < t_len; ++t) {
    auto dst = g.embedding.row(static_cast<std::size_t>(context[t]));
    const auto src = dx.row(t);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
  return loss;
}

TinyLM swap_attention(const TinyLM& model, AttentionKind kind, const EvaConfig& eva, SwapOptions opts) {
  TinyLMConfig cfg = model.config();
  cfg.attention = kind;
  if (kind == AttentionKind::flasheva) cfg.eva = eva;
  TinyLMWeights w = model.weights();
  const std::size_t d = cfg.d_model;
  for (auto& lw : w.layers) {
    if (lw.attn.gated()) continue;
    lw.attn.wg = Matrix(d, d);
    lw.attn.bg = Matrix(1, d, opts.gate_bias);
  }
  cfg.gated = true;
  return TinyLM(cfg, std::move(w));
}

}  // namespace evakit
