#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evakit/eva.hpp"
#include "evakit/tensor.hpp"

namespace evakit {

enum class AttentionKind { softmax, flasheva };

std::string to_string(AttentionKind kind);
AttentionKind parse_attention_kind(const std::string& s);

// Rotary embedding of every row of x (T x d, d even). Pair (2i, 2i+1) of row t
// is rotated by positions[t] * base^(-2i/d).
Matrix rope_apply(const Matrix& x, std::span<const double> positions, double base = 10000.0);
// Inverse rotation (the transpose); also the backward map of rope_apply.
Matrix rope_inverse(const Matrix& x, std::span<const double> positions, double base = 10000.0);

struct AttentionWeights {
  Matrix wq, wk, wv, wo;  // d x d
  Matrix wg;              // d x d, empty when ungated
  Matrix bg;              // 1 x d, empty when ungated
  bool gated() const { return !wg.empty(); }
};

struct AttentionSpec {
  AttentionKind kind = AttentionKind::softmax;
  EvaConfig eva;  // layer id is taken from here; head ids are filled per head
  std::size_t heads = 1;
  double rope_base = 10000.0;
  TileConfig tiles{64, 64};
};

// Intermediates kept by the forward pass for the backward pass.
struct AttentionBlockCache {
  Matrix x;         // block input (T x d)
  Matrix q_rot;     // rotated queries (T x d)
  Matrix k_rot;     // rotated keys
  Matrix v;
  Matrix attn_out;  // concatenated head outputs
  Matrix gate;      // sigmoid(x Wg + bg), empty when ungated
  Matrix gated;     // gate * attn_out (or attn_out)
};

// out = (sigmoid(x Wg + bg) * attn(x)) Wo, with per-head RoPE'd queries and
// keys and 1/sqrt(head_dim) logit scaling. Ungated weights skip the gate.
Matrix gated_attention_block(const Matrix& x, const AttentionWeights& w, const AttentionSpec& spec,
                             AttentionBlockCache* cache = nullptr);

// Accumulates weight gradients into `grads` (same layout as the weights) and
// returns d x.
Matrix gated_attention_block_backward(const AttentionBlockCache& cache, const AttentionWeights& w,
                                      const AttentionSpec& spec, const Matrix& d_out, AttentionWeights& grads);

struct TinyLMConfig {
  std::size_t layers = 2;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t vocab = 32;
  std::size_t seq_len = 256;
  std::size_t mlp_mult = 4;
  AttentionKind attention = AttentionKind::softmax;
  EvaConfig eva;
  double rope_base = 10000.0;
  bool gated = false;

  std::size_t head_dim() const { return d_model / heads; }
  // d_model divisible by heads, even head dim, eva config valid.
  void validate() const;
};

struct LayerWeights {
  Matrix ln1_gain, ln1_bias;
  AttentionWeights attn;
  Matrix ln2_gain, ln2_bias;
  Matrix w1, b1, w2, b2;
};

struct TinyLMWeights {
  Matrix embedding;  // vocab x d
  std::vector<LayerWeights> layers;
  Matrix lnf_gain, lnf_bias;
  Matrix unembed;  // d x vocab
};

struct ParamRef {
  std::string name;
  Matrix* value = nullptr;
  bool attention = false;  // trained during the attention-only warmup
  bool decay = false;      // receives decoupled weight decay
};

std::vector<ParamRef> parameter_refs(TinyLMWeights& w);
TinyLMWeights zeros_like(const TinyLMWeights& w);
std::size_t parameter_count(const TinyLMWeights& w);

class TinyLM {
 public:
  TinyLM(TinyLMConfig cfg, std::uint64_t init_seed);
  TinyLM(TinyLMConfig cfg, TinyLMWeights weights);

  const TinyLMConfig& config() const { return cfg_; }
  TinyLMWeights& weights() { return weights_; }
  const TinyLMWeights& weights() const { return weights_; }

  AttentionSpec attention_spec(std::size_t layer) const;

  // T x vocab logits for the given context.
  Matrix logits(std::span<const int> tokens) const;

  // Mean next-token cross entropy over tokens[0..T-1] -> tokens[1..T].
  // When `grads` is non-null the gradient (scaled by `grad_scale`) is added to it.
  double loss_and_grad(std::span<const int> tokens, TinyLMWeights* grads, double grad_scale = 1.0) const;
  double loss(std::span<const int> tokens) const { return loss_and_grad(tokens, nullptr); }

 private:
  TinyLMConfig cfg_;
  TinyLMWeights weights_;
};

struct SwapOptions {
  // Bias of newly introduced gates: sigmoid(20) = 1 - 2.1e-9, a pass-through gate.
  double gate_bias = 20.0;
};

// New model with `kind` attention. Non-attention weights are copied unchanged;
// missing gates are introduced in the pass-through regime.
TinyLM swap_attention(const TinyLM& model, AttentionKind kind, const EvaConfig& eva = {}, SwapOptions opts = {});

}  // namespace evakit
