#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xling/tensor.hpp"

namespace xling {

// ---------------------------------------------------------------------------
// Transformer encoder with an MLM head and five capacity modes controlling
// where per-language parameters live:
//   shared_only    — every tensor shared (φ empty)
//   lang_ffn       — per-language feedforward weights replace the shared ones
//   lang_attn      — per-language attention projections replace the shared ones
//   lang_adapter   — per-language bottleneck adapters after each attention
//                    and feedforward block
//   shared_adapter — one shared adapter stack at the same insertion points
// Language-specific tensors are named "lang/<id>/..."; everything else is θ.
// ---------------------------------------------------------------------------

enum class CapacityMode { shared_only, lang_ffn, lang_attn, lang_adapter, shared_adapter };

const char* to_string(CapacityMode mode);
CapacityMode capacity_mode_from_string(const std::string& name);

struct TransformerConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_ffn = 256;
  int64_t max_seq_len = 32;
  int vocab_size = 0;  // set from the tokenizer
  double dropout = 0.1;
  // lang_attn duplicates the whole attention block (Q,K,V and the output
  // projection); set true to duplicate only the Q,K,V projections.
  bool lang_attn_qkv_only = false;

  int head_dim() const { return d_model / n_heads; }
  int adapter_dim() const { return d_model / 4; }
  void validate() const;  // throws ConfigError
};

// θ / φ partition view. Tensors alias the model's storage.
struct ModelParams {
  ParamMap theta;
  std::map<std::string, ParamMap> phi;  // language id → its tensors
};

struct ParamCounts {
  int64_t theta = 0;
  std::map<std::string, int64_t> phi;
  int64_t total() const;
};

// Structured multiplicative gates applied during the forward pass (the
// pruning module's mask interface). Any tensor may be left undefined to
// skip that site. Group granularity follows the gate length: an embedding
// gate of g groups spans d_model/g channels each, an ffn gate of g groups
// spans d_ffn/g hidden units each (lengths must divide evenly); attention
// gates are always one per head.
struct GateSet {
  Tensor emb;                // (g,) with g | d_model
  std::vector<Tensor> attn;  // per layer: (n_heads,)
  std::vector<Tensor> ffn;   // per layer: (g,) with g | d_ffn
};

class Model {
 public:
  // Deterministic init: each tensor is seeded from (seed, its name), so θ
  // values match across capacity modes for a fixed seed. Adapters start as
  // exact no-ops (W_h = 0).
  Model(TransformerConfig cfg, CapacityMode mode, std::vector<std::string> languages,
        uint64_t seed);

  const TransformerConfig& config() const { return cfg_; }
  CapacityMode mode() const { return mode_; }
  const std::vector<std::string>& languages() const { return languages_; }
  bool has_language(const std::string& lang) const;

  ParamMap& params() { return params_; }
  const ParamMap& params() const { return params_; }

  // Exact, disjoint θ/φ split covering every tensor; names sort stably.
  ModelParams partition() const;
  ParamCounts param_counts() const;

  // Final hidden states (B, T, d_model). PAD positions are masked out of
  // attention. Pass a stream to enable dropout (training); nullptr runs
  // deterministic eval. Gates, when given, multiply embedding channels,
  // attention head outputs, and ffn hidden units.
  Tensor forward_hidden(Tape& t, const IntArray& ids, const std::string& lang,
                        CounterStream* dropout_stream = nullptr,
                        const GateSet* gates = nullptr) const;

  // MLM logits (B*T, vocab) — hidden states times the tied input embedding
  // plus an output bias.
  Tensor forward_logits(Tape& t, const IntArray& ids, const std::string& lang,
                        CounterStream* dropout_stream = nullptr,
                        const GateSet* gates = nullptr) const;

  // Mean cross-entropy over positions with target != -1. Zero such
  // positions → loss 0 with zero gradients. Only the routed language's φ
  // joins the tape.
  Tensor forward_mlm(Tape& t, const IntArray& inputs, const IntArray& targets,
                     const std::string& lang, CounterStream* dropout_stream = nullptr,
                     const GateSet* gates = nullptr) const;

  Model clone() const;  // deep copy (fresh storage, same values)

 private:
  const Tensor& p(const std::string& name) const;
  // Routed lookup: "lang/<id>/<suffix>" when that tensor exists, else the
  // shared "<suffix>".
  const Tensor& routed(const std::string& lang, const std::string& suffix) const;

  TransformerConfig cfg_;
  CapacityMode mode_ = CapacityMode::shared_only;
  std::vector<std::string> languages_;
  uint64_t seed_ = 0;
  ParamMap params_;
};

// o = W_h · g(W_z · z) + z with g = relu; z is (N, d), W_z (d, b), W_h (b, d).
Tensor adapter_apply(Tape& t, const Tensor& z, const Tensor& wz, const Tensor& wh);

}  // namespace xling
