#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xling/corpus.hpp"
#include "xling/model.hpp"
#include "xling/optim.hpp"

namespace xling {

// ---------------------------------------------------------------------------
// Interference diagnostics: gradient-conflict probes over shared parameters,
// and per-language importance masks learned through relaxed-L0 (Hard
// Concrete) gates on a frozen model.
// ---------------------------------------------------------------------------

// ============================ gradient probes ==============================

struct GradientProbeConfig {
  int batch_size = 8;
  int micro_batches = 1;     // gradients are accumulated over this many batches
  double mask_prob = 0.15;
  bool use_dropout = false;  // when true, dropout noise is keyed by (seed, language, key)
  uint64_t seed = 1;

  void validate() const;  // throws ConfigError
};

// Cosine between two gradient maps with identical name sets, flattened and
// concatenated in ascending name order. Returns NaN — the undefined-
// similarity sentinel, to be recorded but excluded from averages — when
// either side has zero norm. Throws ShapeError on mismatched names/shapes.
double gradient_cosine(const GradientMap& ga, const GradientMap& gb);

// Accumulated gradient of the MLM loss with respect to the shared (theta)
// parameters only, over cfg.micro_batches train-split batches named by
// `key`. Read-only on the model; identical (data, cfg, key) replays
// bit-identically. Every theta name appears in the result, zero-filled
// where no gradient reached it.
GradientMap shared_gradient(const Model& model, const TokenizedCorpus& data,
                            const GradientProbeConfig& cfg, uint64_t key);

// Cosine between the shared-parameter gradients of one batch from `a` and
// one from `b`, both evaluated at the model's current parameters.
double probe_cosine(const Model& model, const TokenizedCorpus& a, uint64_t key_a,
                    const TokenizedCorpus& b, uint64_t key_b, const GradientProbeConfig& cfg);

// ============================ Hard Concrete ================================

// Stretched-and-clamped binary-concrete distribution. A uniform draw u maps
// to s = sigmoid((ln u - ln(1-u) + pi) / beta), stretched to (gamma, zeta)
// and clamped to [0, 1], giving point masses at exactly 0 and 1.
struct HardConcreteConfig {
  double gamma = -0.1;
  double zeta = 1.1;
  double beta = 2.0 / 3.0;

  void validate() const;  // gamma < 0, zeta > 1, 0 < beta < 1
  // beta * ln(-gamma/zeta); P(z > 0) = sigmoid(pi - open_shift()).
  double open_shift() const;
};

// One gate sample z in [0, 1]. pre: 0 < u < 1.
double hard_concrete_gate(double pi, double u, const HardConcreteConfig& cfg);

// P(z > 0) for a single group.
double gate_open_probability(double pi, const HardConcreteConfig& cfg);

// Expected number of open gates: sum of per-group open probabilities.
double expected_l0(const std::vector<double>& pi, const HardConcreteConfig& cfg);

// Differentiable gate sample recorded on the tape: logit_u holds
// ln u - ln(1-u) per group (an untracked constant), pi is the tracked
// location parameter. Gradients flow to pi through the soft region.
Tensor reparam_gates(Tape& t, const Tensor& pi, const Tensor& logit_u, const HardConcreteConfig& cfg);

// Differentiable expected-L0 penalty: sum_g sigmoid(pi_g - open_shift).
Tensor expected_l0_term(Tape& t, const Tensor& pi, const HardConcreteConfig& cfg);

// Fresh logistic noise ln u - ln(1-u), one draw per group; untracked.
Tensor logistic_noise(const Shape& shape, Rng& rng);

// =============================== mask params ===============================

enum class BlockType { embedding, attention, feedforward };

const char* to_string(BlockType block);
BlockType block_type_from_string(const std::string& name);

// Flat coordinates of one gate group. The embedding table sits below the
// layer stack and carries layer = -1.
struct GroupIndex {
  int layer = -1;
  BlockType block = BlockType::embedding;
  int64_t group = 0;
};

struct MaskShape {
  int64_t emb = 0;              // embedding groups; 0 = no embedding gates
  std::vector<int64_t> attn;    // groups per layer
  std::vector<int64_t> ffn;     // groups per layer

  int64_t total() const;
  bool operator==(const MaskShape&) const = default;
};

// Per-language gate locations pi, one scalar per parameter group, stored as
// named tensors "mask/emb", "mask/layer<L>/attn", "mask/layer<L>/ffn".
struct MaskParams {
  std::string language;
  MaskShape shape;
  ParamMap pi;

  // Stable flattening: embedding groups first, then per layer attention
  // then feedforward. index()[i] labels flat()[i].
  std::vector<double> flat() const;
  std::vector<GroupIndex> index() const;
};

// Gate groups matching a transformer: one per embedding slice of
// `emb_group_size` channels, per attention head, per ffn hidden unit.
MaskShape mask_shape_for(const TransformerConfig& cfg, int emb_group_size = 8);

MaskParams init_mask_params(std::string language, const MaskShape& shape, double init_pi);

// Deterministic evaluation gates: the clamped stretched sigmoid at u = 0.5.
GateSet mean_gates(const MaskParams& masks, const HardConcreteConfig& cfg);

// Expected open-gate count over every group of `masks`.
double expected_l0(const MaskParams& masks, const HardConcreteConfig& cfg);

// ============================== mask learning ==============================

struct MaskLearnConfig {
  HardConcreteConfig hc;
  double lambda = 1e-3;  // sparsity pressure on the expected-L0 term
  int steps = 200;
  int batch_size = 8;
  double mask_prob = 0.15;
  double lr = 0.05;
  AdamConfig adam;
  double init_pi = 1.0;
  int emb_group_size = 8;
  uint64_t seed = 1;

  void validate() const;  // throws ConfigError
};

// Anything whose loss can be evaluated under a gate set: the transformer
// MLM path in production, small constructed models in tests. `key` names
// the batch — equal keys must replay the identical loss.
class MaskableObjective {
 public:
  virtual ~MaskableObjective() = default;
  virtual MaskShape mask_shape() const = 0;
  virtual Tensor loss(Tape& t, const GateSet& gates, uint64_t key) = 0;
};

// Minimizes loss(z(pi)) + lambda * E|z|_0 over pi by Adam, sampling fresh
// reparameterized gates every step. Deterministic per cfg.seed. errors:
// NumericError on a non-finite loss or gradient.
MaskParams learn_masks(MaskableObjective& objective, std::string language,
                       const MaskLearnConfig& cfg);

// MLM front-end: learns masks for data.language against the frozen model
// (weights asserted byte-identical before and after). Dropout stays off —
// the model is in evaluation role; only the MLM corruption is stochastic.
MaskParams learn_masks(const Model& model, const TokenizedCorpus& data,
                       const MaskLearnConfig& cfg);

// The keyed MLM objective used by the front-end, exposed for composition.
class MlmMaskObjective final : public MaskableObjective {
 public:
  MlmMaskObjective(const Model& model, const TokenizedCorpus& data, int batch_size,
                   double mask_prob, int emb_group_size, uint64_t seed);

  MaskShape mask_shape() const override;
  Tensor loss(Tape& t, const GateSet& gates, uint64_t key) override;

 private:
  const Model& model_;
  const TokenizedCorpus& data_;
  int batch_size_;
  double mask_prob_;
  int emb_group_size_;
  uint64_t seed_;
};

// ============================= mask analytics ==============================

struct LayerSimilarity {
  int layer = 0;
  BlockType block = BlockType::attention;
  double cosine = 0.0;  // NaN when either pi vector has zero norm
};

// Cosine of the two languages' pi vectors restricted to each
// (layer, block type) with block type in {attention, feedforward}; rows
// ordered by layer ascending, attention before feedforward. Embedding
// gates carry no layer and are excluded. errors: ShapeError when the
// group indexing differs.
std::vector<LayerSimilarity> mask_similarity_by_layer(const MaskParams& a, const MaskParams& b);

struct RankedGroup {
  GroupIndex index;
  double pi_a = 0.0;
  double pi_b = 0.0;
  double norm_a = 0.0;  // min-max normalized to [-1, 1] within language a
  double norm_b = 0.0;  // likewise within language b
  std::string label;    // universal | specific_to_a | specific_to_b | dropped_by_both
};

// The k groups of largest |pi_a|, labeled by sign pattern (pi >= 0 counts
// as kept). Normalized columns are presentation-only. pre: 0 <= k <= group
// count (ConfigError); identical shapes (ShapeError). k = 0 gives {}.
std::vector<RankedGroup> top_k_groups(const MaskParams& a, const MaskParams& b, int k);

// Tabular persistence: CSV with header language,layer,block_type,group_id,pi
// in the stable flattening order; values round-trip exactly. errors:
// IoError on unreadable/malformed files.
void save_mask_params(const std::string& path, const MaskParams& masks);
MaskParams load_mask_params(const std::string& path);

}  // namespace xling
