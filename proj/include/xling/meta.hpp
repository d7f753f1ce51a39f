#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xling/corpus.hpp"
#include "xling/metrics.hpp"
#include "xling/model.hpp"
#include "xling/optim.hpp"
#include "xling/serialize.hpp"
#include "xling/tensor.hpp"
#include "xling/trainer.hpp"

namespace xling {

// A bilevel objective over shared parameters θ and per-language parameter
// groups φ. Losses are keyed: a (language, key) pair names one exact batch
// — data rows, masking, and any dropout stream — so repeated evaluations
// with the same key are bit-identical even at perturbed parameters. The
// map references returned by theta()/phi() alias live storage: writing
// through their raw() buffers is how the meta ops move parameters.
class BilevelProblem {
 public:
  virtual ~BilevelProblem() = default;
  virtual ParamMap& theta() = 0;
  virtual ParamMap& phi(const std::string& lang) = 0;
  virtual const std::vector<std::string>& languages() const = 0;
  virtual Tensor train_loss(Tape& t, const std::string& lang, uint64_t key) = 0;
  virtual Tensor val_loss(Tape& t, const std::string& lang, uint64_t key) = 0;
};

// One lookahead SGD step on the shared parameters: θ′ = θ − β·∇_θ
// L_train(θ, φ_lang) on the batch named by `key`. The problem's θ and φ
// are left untouched; the returned map holds fresh tensors. Non-finite
// gradients raise NumericError.
ParamMap lookahead_theta(BilevelProblem& prob, const std::string& lang, uint64_t key,
                         double beta, double* train_loss_out = nullptr);

struct HypergradConfig {
  double beta = 0.0;          // lookahead learning rate
  double epsilon = 0.0;       // fixed FD step; 0 → the 0.01/‖v‖ rule
  bool include_direct = true; // add ∂L_val/∂φ_i at fixed θ′
};

struct Hypergrad {
  GradientMap grad;                          // one entry per φ_i tensor
  double train_loss = 0.0;                   // L_train(θ, φ_i) on the keyed batch
  std::map<std::string, double> val_losses;  // per language, at θ′
  double direct_norm = 0.0;
  double second_norm = 0.0;
  double epsilon = 0.0;  // FD step actually used (0 when ‖v‖ = 0)
};

// Gradient of the mean validation loss across languages with respect to
// φ_lang, accounting for φ_lang's influence on θ′ = θ − β∇_θL_train:
//
//   g = ∂/∂φ_i (1/L)Σ_j L_val^j(θ′, φ_j)   (direct term, θ′ held fixed)
//     − β · (∇_{φ_i}L_train^i(θ + εv, φ_i) − ∇_{φ_i}L_train^i(θ − εv, φ_i)) / (2ε)
//
// with v = ∇_{θ′}(1/L)Σ_j L_val^j(θ′, φ_j). ‖v‖ = 0 zeroes the
// second-order term. θ is restored exactly before returning. Non-finite
// values anywhere abort with NumericError.
Hypergrad hypergrad_fd(BilevelProblem& prob, const std::string& lang, uint64_t train_key,
                       uint64_t val_key, const HypergradConfig& cfg);

// ---------------------------------------------------------------------------
// Two-phase meta-training over a masked-LM model.
// ---------------------------------------------------------------------------

struct MetaConfig {
  int64_t n_epochs = 1;
  int64_t steps_per_epoch = 100;
  int batch_size = 8;
  int val_batch_size = 8;  // hypergradient validation batch per language
  double mask_prob = 0.15;
  double temperature = 2.0;
  LrSchedule lr;             // β follows the schedule; α = alpha_scale·β
  double alpha_scale = 1.0;  // 0 freezes every φ (degenerate baseline)
  AdamConfig adam;
  bool sgd_phases = false;   // plain SGD in both phases (oracle tests)
  double epsilon = 0.0;      // fixed FD step; 0 → the 0.01/‖v‖ rule
  bool include_direct = true;
  double clip_norm = 5.0;
  uint64_t seed = 1;
  uint64_t eval_seed = 104729;
  int64_t max_eval_sentences = 0;
  std::string run_id = "meta";
  std::string config_digest;
  std::string checkpoint_dir;

  void validate() const;  // throws ConfigError
};

// Adapts a transformer + tokenized corpora to the bilevel interface.
// Train batches are uniform draws over the train split named by the key;
// validation batches walk the val split round-robin. Dropout applies to
// train losses only, replayed from a key-derived stream.
class MlmBilevel : public BilevelProblem {
 public:
  MlmBilevel(Model& model, std::vector<const TokenizedCorpus*> data, int batch_size,
             int val_batch_size, double mask_prob, uint64_t seed);

  ParamMap& theta() override { return parts_.theta; }
  ParamMap& phi(const std::string& lang) override;
  const std::vector<std::string>& languages() const override { return langs_; }
  Tensor train_loss(Tape& t, const std::string& lang, uint64_t key) override;
  Tensor val_loss(Tape& t, const std::string& lang, uint64_t key) override;

 private:
  const TokenizedCorpus& corpus(const std::string& lang) const;
  Tensor loss_on_rows(Tape& t, const TokenizedCorpus& data, const std::vector<int64_t>& rows,
                      Rng& mask_rng, CounterStream* dropout);

  Model& model_;
  std::vector<const TokenizedCorpus*> data_;
  std::vector<std::string> langs_;
  ModelParams parts_;  // aliases the model's storage
  int batch_size_;
  int val_batch_size_;
  double mask_prob_;
  uint64_t seed_;
};

struct MetaStepReport {
  int64_t step = 0;
  std::string language;   // phase-one sampled language i
  double train_loss = 0;  // L_train^i(θ, φ_i)
  std::map<std::string, double> val_losses;  // at θ′
  double direct_norm = 0;
  double second_norm = 0;
  double epsilon = 0;
  double lr_alpha = 0;
  double lr_beta = 0;
  std::string phase2_language;
  double phase2_loss = 0;
  bool applied = true;  // false → non-finite incident, update(s) skipped
};

// Runs Algorithm-style two-phase steps: φ_i moves on its hypergradient
// (meta optimizer), then θ moves on a freshly sampled train batch (base
// optimizer). The two optimizers share the schedule but no state.
class MetaTrainer {
 public:
  MetaTrainer(Model model, MetaConfig cfg, std::string bpe_text = "");

  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const MetaConfig& config() const { return cfg_; }
  int64_t step() const { return step_; }
  int64_t epochs_done() const { return epoch_; }
  int64_t skipped_steps() const { return skipped_; }
  double total_loss_sum() const { return loss_sum_; }
  const std::map<std::string, LanguageStats>& language_stats() const { return lang_stats_; }

  MetaStepReport meta_step(const std::vector<const TokenizedCorpus*>& data);
  void train_one_epoch(const std::vector<const TokenizedCorpus*>& data,
                       MetricsWriter* metrics = nullptr);
  void train(const std::vector<const TokenizedCorpus*>& data, MetricsWriter* metrics = nullptr);
  double validation_perplexity(const TokenizedCorpus& data) const;

  Checkpoint to_checkpoint() const;
  void restore(const Checkpoint& ckpt);
  std::string checkpoint_path(int64_t epoch) const;

 private:
  MetaConfig cfg_;
  Model model_;
  Adam opt_theta_;
  Adam opt_phi_;
  std::string bpe_text_;
  int64_t step_ = 0;
  int64_t epoch_ = 0;
  int64_t skipped_ = 0;
  double loss_sum_ = 0.0;  // phase-two losses (the model's actual MLM loss)
  Rng data_rng_;
  std::map<std::string, LanguageStats> lang_stats_;
};

}  // namespace xling
