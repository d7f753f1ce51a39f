#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xling/corpus.hpp"
#include "xling/metrics.hpp"
#include "xling/model.hpp"
#include "xling/optim.hpp"
#include "xling/rng.hpp"
#include "xling/serialize.hpp"

namespace xling {

// exp(mean masked cross-entropy) over the validation split, dropout off,
// masking drawn deterministically from eval_seed and the language name
// (identical across calls and epochs). max_rows = 0 evaluates the whole
// split. `gates`, when given, scores the gated (masked-parameter) model.
// errors: ConfigError on an empty validation split.
double validation_perplexity(const Model& model, const TokenizedCorpus& data, double mask_prob,
                             int batch_size, uint64_t eval_seed, int64_t max_rows = 0,
                             const GateSet* gates = nullptr);

// Masked-LM pretraining loop: temperature-sampled monolingual batches,
// BERT-style corruption, warmup + inverse-sqrt Adam with global-norm
// clipping. One trainer owns one model and is fully checkpointable —
// restoring a checkpoint continues bit-identically.
struct TrainConfig {
  int64_t n_epochs = 1;
  int64_t steps_per_epoch = 100;
  int batch_size = 8;
  double mask_prob = 0.15;
  double temperature = 2.0;  // language sampling exponent is 1/T
  LrSchedule lr;
  AdamConfig adam;
  double clip_norm = 5.0;
  uint64_t seed = 1;
  uint64_t eval_seed = 104729;     // masking seed for validation perplexity
  int64_t max_eval_sentences = 0;  // cap per-language eval rows; 0 = whole split
  std::string run_id = "run";
  std::string config_digest;    // stamped into checkpoints when nonempty
  std::string checkpoint_dir;   // empty → per-epoch checkpoints stay off disk

  void validate() const;  // throws ConfigError
};

// Running per-language accounting: mean train loss is loss_sum / batches.
struct LanguageStats {
  int64_t batches = 0;
  double loss_sum = 0.0;
};

// What one optimization step did.
struct StepReport {
  int64_t step = 0;      // global step counter after this step
  std::string language;  // language the batch was drawn from
  double loss = 0.0;     // batch loss (may be non-finite when skipped)
  double lr = 0.0;
  bool applied = true;   // false → non-finite loss/grads, update skipped
};

class Trainer {
 public:
  // The tokenizer's serialized text rides along into checkpoints so a
  // saved model can never be evaluated under a mismatched vocabulary.
  Trainer(Model model, TrainConfig cfg, std::string bpe_text = "");

  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }

  int64_t step() const { return step_; }
  int64_t epochs_done() const { return epoch_; }
  int64_t skipped_steps() const { return skipped_; }
  double total_loss_sum() const { return loss_sum_; }
  const std::map<std::string, LanguageStats>& language_stats() const { return lang_stats_; }

  // One sampled batch: mask → forward (dropout on) → clip → Adam. A
  // non-finite loss or gradient skips the update and counts an incident;
  // parameters are left untouched by a skipped step.
  StepReport train_step(const std::vector<const TokenizedCorpus*>& data);

  // steps_per_epoch steps, then per-language validation perplexity, the
  // routing-isolation probe, and (when configured) an epoch checkpoint.
  void train_one_epoch(const std::vector<const TokenizedCorpus*>& data,
                       MetricsWriter* metrics = nullptr);

  // Runs train_one_epoch until n_epochs epochs are done. Resuming from an
  // epoch-k checkpoint therefore trains exactly the remaining epochs.
  void train(const std::vector<const TokenizedCorpus*>& data, MetricsWriter* metrics = nullptr);

  // exp(mean masked cross-entropy) over the validation split, dropout off,
  // masking drawn from the fixed eval seed (identical across epochs).
  // errors: ConfigError on an empty validation split.
  double validation_perplexity(const TokenizedCorpus& data) const;

  Checkpoint to_checkpoint() const;
  void restore(const Checkpoint& ckpt);
  std::string checkpoint_path(int64_t epoch) const;

 private:
  SamplingConfig sampling_config(const std::vector<const TokenizedCorpus*>& data) const;
  static std::pair<IntArray, IntArray> batch_arrays(const TokenizedCorpus& data,
                                                    const std::vector<int64_t>& rows,
                                                    const MaskedBatch& masked);
  // One dropout-free probe batch per epoch: every gradient that lands on a
  // language-owned tensor must belong to the batch's language.
  void assert_routing_isolation(const std::vector<const TokenizedCorpus*>& data) const;

  TrainConfig cfg_;
  Model model_;
  Adam opt_;
  std::string bpe_text_;
  int64_t step_ = 0;
  int64_t epoch_ = 0;
  int64_t skipped_ = 0;
  double loss_sum_ = 0.0;
  Rng data_rng_;
  CounterStream dropout_;
  std::map<std::string, LanguageStats> lang_stats_;
};

}  // namespace xling
