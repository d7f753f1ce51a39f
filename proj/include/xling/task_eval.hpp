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
// Downstream evaluation on the per-token tagging task, in two settings:
// within-language (finetune and test on the same language) and zero-shot
// cross-lingual (finetune on a source language, test untouched on a
// target). Scores are micro-averaged F1 over word-level predictions, one
// prediction per word taken at its first subword.
// ---------------------------------------------------------------------------

// Hyperparameter selection always runs on the finetuning (source)
// language's dev split: within-language that is the target's dev set, and
// zero-shot it keeps the target language unseen until test time.
enum class DevPolicy { source_dev };

struct FinetuneConfig {
  int epochs = 5;
  int batch_size = 8;
  std::vector<double> lr_grid{3e-4, 1e-3};
  // When false, language-specific (phi) tensors stay frozen and only the
  // shared trunk and the head are tuned. Tuning everything is the default,
  // which consistently evaluates better.
  bool tune_language_specific = true;
  DevPolicy dev_policy = DevPolicy::source_dev;
  AdamConfig adam;
  double clip_norm = 5.0;
  uint64_t seed = 1;

  void validate() const;  // throws ConfigError
};

// Linear projection d_model -> n_tags on top of the final hidden states.
struct TaggerHead {
  Tensor w;  // (d_model, n_tags)
  Tensor b;  // (n_tags,)

  int n_tags() const { return w.defined() ? static_cast<int>(w.dim(1)) : 0; }
};

TaggerHead init_tagger_head(int d_model, int n_tags, uint64_t seed);

enum class EvalSetting { within_language, zero_shot };

const char* to_string(EvalSetting setting);

struct EvalReport {
  EvalSetting setting = EvalSetting::within_language;
  std::string source;      // finetuning language
  std::string target;      // test language; within_language => source == target
  double f1 = 0.0;         // micro-averaged, in [0, 1]
  uint64_t seed = 0;
  std::string checkpoint_id;  // pretrained-weights fingerprint
};

// Hex digest over every named parameter tensor (names and bytes). Two
// models carry the same fingerprint iff their weights are bit-identical.
std::string model_fingerprint(const Model& model);

struct FinetuneResult {
  Model model;
  TaggerHead head;
  double chosen_lr = 0.0;
  double dev_f1 = 0.0;               // selection score of the winner
  std::vector<double> grid_dev_f1;   // dev score per lr_grid entry
  std::string checkpoint_id;         // fingerprint of the *pretrained* input
};

// Clones the pretrained model once per grid entry, trains the copy plus a
// fresh head on the source train split, and keeps the configuration with
// the best dev-split F1 (ties break toward the earlier grid entry).
// Deterministic per cfg.seed. errors: ConfigError on untagged or empty
// source splits.
FinetuneResult finetune(const Model& pretrained, const TokenizedCorpus& source,
                        const FinetuneConfig& cfg);

// Micro-averaged F1 from aligned prediction/gold label vectors (no
// negatives allowed). With exactly one prediction and one gold label per
// word this coincides with accuracy; it is computed from the confusion
// counts sum TP / (sum TP + sum FP) anyway so the arithmetic is explicit.
double micro_f1(const std::vector<int>& predictions, const std::vector<int>& gold);

enum class Split { train, val, test };

// Tagging F1 of (model, head) on one split, routing the forward pass
// through route_language's parameters. errors: ConfigError on an empty or
// untagged split, or when head width differs from the corpus tag count.
double tagging_f1(const Model& model, const TaggerHead& head, const TokenizedCorpus& data,
                  Split split, const std::string& route_language);

// Scores the test split of `target`. Routing uses the target's own
// language-specific parameters when the model has them; a monolingual
// model evaluated cross-lingually falls back to its source routing.
// errors: ConfigError on an empty test split or tag-set mismatch.
EvalReport evaluate_f1(const Model& model, const TaggerHead& head, const std::string& source_language,
                       const TokenizedCorpus& target, uint64_t seed,
                       const std::string& checkpoint_id);

// ------------------------- interference comparison -------------------------

struct InterferenceRow {
  std::string model_id;
  EvalSetting setting = EvalSetting::within_language;
  std::string source;
  std::string target;
  double f1 = 0.0;
  double val_perplexity = 0.0;  // pretraining val perplexity of the model on `target`
  bool interference = false;    // joint within-language row where the mono baseline wins
};

struct InterferenceTable {
  std::vector<InterferenceRow> rows;
};

struct InterferenceInputs {
  // language -> its monolingual baseline (trained on that language alone).
  std::map<std::string, const Model*> monos;
  // model id -> multilingual model covering every language.
  std::map<std::string, const Model*> joints;
};

// Finetunes and scores every (model, source, target) combination: within-
// language rows for each model and language, zero-shot rows for each
// ordered language pair. Flags negative interference on joint within-
// language rows whose mono baseline scores strictly higher. errors:
// ConfigError when a language lacks its mono checkpoint or a joint model
// misses a language.
InterferenceTable interference_suite(const InterferenceInputs& inputs,
                                     const std::vector<const TokenizedCorpus*>& corpora,
                                     const FinetuneConfig& cfg, double mask_prob,
                                     uint64_t eval_seed);

// Stable CSV rendering: header
// model,setting,source,target,f1,val_perplexity,interference and one row
// per table entry in order.
std::string interference_csv(const InterferenceTable& table);

}  // namespace xling
