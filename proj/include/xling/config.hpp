#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "xling/corpus.hpp"
#include "xling/model.hpp"

namespace xling {

// ---------------------------------------------------------------------------
// Declarative experiment description, loaded from a JSON file. One config
// fully captures a run: two executions from the same config and seed are
// bit-identical. Unknown keys anywhere in the file are rejected, and
// validation reports every problem at once rather than stopping at the
// first. The full schema is documented in the README.
// ---------------------------------------------------------------------------

// Shared lexicon pool + grammar skeleton for the language family.
struct FamilyConfig {
  uint64_t seed = 7;
  int n_states = 4;
  int pool_words = 40;
};

// One pretraining run: a model trained on a subset of the languages.
// Single-language runs act as monolingual baselines in the eval stage;
// multi-language runs are the multilingual systems under study.
struct RunSpec {
  std::string id;  // filename- and CSV-safe: [A-Za-z0-9._-]
  std::vector<std::string> languages;
  CapacityMode mode = CapacityMode::shared_only;
  std::string trainer = "joint";  // "joint" | "meta"
};

// Hyperparameters shared by every pretraining run of the experiment.
// Checkpoints are written at every epoch boundary, so epochs double as the
// resume granularity.
struct PretrainConfig {
  int64_t epochs = 4;
  int64_t steps_per_epoch = 100;
  int batch_size = 8;
  double peak_lr = 3e-3;
  int64_t warmup = 60;
  double mask_prob = 0.15;
  double temperature = 2.0;  // language-sampling exponent is 1/T
  double clip_norm = 5.0;
  int64_t eval_rows = 0;  // per-language validation cap; 0 = whole split
  // Extras for runs using the meta trainer.
  double alpha_scale = 1.0;
  int val_batch_size = 8;
  double epsilon = 0.0;  // 0 → the adaptive finite-difference step rule
};

// One gradient-probe target: a run plus the language pairs to compare.
struct ProbeTarget {
  std::string run;
  std::vector<std::pair<std::string, std::string>> pairs;
};

struct ProbesStageConfig {
  bool enabled = false;
  int n_probes = 32;  // probe repetitions; each emits one metrics row per series
  int batch_size = 8;
  int micro_batches = 1;
  double mask_prob = 0.15;
  std::vector<ProbeTarget> targets;
};

struct PruneStageConfig {
  bool enabled = false;
  std::string run;                     // checkpoint whose weights get masked
  std::vector<std::string> languages;  // empty → the run's languages
  std::vector<double> lambda_grid{1e-4, 1e-3, 1e-2};
  int64_t steps = 200;
  int batch_size = 8;
  double lr = 0.05;
  double mask_prob = 0.15;
  double init_pi = 1.0;
  int64_t emb_group_size = 8;
  int mask_runs = 2;  // independent repetitions per language (≥2 enables
                      // the within-language similarity series)
  int eval_batch_size = 8;
  int64_t eval_rows = 0;
  double max_ppl_ratio = 1.1;  // masked / unmasked perplexity ceiling
  double min_sparsity = 0.10;  // expected fraction of closed gates, at least
  int top_k = 10;              // ranked-group table size (0 disables)
};

struct EvalStageConfig {
  bool enabled = false;
  int epochs = 5;
  int batch_size = 8;
  std::vector<double> lr_grid{3e-4, 1e-3};
  bool tune_language_specific = true;
  double mask_prob = 0.15;             // for the final perplexity column
  std::vector<std::string> languages;  // empty → every corpus language
};

struct ExperimentConfig {
  std::string name;  // [a-z0-9_-]
  uint64_t seed = 1;
  std::string out_dir;  // may be empty when supplied via --out / env
  FamilyConfig family;
  std::vector<LanguageSpec> languages;
  int bpe_vocab_size = 200;
  TransformerConfig model;  // vocab_size stays 0; the tokenizer fills it in
  std::vector<RunSpec> runs;
  PretrainConfig pretrain;
  ProbesStageConfig probes;
  PruneStageConfig prune;
  EvalStageConfig eval;

  const RunSpec* find_run(const std::string& id) const;
  const LanguageSpec* find_language(const std::string& language) const;
};

// Parses and validates. Throws ConfigError whose message lists every
// problem found (unknown keys, type errors, and semantic violations).
ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);

// Canonical JSON (sorted keys, defaults materialized, out_dir excluded so
// relocating artifacts keeps the experiment's identity). The digest is the
// 16-hex-digit FNV-1a of this text; it is stamped into checkpoints and the
// run-state file.
std::string canonical_config_json(const ExperimentConfig& cfg);
std::string experiment_digest(const ExperimentConfig& cfg);

}  // namespace xling
