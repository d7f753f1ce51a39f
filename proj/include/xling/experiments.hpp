#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xling/config.hpp"

namespace xling {

// ---------------------------------------------------------------------------
// Deterministic experiment pipeline over an output directory:
//
//   gen-corpus → learn-bpe → pretrain → meta-pretrain → probe → prune
//             → eval → report
//
// Every stage reads its inputs from disk and writes its artifacts back, so
// any suffix of the pipeline can be re-run or resumed later. One run owns
// its output directory exclusively (lockfile); parallel runs need distinct
// directories.
//
// Layout under the output directory:
//   .lock                    held while a process owns the directory
//   config.json              canonical config (written once, verified later)
//   state.json               digest + completed stages (resume bookkeeping)
//   corpus/                  language corpora + manifest
//   bpe.txt                  tokenizer model
//   checkpoints/<run>/       epoch-NNNN.ckpt during training, final.ckpt
//   metrics.csv              append-only metrics stream (all stages)
//   masks/                   learned mask tables + ranked-group tables
//   eval/interference.csv    within/zero-shot F1 grid with baseline flags
//   report/*.csv             one table per analysis
// ---------------------------------------------------------------------------

enum class Stage : int {
  gen_corpus = 0,
  learn_bpe,
  pretrain,
  meta_pretrain,
  probe,
  prune,
  eval,
  report,
};

constexpr int kNumStages = 8;

const char* to_string(Stage s);
Stage stage_from_string(const std::string& name);  // ConfigError on unknown
// "gen-corpus,pretrain" → stages in pipeline order; "" → every stage.
std::vector<Stage> parse_stages(const std::string& csv);

struct RunOptions {
  std::vector<Stage> stages;  // empty → the full pipeline
  bool resume = false;
  // Crash-injection hook for resume tests: throws after this many epochs of
  // the named run's pretraining, leaving the directory mid-run but
  // resumable. 0 disables.
  std::string interrupt_run;
  int64_t interrupt_after_epochs = 0;
};

struct ExperimentResult {
  std::string out_dir;
  std::string digest;
  std::vector<std::string> stages_run;      // executed this invocation
  std::vector<std::string> stages_skipped;  // already complete or disabled
};

// Environment overrides (checked by the CLI before calling run_experiment):
//   XLING_OUT      replaces the config's output directory
//   XLING_THREADS  caps the OpenMP thread count
ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts);

// The named experiment templates shipped under configs/ (name → filename).
std::vector<std::pair<std::string, std::string>> canned_experiments();

}  // namespace xling
