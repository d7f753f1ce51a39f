#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xling/bpe.hpp"
#include "xling/common.hpp"
#include "xling/rng.hpp"

namespace xling {

// ---------------------------------------------------------------------------
// Synthetic languages. Each language is a probabilistic regular grammar
// over a word lexicon: hidden states emit words (Zipf-weighted, per-state
// ranking) and chain via softmax transitions. Languages of one family draw
// a fraction `shared_fraction` of their word types from a common pool —
// the single scalar similarity knob — and the rest from a private,
// provably disjoint inventory. Hidden states double as per-token tags for
// the downstream tagging task.
// ---------------------------------------------------------------------------

struct LanguageSpec {
  std::string language;  // id; nonempty, no whitespace, '|', or '.'
  uint64_t seed = 1;
  int vocab_words = 50;          // word types
  double shared_fraction = 0.5;  // s in [0,1]: fraction drawn from the family pool
  int n_states = 6;              // grammar states (= tag inventory)
  double transition_temperature = 1.0;
  int64_t corpus_size = 1000;  // sentences
  int min_sentence_len = 3;    // words
  int max_sentence_len = 10;
};

// Family-shared lexicon pool and grammar skeleton. Languages with
// shared_fraction=1 and equal grammar parameters realize identical
// distributions; shared_fraction=0 pairs share zero word types.
struct FamilyPool {
  uint64_t seed = 0;
  int n_states = 0;
  std::vector<std::string> words;       // pool lexicon; prefixes are what langs share
  std::vector<double> init_logits;      // n_states
  std::vector<double> trans_logits;     // n_states * n_states, row-major
};

FamilyPool make_family_pool(uint64_t seed, int n_states, int pool_words);

struct Sentence {
  std::vector<std::string> tokens;
  std::vector<int> tags;  // aligned 1:1 with tokens; -1 when absent
};

struct Corpus {
  std::string language;
  std::vector<Sentence> sentences;
  // Contiguous splits: [0, train_end) train, [train_end, val_end) val,
  // [val_end, size) test.
  int64_t train_end = 0;
  int64_t val_end = 0;
  int n_tags = 0;       // tag inventory size; 0 when tags are absent
  bool has_tags = false;

  int64_t size() const { return static_cast<int64_t>(sentences.size()); }
  int64_t n_train() const { return train_end; }
  int64_t n_val() const { return val_end - train_end; }
  int64_t n_test() const { return size() - val_end; }

  // All tokens of the given split joined by spaces (tokenizer training food).
  std::string split_text(int64_t begin, int64_t end) const;
  std::string train_text() const { return split_text(0, train_end); }
};

// Deterministic per (spec, pool): sentence i depends only on (seed, i), so
// a smaller corpus_size yields a prefix of the larger stream.
// errors: pool too small for shared draws, bad spec fields → ConfigError.
Corpus generate_language(const LanguageSpec& spec, const FamilyPool& pool);

// Uniform sample of n sentences without replacement, deterministic per
// seed. The result follows the seeded permutation's order, so for a fixed
// seed a smaller n is a prefix of a larger one, and n == size() is a
// permutation of the corpus. Splits are re-derived proportionally with the
// val-then-test minimum-one fallback.
// errors: n < 1 or n > size → ConfigError.
Corpus subsample(const Corpus& corpus, int64_t n, uint64_t seed);

// Split sizing shared by generation and subsampling: 5% val and 5% test
// (rounded), each at least 1 sentence (val first when n is tiny).
void derive_splits(int64_t n, int64_t* train_end, int64_t* val_end);

// ---------------------------------------------------------------------------
// Language sampling and MLM masking.
// ---------------------------------------------------------------------------

struct SamplingConfig {
  double temperature = 2.0;       // T > 0; exponent is 1/T
  std::vector<double> sizes;      // per-language L_i > 0
};

// P_i ∝ (L_i / Σ_j L_j)^(1/T), renormalized to sum 1 (within 1e-12).
// Invariant under rescaling all sizes by a positive constant.
std::vector<double> language_probabilities(const SamplingConfig& cfg);

// One categorical draw from language_probabilities (no row sampling).
int sample_language(const SamplingConfig& cfg, Rng& rng);

struct LangBatch {
  int lang_index = -1;
  std::string language;
  std::vector<int64_t> sentence_indices;  // into the chosen corpus's train split
};

// Draws one monolingual batch: language by the temperature-adjusted
// categorical, then batch_size train sentences uniformly with replacement.
// errors: sampled language has an empty train split → ConfigError.
LangBatch sample_batch(const std::vector<const Corpus*>& corpora, const SamplingConfig& cfg,
                       int batch_size, Rng& rng);

struct MaskedBatch {
  std::vector<int> inputs;    // same shape as the source ids
  std::vector<int> targets;   // original id at selected positions, -1 elsewhere
  int64_t n_masked = 0;
};

// BERT-style MLM corruption: each non-special position is selected with
// probability mask_prob; a selected position becomes MASK with p=0.8, a
// uniformly random non-special token with p=0.1, and stays unchanged with
// p=0.1. Targets exist only at selected positions. Sequences of only
// special tokens yield zero masked positions (valid; loss contribution 0).
// pre: 0 < mask_prob < 1; vocab_size > number of specials.
MaskedBatch mask_for_mlm(const std::vector<int>& ids, double mask_prob, int vocab_size,
                         Rng& rng);

// ---------------------------------------------------------------------------
// Subword view of a corpus for model consumption.
// ---------------------------------------------------------------------------

struct TokenizedCorpus {
  std::string language;
  int64_t seq_len = 0;   // fixed row width T
  int64_t train_end = 0;
  int64_t val_end = 0;
  int n_tags = 0;
  bool has_tags = false;
  std::vector<int> ids;          // n x T: BOS, subwords..., EOS, PAD...
  std::vector<int> tag_targets;  // n x T: tag at each word's first subword, -1 elsewhere

  int64_t n() const { return seq_len == 0 ? 0 : static_cast<int64_t>(ids.size()) / seq_len; }
  const int* row(int64_t i) const { return ids.data() + i * seq_len; }
};

// Encodes every sentence to BOS + subwords + EOS, padded (or truncated,
// keeping the leading subwords) to max_seq_len. Tag targets sit on each
// word's first subword; all other positions are -1.
TokenizedCorpus tokenize_corpus(const Corpus& corpus, const BpeModel& bpe, int64_t max_seq_len);

// Same two-stage draw as above over tokenized corpora; the train split is
// rows [0, train_end). RNG consumption matches the raw-corpus overload.
LangBatch sample_batch(const std::vector<const TokenizedCorpus*>& corpora,
                       const SamplingConfig& cfg, int batch_size, Rng& rng);

// ---------------------------------------------------------------------------
// Disk format: one sentence per line of tab-separated "token|tag" pairs
// (plain tokens when tags are absent), plus a manifest describing
// languages, sizes, seeds, and split offsets.
// ---------------------------------------------------------------------------

void save_corpus(const Corpus& corpus, const std::string& path);

// Reads either token|tag lines or plain token lines. Tags absent → tags
// are -1 and has_tags=false (downstream tagging eval disabled).
// split offsets are re-derived unless a manifest supplies them.
Corpus load_corpus(const std::string& path, const std::string& language);

struct ManifestEntry {
  std::string language;
  std::string path;  // corpus file, relative to the manifest
  uint64_t seed = 0;
  int64_t size = 0;
  int64_t train_end = 0;
  int64_t val_end = 0;
  int n_tags = 0;
};

void save_manifest(const std::vector<ManifestEntry>& entries, const std::string& path);
std::vector<ManifestEntry> load_manifest(const std::string& path);

// Convenience: write corpus files plus manifest into a directory; load them back.
void save_corpora(const std::vector<Corpus>& corpora,
                  const std::vector<uint64_t>& seeds, const std::string& dir);
std::vector<Corpus> load_corpora(const std::string& dir);

}  // namespace xling
