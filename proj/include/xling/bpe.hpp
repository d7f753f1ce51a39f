#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "xling/common.hpp"

namespace xling {

// Byte-pair-encoding subword tokenizer with one vocabulary shared across
// all languages of a model. Ids are dense in [0, vocab_size()); the five
// special tokens occupy fixed positions 0-4. A word-boundary marker "</w>"
// is appended to each word-final symbol, so decoding recovers spacing.
//
// Immutable after learning; encode/decode are const and thread-safe.
class BpeModel {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kMask = 2;
  static constexpr int kBos = 3;
  static constexpr int kEos = 4;
  static constexpr int kNumSpecials = 5;

  int vocab_size() const { return static_cast<int>(id_to_token_.size()); }
  const std::string& token(int id) const;
  // -1 when the token string is not in the vocabulary.
  int id_of(const std::string& tok) const;
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  // True when learning exhausted the distinct pairs before reaching the
  // requested vocabulary size.
  bool vocab_truncated() const { return vocab_truncated_; }

  // Whitespace-splits `text` and encodes word by word, applying merges in
  // learned order. Characters outside the learned inventory map to UNK.
  // "" encodes to [].
  std::vector<int> encode(const std::string& text) const;
  std::vector<int> encode_word(const std::string& word) const;

  // Inverse of encode up to whitespace normalization: PAD ids are
  // stripped; UNK renders as the sentinel "<unk>"; other specials render
  // as their angle-bracket names.
  std::string decode(const std::vector<int>& ids) const;

  // Text persistence: line 1 is a vocab header (magic, sizes, flags, base
  // symbol inventory), then one merge per line.
  std::string serialize_text() const;
  static BpeModel deserialize_text(const std::string& text);
  void save(const std::string& path) const;
  static BpeModel load(const std::string& path);

  // Digest of the serialized text; equal fingerprints mean two models
  // segment identically.
  uint64_t fingerprint() const;

 private:
  friend BpeModel learn_bpe(const std::vector<std::string>&, int);

  void rebuild_tables(const std::vector<std::string>& base_symbols);

  std::vector<std::string> id_to_token_;
  std::map<std::string, int> token_to_id_;
  std::vector<std::string> base_symbols_;  // sorted single-char (+marker) inventory
  std::vector<std::pair<std::string, std::string>> merges_;
  bool vocab_truncated_ = false;
};

// Learns merges over the concatenation of the given corpora (one string of
// whitespace-separated words per corpus; callers decide how much of each
// language to contribute). Deterministic for a fixed input order; merge
// frequency ties break to the lexicographically smallest pair.
// pre: corpora nonempty with at least one word; vocab_size > specials +
//      character inventory.
BpeModel learn_bpe(const std::vector<std::string>& corpora, int vocab_size);

}  // namespace xling
