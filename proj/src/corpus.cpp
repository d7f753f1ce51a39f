#include "xling/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "xling/serialize.hpp"

namespace xling {

namespace {

using nlohmann::json;

// Pool words use only 'a'..'l'; private words are "<lang>.<body>" with the
// body drawn from 'm'..'z'. The dot plus disjoint character ranges make
// pool/private and cross-language inventories provably disjoint.
constexpr char kPoolCharLo = 'a';
constexpr int kPoolCharSpan = 12;
constexpr char kPrivCharLo = 'm';
constexpr int kPrivCharSpan = 14;

std::string random_word(Rng& rng, char lo, int span) {
  const int len = 3 + static_cast<int>(rng.next_below(4));
  std::string w(static_cast<size_t>(len), lo);
  for (auto& c : w) c = static_cast<char>(lo + static_cast<int>(rng.next_below(span)));
  return w;
}

void validate_language_id(const std::string& id) {
  if (id.empty()) throw ConfigError("language id must be nonempty");
  for (char c : id) {
    if (c == '|' || c == '.' || c == '\t' || c == ' ' || c == '\n') {
      throw ConfigError("language id '" + id + "' contains a reserved character");
    }
  }
}

std::vector<double> softmax_logits(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> p(logits.size());
  double z = 0;
  for (size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

std::vector<double> to_cdf(const std::vector<double>& p) {
  std::vector<double> cdf(p.size());
  double acc = 0;
  for (size_t i = 0; i < p.size(); ++i) cdf[i] = (acc += p[i]);
  cdf.back() = 1.0;  // guard against rounding
  return cdf;
}

size_t draw(const std::vector<double>& cdf, Rng& rng) {
  const double u = rng.next_double();
  return static_cast<size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
}

}  // namespace

FamilyPool make_family_pool(uint64_t seed, int n_states, int pool_words) {
  if (n_states < 2) throw ConfigError("a language family needs at least 2 grammar states");
  if (pool_words < 1) throw ConfigError("family pool needs at least 1 word");
  FamilyPool pool;
  pool.seed = seed;
  pool.n_states = n_states;

  Rng word_rng(derive_seed(seed, fnv1a("pool-words")));
  std::set<std::string> seen;
  while (static_cast<int>(pool.words.size()) < pool_words) {
    std::string w = random_word(word_rng, kPoolCharLo, kPoolCharSpan);
    if (seen.insert(w).second) pool.words.push_back(std::move(w));
  }

  Rng gram_rng(derive_seed(seed, fnv1a("pool-grammar")));
  pool.init_logits.resize(static_cast<size_t>(n_states));
  for (auto& v : pool.init_logits) v = gram_rng.next_gaussian();
  pool.trans_logits.resize(static_cast<size_t>(n_states) * n_states);
  for (auto& v : pool.trans_logits) v = gram_rng.next_gaussian();
  return pool;
}

void derive_splits(int64_t n, int64_t* train_end, int64_t* val_end) {
  int64_t val = std::max<int64_t>(1, std::llround(0.05 * static_cast<double>(n)));
  int64_t test = std::max<int64_t>(1, std::llround(0.05 * static_cast<double>(n)));
  if (val + test > n) {  // tiny corpus: val gets a sentence first, then test
    val = std::min<int64_t>(1, n);
    test = std::min<int64_t>(1, n - val);
  }
  *train_end = n - val - test;
  *val_end = n - test;
}

std::string Corpus::split_text(int64_t begin, int64_t end) const {
  std::string out;
  for (int64_t i = begin; i < end; ++i) {
    for (const auto& tok : sentences[static_cast<size_t>(i)].tokens) {
      if (!out.empty()) out += ' ';
      out += tok;
    }
  }
  return out;
}

Corpus generate_language(const LanguageSpec& spec, const FamilyPool& pool) {
  validate_language_id(spec.language);
  if (spec.shared_fraction < 0 || spec.shared_fraction > 1) {
    throw ConfigError("shared_fraction must lie in [0,1]");
  }
  if (spec.corpus_size < 1) throw ConfigError("corpus_size must be at least 1");
  if (spec.vocab_words < 1) throw ConfigError("vocab_words must be at least 1");
  if (spec.n_states != pool.n_states) {
    throw ConfigError("language wants " + std::to_string(spec.n_states) +
                      " grammar states but its family pool has " +
                      std::to_string(pool.n_states));
  }
  if (spec.transition_temperature <= 0) {
    throw ConfigError("transition_temperature must be positive");
  }
  if (spec.min_sentence_len < 1 || spec.max_sentence_len < spec.min_sentence_len) {
    throw ConfigError("sentence length bounds must satisfy 1 <= min <= max");
  }

  // Lexicon: shared prefix of the family pool plus private inventory.
  const int V = spec.vocab_words;
  const int n_shared = static_cast<int>(std::llround(spec.shared_fraction * V));
  if (n_shared > static_cast<int>(pool.words.size())) {
    throw ConfigError("family pool exhausted: language '" + spec.language + "' wants " +
                      std::to_string(n_shared) + " shared words but the pool has " +
                      std::to_string(pool.words.size()));
  }
  std::vector<std::string> lexicon(pool.words.begin(), pool.words.begin() + n_shared);
  {
    Rng priv_rng(derive_seed(spec.seed, fnv1a(spec.language), fnv1a("lexicon")));
    std::set<std::string> seen;
    while (static_cast<int>(lexicon.size()) < V) {
      std::string w = spec.language + "." + random_word(priv_rng, kPrivCharLo, kPrivCharSpan);
      if (seen.insert(w).second) lexicon.push_back(std::move(w));
    }
  }

  // Grammar: family logits perturbed by (1-s)-scaled language noise, then
  // temperature softmax. s=1 reproduces the family grammar exactly.
  const int S = pool.n_states;
  const double noise_scale = 1.0 - spec.shared_fraction;
  Rng gram_rng(derive_seed(spec.seed, fnv1a(spec.language), fnv1a("grammar")));
  std::vector<double> init_logits(static_cast<size_t>(S));
  for (int k = 0; k < S; ++k) {
    init_logits[static_cast<size_t>(k)] =
        (pool.init_logits[static_cast<size_t>(k)] + noise_scale * gram_rng.next_gaussian()) /
        spec.transition_temperature;
  }
  const auto init_cdf = to_cdf(softmax_logits(init_logits));
  std::vector<std::vector<double>> trans_cdf(static_cast<size_t>(S));
  for (int k = 0; k < S; ++k) {
    std::vector<double> row(static_cast<size_t>(S));
    for (int j = 0; j < S; ++j) {
      row[static_cast<size_t>(j)] =
          (pool.trans_logits[static_cast<size_t>(k * S + j)] +
           noise_scale * gram_rng.next_gaussian()) /
          spec.transition_temperature;
    }
    trans_cdf[static_cast<size_t>(k)] = to_cdf(softmax_logits(row));
  }

  // Emissions: per-state word ranking keyed by the family seed, so shared
  // words rank identically across languages; Zipf weights over ranks with
  // a uniform floor.
  std::vector<std::vector<size_t>> emit_order(static_cast<size_t>(S));
  std::vector<std::vector<double>> emit_cdf(static_cast<size_t>(S));
  for (int k = 0; k < S; ++k) {
    std::vector<std::pair<uint64_t, size_t>> scored;
    scored.reserve(static_cast<size_t>(V));
    for (size_t w = 0; w < lexicon.size(); ++w) {
      const uint64_t h =
          splitmix64(pool.seed ^ splitmix64(static_cast<uint64_t>(k) * 0x9e3779b97f4a7c15ULL ^
                                            fnv1a(lexicon[w])));
      scored.emplace_back(h, w);
    }
    std::sort(scored.begin(), scored.end(),
              [&](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first < b.first;
                return lexicon[a.second] < lexicon[b.second];
              });
    std::vector<double> p(static_cast<size_t>(V));
    double z = 0;
    for (int r = 0; r < V; ++r) z += std::pow(r + 1.0, -1.05);
    for (int r = 0; r < V; ++r) {
      p[static_cast<size_t>(r)] = 0.9 * std::pow(r + 1.0, -1.05) / z + 0.1 / V;
    }
    emit_cdf[static_cast<size_t>(k)] = to_cdf(p);
    emit_order[static_cast<size_t>(k)].resize(static_cast<size_t>(V));
    for (int r = 0; r < V; ++r) emit_order[static_cast<size_t>(k)][static_cast<size_t>(r)] = scored[static_cast<size_t>(r)].second;
  }

  Corpus corpus;
  corpus.language = spec.language;
  corpus.n_tags = S;
  corpus.has_tags = true;
  corpus.sentences.reserve(static_cast<size_t>(spec.corpus_size));
  const uint64_t lang_tag = fnv1a(spec.language) ^ fnv1a("sentence");
  for (int64_t i = 0; i < spec.corpus_size; ++i) {
    Rng rng(derive_seed(spec.seed, lang_tag, static_cast<uint64_t>(i)));
    const int len = spec.min_sentence_len +
                    static_cast<int>(rng.next_below(
                        static_cast<uint64_t>(spec.max_sentence_len - spec.min_sentence_len + 1)));
    Sentence s;
    s.tokens.reserve(static_cast<size_t>(len));
    s.tags.reserve(static_cast<size_t>(len));
    size_t state = draw(init_cdf, rng);
    for (int t = 0; t < len; ++t) {
      const size_t rank = draw(emit_cdf[state], rng);
      s.tokens.push_back(lexicon[emit_order[state][rank]]);
      s.tags.push_back(static_cast<int>(state));
      state = draw(trans_cdf[state], rng);
    }
    corpus.sentences.push_back(std::move(s));
  }
  derive_splits(corpus.size(), &corpus.train_end, &corpus.val_end);
  return corpus;
}

Corpus subsample(const Corpus& corpus, int64_t n, uint64_t seed) {
  if (n < 1 || n > corpus.size()) {
    throw ConfigError("subsample size " + std::to_string(n) + " outside [1, " +
                      std::to_string(corpus.size()) + "]");
  }
  std::vector<int64_t> idx(static_cast<size_t>(corpus.size()));
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
  Rng rng(derive_seed(seed, fnv1a("subsample")));
  // Partial Fisher-Yates: the first n entries are a uniform sample without
  // replacement, and for a fixed seed a smaller n is a prefix of a larger.
  for (int64_t i = 0; i < n; ++i) {
    const int64_t j = i + static_cast<int64_t>(rng.next_below(
                              static_cast<uint64_t>(corpus.size() - i)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  Corpus out;
  out.language = corpus.language;
  out.n_tags = corpus.n_tags;
  out.has_tags = corpus.has_tags;
  out.sentences.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    out.sentences.push_back(corpus.sentences[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
  }
  derive_splits(n, &out.train_end, &out.val_end);
  return out;
}

std::vector<double> language_probabilities(const SamplingConfig& cfg) {
  if (cfg.temperature <= 0) throw ConfigError("sampling temperature must be positive");
  if (cfg.sizes.empty()) throw ConfigError("sampling needs at least one language size");
  double total = 0;
  for (double L : cfg.sizes) {
    if (L <= 0) throw ConfigError("language sizes must be positive");
    total += L;
  }
  std::vector<double> p(cfg.sizes.size());
  double z = 0;
  for (size_t i = 0; i < p.size(); ++i) z += (p[i] = std::pow(cfg.sizes[i] / total, 1.0 / cfg.temperature));
  for (auto& v : p) v /= z;
  return p;
}

namespace {

// Shared core of both sample_batch overloads: a temperature-adjusted
// categorical over languages, then uniform-with-replacement train rows.
LangBatch sample_batch_core(const std::vector<std::string>& languages,
                            const std::vector<int64_t>& n_train, const SamplingConfig& cfg,
                            int batch_size, Rng& rng) {
  if (languages.size() != cfg.sizes.size()) {
    throw ConfigError("sampling config lists " + std::to_string(cfg.sizes.size()) +
                      " languages but " + std::to_string(languages.size()) + " corpora given");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  const auto probs = language_probabilities(cfg);
  const auto cdf = to_cdf(probs);
  const size_t k = draw(cdf, rng);
  if (n_train[k] == 0) {
    throw ConfigError("language '" + languages[k] + "' has an empty train split");
  }
  LangBatch batch;
  batch.lang_index = static_cast<int>(k);
  batch.language = languages[k];
  batch.sentence_indices.reserve(static_cast<size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    batch.sentence_indices.push_back(
        static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(n_train[k]))));
  }
  return batch;
}

}  // namespace

int sample_language(const SamplingConfig& cfg, Rng& rng) {
  const auto probs = language_probabilities(cfg);
  return static_cast<int>(draw(to_cdf(probs), rng));
}

LangBatch sample_batch(const std::vector<const Corpus*>& corpora, const SamplingConfig& cfg,
                       int batch_size, Rng& rng) {
  std::vector<std::string> languages;
  std::vector<int64_t> n_train;
  for (const Corpus* c : corpora) {
    languages.push_back(c->language);
    n_train.push_back(c->n_train());
  }
  return sample_batch_core(languages, n_train, cfg, batch_size, rng);
}

LangBatch sample_batch(const std::vector<const TokenizedCorpus*>& corpora,
                       const SamplingConfig& cfg, int batch_size, Rng& rng) {
  std::vector<std::string> languages;
  std::vector<int64_t> n_train;
  for (const TokenizedCorpus* c : corpora) {
    languages.push_back(c->language);
    n_train.push_back(c->train_end);
  }
  return sample_batch_core(languages, n_train, cfg, batch_size, rng);
}

MaskedBatch mask_for_mlm(const std::vector<int>& ids, double mask_prob, int vocab_size,
                         Rng& rng) {
  if (mask_prob <= 0 || mask_prob >= 1) throw ConfigError("mask_prob must lie in (0,1)");
  if (vocab_size <= BpeModel::kNumSpecials) {
    throw ConfigError("vocabulary has no maskable tokens");
  }
  MaskedBatch out;
  out.inputs = ids;
  out.targets.assign(ids.size(), -1);
  const int n_content = vocab_size - BpeModel::kNumSpecials;
  for (size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < BpeModel::kNumSpecials) continue;  // specials are never masked
    if (rng.next_double() >= mask_prob) continue;
    out.targets[i] = id;
    out.n_masked += 1;
    const double u = rng.next_double();
    if (u < 0.8) {
      out.inputs[i] = BpeModel::kMask;
    } else if (u < 0.9) {
      out.inputs[i] =
          BpeModel::kNumSpecials + static_cast<int>(rng.next_below(static_cast<uint64_t>(n_content)));
    }  // else: keep the original token
  }
  return out;
}

TokenizedCorpus tokenize_corpus(const Corpus& corpus, const BpeModel& bpe, int64_t max_seq_len) {
  if (max_seq_len < 3) throw ConfigError("max_seq_len must be at least 3 (BOS, token, EOS)");
  TokenizedCorpus tc;
  tc.language = corpus.language;
  tc.seq_len = max_seq_len;
  tc.train_end = corpus.train_end;
  tc.val_end = corpus.val_end;
  tc.n_tags = corpus.n_tags;
  tc.has_tags = corpus.has_tags;
  tc.ids.reserve(static_cast<size_t>(corpus.size() * max_seq_len));
  tc.tag_targets.reserve(static_cast<size_t>(corpus.size() * max_seq_len));
  for (const auto& s : corpus.sentences) {
    std::vector<int> row = {BpeModel::kBos};
    std::vector<int> tags = {-1};
    for (size_t w = 0; w < s.tokens.size(); ++w) {
      const auto sub = bpe.encode_word(s.tokens[w]);
      // Keep whole words; leave room for EOS.
      if (static_cast<int64_t>(row.size() + sub.size()) + 1 > max_seq_len) break;
      for (size_t j = 0; j < sub.size(); ++j) {
        row.push_back(sub[j]);
        tags.push_back(j == 0 && corpus.has_tags ? s.tags[w] : -1);
      }
    }
    row.push_back(BpeModel::kEos);
    tags.push_back(-1);
    while (static_cast<int64_t>(row.size()) < max_seq_len) {
      row.push_back(BpeModel::kPad);
      tags.push_back(-1);
    }
    tc.ids.insert(tc.ids.end(), row.begin(), row.end());
    tc.tag_targets.insert(tc.tag_targets.end(), tags.begin(), tags.end());
  }
  return tc;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& s : corpus.sentences) {
    for (size_t i = 0; i < s.tokens.size(); ++i) {
      if (i) f << '\t';
      f << s.tokens[i];
      if (corpus.has_tags) f << '|' << s.tags[i];
    }
    f << '\n';
  }
  if (!f) throw IoError("failed writing corpus '" + path + "'");
}

Corpus load_corpus(const std::string& path, const std::string& language) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  Corpus corpus;
  corpus.language = language;
  bool tags_decided = false;
  int max_tag = -1;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    Sentence s;
    std::istringstream ls(line);
    std::string field;
    // Fields split on any whitespace: our writer uses tabs, external
    // plain text typically uses spaces.
    while (ls >> field) {
      const size_t bar = field.rfind('|');
      if (!tags_decided) {
        corpus.has_tags = bar != std::string::npos;
        tags_decided = true;
      }
      if (corpus.has_tags) {
        if (bar == std::string::npos || bar + 1 >= field.size()) {
          throw IoError("corpus line mixes tagged and untagged tokens: '" + line + "'");
        }
        s.tokens.push_back(field.substr(0, bar));
        int tag = 0;
        try {
          tag = std::stoi(field.substr(bar + 1));
        } catch (const std::exception&) {
          throw IoError("corpus token has a malformed tag: '" + field + "'");
        }
        s.tags.push_back(tag);
        max_tag = std::max(max_tag, tag);
      } else {
        s.tokens.push_back(field);
        s.tags.push_back(-1);
      }
    }
    if (!s.tokens.empty()) corpus.sentences.push_back(std::move(s));
  }
  if (corpus.sentences.empty()) throw IoError("corpus '" + path + "' contains no sentences");
  corpus.n_tags = corpus.has_tags ? max_tag + 1 : 0;
  derive_splits(corpus.size(), &corpus.train_end, &corpus.val_end);
  return corpus;
}

void save_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  json arr = json::array();
  for (const auto& e : entries) {
    arr.push_back({{"language", e.language},
                   {"path", e.path},
                   {"seed", e.seed},
                   {"size", e.size},
                   {"train_end", e.train_end},
                   {"val_end", e.val_end},
                   {"n_tags", e.n_tags}});
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << arr.dump(2) << '\n';
}

std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  json arr;
  try {
    f >> arr;
  } catch (const json::exception& e) {
    throw IoError("manifest '" + path + "' is not valid JSON: " + e.what());
  }
  std::vector<ManifestEntry> entries;
  for (const auto& item : arr) {
    ManifestEntry e;
    e.language = item.at("language").get<std::string>();
    e.path = item.at("path").get<std::string>();
    e.seed = item.at("seed").get<uint64_t>();
    e.size = item.at("size").get<int64_t>();
    e.train_end = item.at("train_end").get<int64_t>();
    e.val_end = item.at("val_end").get<int64_t>();
    e.n_tags = item.at("n_tags").get<int>();
    entries.push_back(std::move(e));
  }
  return entries;
}

void save_corpora(const std::vector<Corpus>& corpora,
                  const std::vector<uint64_t>& seeds, const std::string& dir) {
  if (!seeds.empty() && seeds.size() != corpora.size()) {
    throw ConfigError("seed list length must match corpus count (or be empty)");
  }
  std::filesystem::create_directories(dir);
  std::vector<ManifestEntry> entries;
  for (size_t i = 0; i < corpora.size(); ++i) {
    const Corpus& c = corpora[i];
    ManifestEntry e;
    e.language = c.language;
    e.path = c.language + ".tsv";
    e.seed = seeds.empty() ? 0 : seeds[i];
    e.size = c.size();
    e.train_end = c.train_end;
    e.val_end = c.val_end;
    e.n_tags = c.n_tags;
    save_corpus(c, dir + "/" + e.path);
    entries.push_back(std::move(e));
  }
  save_manifest(entries, dir + "/manifest.json");
}

std::vector<Corpus> load_corpora(const std::string& dir) {
  const auto entries = load_manifest(dir + "/manifest.json");
  std::vector<Corpus> corpora;
  for (const auto& e : entries) {
    Corpus c = load_corpus(dir + "/" + e.path, e.language);
    if (c.size() != e.size) {
      throw IoError("corpus '" + e.path + "' has " + std::to_string(c.size()) +
                    " sentences but the manifest lists " + std::to_string(e.size));
    }
    c.train_end = e.train_end;
    c.val_end = e.val_end;
    if (c.has_tags) c.n_tags = e.n_tags;
    corpora.push_back(std::move(c));
  }
  return corpora;
}

}  // namespace xling
