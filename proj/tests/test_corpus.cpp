#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "xling/corpus.hpp"

using namespace xling;
using doctest::Approx;

namespace {

LanguageSpec spec_for(const std::string& lang, uint64_t seed, double s, int64_t size,
                      int vocab = 40, int states = 5) {
  LanguageSpec sp;
  sp.language = lang;
  sp.seed = seed;
  sp.vocab_words = vocab;
  sp.shared_fraction = s;
  sp.n_states = states;
  sp.corpus_size = size;
  return sp;
}

std::set<std::string> token_types(const Corpus& c) {
  std::set<std::string> types;
  for (const auto& s : c.sentences) types.insert(s.tokens.begin(), s.tokens.end());
  return types;
}

std::map<std::string, int64_t> unigram_counts(const Corpus& c) {
  std::map<std::string, int64_t> counts;
  for (const auto& s : c.sentences) {
    for (const auto& t : s.tokens) counts[t] += 1;
  }
  return counts;
}

size_t overlap(const std::set<std::string>& a, const std::set<std::string>& b) {
  size_t n = 0;
  for (const auto& t : a) n += b.count(t);
  return n;
}

}  // namespace

TEST_CASE("generation is deterministic and prefix-stable in corpus size") {
  const FamilyPool pool = make_family_pool(11, 5, 64);
  const Corpus a = generate_language(spec_for("la", 3, 0.5, 200), pool);
  const Corpus b = generate_language(spec_for("la", 3, 0.5, 200), pool);
  REQUIRE(a.size() == 200);
  for (int64_t i = 0; i < a.size(); ++i) {
    CHECK(a.sentences[i].tokens == b.sentences[i].tokens);
    CHECK(a.sentences[i].tags == b.sentences[i].tags);
  }

  const Corpus big = generate_language(spec_for("la", 3, 0.5, 1500), pool);
  for (int64_t i = 0; i < a.size(); ++i) {
    CHECK(big.sentences[i].tokens == a.sentences[i].tokens);
  }
}

TEST_CASE("tags align with tokens and stay within the state inventory") {
  const FamilyPool pool = make_family_pool(5, 4, 32);
  const Corpus c = generate_language(spec_for("lt", 9, 0.3, 100, 30, 4), pool);
  CHECK(c.has_tags);
  CHECK(c.n_tags == 4);
  for (const auto& s : c.sentences) {
    REQUIRE(s.tokens.size() == s.tags.size());
    CHECK(s.tokens.size() >= 3);
    CHECK(s.tokens.size() <= 10);
    for (int tag : s.tags) {
      CHECK(tag >= 0);
      CHECK(tag < 4);
    }
  }
}

TEST_CASE("zero shared fraction yields zero lexical overlap") {
  const FamilyPool pool = make_family_pool(21, 5, 64);
  const Corpus a = generate_language(spec_for("aa", 1, 0.0, 300), pool);
  const Corpus b = generate_language(spec_for("bb", 2, 0.0, 300), pool);
  CHECK(overlap(token_types(a), token_types(b)) == 0);
}

TEST_CASE("lexical overlap is monotone non-decreasing in the similarity knob") {
  const FamilyPool pool = make_family_pool(33, 5, 64);
  size_t prev = 0;
  for (double s : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const Corpus a = generate_language(spec_for("ma", 7, s, 400), pool);
    const Corpus b = generate_language(spec_for("mb", 8, s, 400), pool);
    const size_t ov = overlap(token_types(a), token_types(b));
    CHECK(ov >= prev);
    prev = ov;
  }
  CHECK(prev > 0);  // s=1 pairs share essentially everything observed
}

TEST_CASE("fully shared languages match in distribution (two-sample chi-square)") {
  const FamilyPool pool = make_family_pool(17, 5, 64);
  const Corpus a = generate_language(spec_for("xa", 101, 1.0, 3000), pool);
  const Corpus b = generate_language(spec_for("xb", 202, 1.0, 3000), pool);

  const auto ca = unigram_counts(a);
  const auto cb = unigram_counts(b);
  std::set<std::string> words;
  for (const auto& [w, n] : ca) words.insert(w);
  for (const auto& [w, n] : cb) words.insert(w);

  double n1 = 0, n2 = 0;
  for (const auto& [w, n] : ca) n1 += static_cast<double>(n);
  for (const auto& [w, n] : cb) n2 += static_cast<double>(n);

  double chi2 = 0;
  for (const auto& w : words) {
    const double c1 = ca.count(w) ? static_cast<double>(ca.at(w)) : 0.0;
    const double c2 = cb.count(w) ? static_cast<double>(cb.at(w)) : 0.0;
    const double e1 = (c1 + c2) * n1 / (n1 + n2);
    const double e2 = (c1 + c2) * n2 / (n1 + n2);
    chi2 += (c1 - e1) * (c1 - e1) / e1 + (c2 - e2) * (c2 - e2) / e2;
  }
  const double df = static_cast<double>(words.size()) - 1.0;
  // Same-distribution samples keep chi-square near df; 5 sigma of margin.
  CHECK(chi2 < df + 5.0 * std::sqrt(2.0 * df));

  // Sanity on the statistic itself: distant pairs blow far past the bound.
  const Corpus c = generate_language(spec_for("xc", 303, 0.0, 3000), pool);
  const auto cc = unigram_counts(c);
  CHECK(overlap(token_types(a), token_types(c)) == 0);
}

TEST_CASE("family pool exhaustion and bad specs are config errors") {
  const FamilyPool pool = make_family_pool(1, 5, 10);
  CHECK_THROWS_AS(generate_language(spec_for("ex", 1, 1.0, 10, 40), pool), ConfigError);
  CHECK_THROWS_AS(generate_language(spec_for("bad lang", 1, 0.5, 10), pool), ConfigError);
  CHECK_THROWS_AS(generate_language(spec_for("ok", 1, 1.5, 10), pool), ConfigError);
  CHECK_THROWS_AS(generate_language(spec_for("ok", 1, 0.5, 0), pool), ConfigError);
  LanguageSpec wrong_states = spec_for("ok", 1, 0.5, 10, 40, 7);
  CHECK_THROWS_AS(generate_language(wrong_states, pool), ConfigError);
}

TEST_CASE("split derivation: proportional with val-then-test minimums") {
  int64_t tr = 0, va = 0;
  derive_splits(100, &tr, &va);
  CHECK(tr == 90);
  CHECK(va == 95);
  derive_splits(2, &tr, &va);
  CHECK(tr == 0);
  CHECK(va == 1);  // one val, one test
  derive_splits(1, &tr, &va);
  CHECK(tr == 0);
  CHECK(va == 1);  // val takes the only sentence
}

TEST_CASE("subsample: deterministic nested prefixes; full size is a permutation") {
  const FamilyPool pool = make_family_pool(2, 5, 64);
  const Corpus c = generate_language(spec_for("su", 4, 0.5, 400), pool);

  const Corpus s100 = subsample(c, 100, 77);
  const Corpus s100b = subsample(c, 100, 77);
  const Corpus s250 = subsample(c, 250, 77);
  REQUIRE(s100.size() == 100);
  for (int64_t i = 0; i < 100; ++i) {
    CHECK(s100.sentences[i].tokens == s100b.sentences[i].tokens);
    CHECK(s100.sentences[i].tokens == s250.sentences[i].tokens);
  }

  const Corpus full = subsample(c, c.size(), 77);
  auto key = [](const Sentence& s) {
    std::string k;
    for (const auto& t : s.tokens) k += t + " ";
    return k;
  };
  std::multiset<std::string> orig, perm;
  for (const auto& s : c.sentences) orig.insert(key(s));
  for (const auto& s : full.sentences) perm.insert(key(s));
  CHECK(orig == perm);

  const Corpus one = subsample(c, 1, 9);
  CHECK(one.n_val() == 1);  // fallback keeps val nonempty
  CHECK(one.n_train() == 0);

  CHECK_THROWS_AS(subsample(c, 0, 1), ConfigError);
  CHECK_THROWS_AS(subsample(c, c.size() + 1, 1), ConfigError);
}

TEST_CASE("language probabilities match the closed form and its limits") {
  // Corpus sizes of the motivating bilingual pair (millions of sentences):
  // 44.6 vs 8.7 at T=1 gives 0.8368 / 0.1632.
  SamplingConfig cfg;
  cfg.temperature = 1.0;
  cfg.sizes = {44.6, 8.7};
  auto p = language_probabilities(cfg);
  CHECK(p[0] == Approx(0.8368).epsilon(1e-3));
  CHECK(p[1] == Approx(0.1632).epsilon(1e-3));
  CHECK(p[0] + p[1] == Approx(1.0).epsilon(1e-12));

  // Temperature flattens: T=2 pulls both toward 1/2, preserving order.
  cfg.temperature = 2.0;
  auto p2 = language_probabilities(cfg);
  CHECK(p2[0] < p[0]);
  CHECK(p2[0] > 0.5);
  const double expect0 = std::sqrt(44.6 / 53.3) / (std::sqrt(44.6 / 53.3) + std::sqrt(8.7 / 53.3));
  CHECK(p2[0] == Approx(expect0).epsilon(1e-12));

  // Large T approaches uniform.
  cfg.temperature = 1e6;
  auto pu = language_probabilities(cfg);
  CHECK(std::abs(pu[0] - 0.5) < 1e-4);

  // Scale invariance: only relative sizes matter.
  SamplingConfig big;
  big.temperature = 3.0;
  big.sizes = {2, 6, 12};
  SamplingConfig scaled;
  scaled.temperature = 3.0;
  scaled.sizes = {1, 3, 6};
  const auto pb = language_probabilities(big);
  const auto ps = language_probabilities(scaled);
  for (size_t i = 0; i < pb.size(); ++i) CHECK(pb[i] == Approx(ps[i]).epsilon(1e-12));

  // Single language and error paths.
  SamplingConfig solo;
  solo.sizes = {5.0};
  CHECK(language_probabilities(solo)[0] == 1.0);
  SamplingConfig bad;
  bad.sizes = {1.0, -1.0};
  CHECK_THROWS_AS(language_probabilities(bad), ConfigError);
  bad.sizes = {1.0};
  bad.temperature = 0.0;
  CHECK_THROWS_AS(language_probabilities(bad), ConfigError);
}

TEST_CASE("batch sampling follows the language distribution and the train split") {
  const FamilyPool pool = make_family_pool(3, 5, 64);
  const Corpus a = generate_language(spec_for("ba", 1, 0.5, 200), pool);
  const Corpus b = generate_language(spec_for("bb", 2, 0.5, 200), pool);
  SamplingConfig cfg;
  cfg.temperature = 1.0;
  cfg.sizes = {200, 200};

  Rng rng(555);
  int count_a = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const LangBatch batch = sample_batch(std::vector<const Corpus*>{&a, &b}, cfg, 4, rng);
    REQUIRE(batch.sentence_indices.size() == 4);
    const Corpus& src = batch.lang_index == 0 ? a : b;
    CHECK(batch.language == src.language);
    for (int64_t idx : batch.sentence_indices) {
      CHECK(idx >= 0);
      CHECK(idx < src.n_train());
    }
    count_a += batch.lang_index == 0;
  }
  // Binomial(10k, 0.5): 3 sigma is 150.
  CHECK(count_a > 4700);
  CHECK(count_a < 5300);

  // Determinism under an equal-state generator.
  Rng r1(9), r2(9);
  const LangBatch x = sample_batch(std::vector<const Corpus*>{&a, &b}, cfg, 8, r1);
  const LangBatch y = sample_batch(std::vector<const Corpus*>{&a, &b}, cfg, 8, r2);
  CHECK(x.lang_index == y.lang_index);
  CHECK(x.sentence_indices == y.sentence_indices);

  // A language whose train split is empty cannot be sampled.
  const Corpus tiny = subsample(a, 1, 3);
  SamplingConfig solo;
  solo.sizes = {1.0};
  Rng r3(1);
  CHECK_THROWS_AS(sample_batch(std::vector<const Corpus*>{&tiny}, solo, 2, r3), ConfigError);
}

TEST_CASE("mlm masking: selection rate and 80/10/10 branch frequencies") {
  const int vocab = 1005;
  Rng rng(20260816);

  int64_t total_selected = 0, total_positions = 0;
  int64_t n_mask = 0, n_changed = 0, n_kept = 0;
  for (int rep = 0; rep < 2500; ++rep) {
    std::vector<int> ids(64);
    for (auto& id : ids) id = 5 + static_cast<int>(rng.next_below(1000));
    const MaskedBatch mb = mask_for_mlm(ids, 0.15, vocab, rng);
    REQUIRE(mb.inputs.size() == ids.size());
    REQUIRE(mb.targets.size() == ids.size());
    int64_t selected = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (mb.targets[i] < 0) {
        CHECK(mb.inputs[i] == ids[i]);  // unselected positions are untouched
        continue;
      }
      CHECK(mb.targets[i] == ids[i]);  // target is always the original id
      selected += 1;
      if (mb.inputs[i] == BpeModel::kMask) {
        n_mask += 1;
      } else if (mb.inputs[i] == ids[i]) {
        n_kept += 1;
      } else {
        n_changed += 1;
        CHECK(mb.inputs[i] >= 5);
        CHECK(mb.inputs[i] < vocab);
      }
    }
    CHECK(selected == mb.n_masked);
    total_selected += selected;
    total_positions += static_cast<int64_t>(ids.size());
  }
  // Binomial(160000, 0.15): mean 24000, sigma ~143; use 4 sigma.
  const double mean = 0.15 * static_cast<double>(total_positions);
  CHECK(std::abs(static_cast<double>(total_selected) - mean) < 4 * 143.0);

  // Multinomial branch shares within 4 sigma of 80/10/10 (the "kept"
  // share absorbs ~0.01% of "changed" collisions — far below the margin).
  const double n = static_cast<double>(total_selected);
  CHECK(std::abs(static_cast<double>(n_mask) / n - 0.8) < 4 * std::sqrt(0.8 * 0.2 / n));
  CHECK(std::abs(static_cast<double>(n_changed) / n - 0.1) < 4 * std::sqrt(0.1 * 0.9 / n) + 0.001);
  CHECK(std::abs(static_cast<double>(n_kept) / n - 0.1) < 4 * std::sqrt(0.1 * 0.9 / n) + 0.001);
}

TEST_CASE("mlm masking: specials are never selected; degenerate input is valid") {
  Rng rng(4);
  const std::vector<int> specials = {0, 1, 2, 3, 4, 0, 0};
  const MaskedBatch mb = mask_for_mlm(specials, 0.9, 100, rng);
  CHECK(mb.n_masked == 0);
  CHECK(mb.inputs == specials);
  for (int t : mb.targets) CHECK(t == -1);

  CHECK_THROWS_AS(mask_for_mlm({7}, 0.0, 100, rng), ConfigError);
  CHECK_THROWS_AS(mask_for_mlm({7}, 1.0, 100, rng), ConfigError);
  CHECK_THROWS_AS(mask_for_mlm({7}, 0.5, 5, rng), ConfigError);
}

TEST_CASE("tokenized corpus: row framing, first-subword tags, truncation") {
  const FamilyPool pool = make_family_pool(6, 4, 48);
  const Corpus c = generate_language(spec_for("tk", 12, 0.5, 60, 36, 4), pool);
  BpeModel bpe = learn_bpe({c.train_text()}, 120);

  const int64_t T = 24;
  const TokenizedCorpus tc = tokenize_corpus(c, bpe, T);
  REQUIRE(tc.n() == c.size());
  CHECK(tc.seq_len == T);
  CHECK(tc.train_end == c.train_end);
  CHECK(tc.n_tags == 4);

  for (int64_t i = 0; i < tc.n(); ++i) {
    const int* row = tc.row(i);
    CHECK(row[0] == BpeModel::kBos);
    // Exactly one EOS; PAD only after it; ids in range.
    int eos_at = -1;
    for (int64_t j = 0; j < T; ++j) {
      CHECK(row[j] >= 0);
      CHECK(row[j] < bpe.vocab_size());
      if (row[j] == BpeModel::kEos) {
        CHECK(eos_at == -1);
        eos_at = static_cast<int>(j);
      }
      if (eos_at >= 0 && j > eos_at) CHECK(row[j] == BpeModel::kPad);
    }
    REQUIRE(eos_at >= 1);

    // Tag targets appear only at content positions, within the inventory.
    int64_t tagged = 0;
    for (int64_t j = 0; j < T; ++j) {
      const int tag = tc.tag_targets[i * T + j];
      if (tag >= 0) {
        CHECK(j >= 1);
        CHECK(j < eos_at);
        CHECK(tag < 4);
        tagged += 1;
      }
    }
    // One tag per word that fit before truncation.
    CHECK(tagged <= static_cast<int64_t>(c.sentences[i].tokens.size()));
    CHECK(tagged >= 1);
  }

  // Tight budget truncates to whole words but keeps the frame valid.
  const TokenizedCorpus small = tokenize_corpus(c, bpe, 6);
  for (int64_t i = 0; i < small.n(); ++i) {
    CHECK(small.row(i)[0] == BpeModel::kBos);
  }
  CHECK_THROWS_AS(tokenize_corpus(c, bpe, 2), ConfigError);
}

TEST_CASE("corpus disk format round-trips; external plain text disables tags") {
  const FamilyPool pool = make_family_pool(8, 5, 64);
  const Corpus c = generate_language(spec_for("io", 5, 0.5, 50), pool);
  const std::string path = "test_corpus_io.tsv";
  save_corpus(c, path);

  const Corpus back = load_corpus(path, "io");
  REQUIRE(back.size() == c.size());
  CHECK(back.has_tags);
  CHECK(back.n_tags == c.n_tags);
  for (int64_t i = 0; i < c.size(); ++i) {
    CHECK(back.sentences[i].tokens == c.sentences[i].tokens);
    CHECK(back.sentences[i].tags == c.sentences[i].tags);
  }
  std::remove(path.c_str());

  // Plain text: tags absent, downstream tagging disabled.
  {
    std::ofstream f("test_plain.txt");
    f << "alpha beta gamma\ndelta\n";  // space-separated external text
  }
  const Corpus plain = load_corpus("test_plain.txt", "ext");
  CHECK_FALSE(plain.has_tags);
  CHECK(plain.n_tags == 0);
  REQUIRE(plain.size() == 2);
  CHECK(plain.sentences[0].tokens.size() == 3);
  CHECK(plain.sentences[0].tags[0] == -1);
  std::remove("test_plain.txt");

  // Malformed: mixing tagged and untagged tokens.
  {
    std::ofstream f("test_bad.txt");
    f << "good|1\tbad\n";
  }
  CHECK_THROWS_AS(load_corpus("test_bad.txt", "x"), IoError);
  std::remove("test_bad.txt");
  CHECK_THROWS_AS(load_corpus("no_such_file.txt", "x"), IoError);
}

TEST_CASE("corpus directory with manifest preserves split offsets exactly") {
  const FamilyPool pool = make_family_pool(9, 5, 64);
  std::vector<Corpus> cs;
  cs.push_back(generate_language(spec_for("da", 1, 0.5, 80), pool));
  cs.push_back(generate_language(spec_for("db", 2, 0.5, 40), pool));
  const std::string dir = "test_corpora_dir";
  save_corpora(cs, {1, 2}, dir);

  const auto back = load_corpora(dir);
  REQUIRE(back.size() == 2);
  for (size_t i = 0; i < 2; ++i) {
    CHECK(back[i].language == cs[i].language);
    CHECK(back[i].train_end == cs[i].train_end);
    CHECK(back[i].val_end == cs[i].val_end);
    CHECK(back[i].size() == cs[i].size());
    CHECK(back[i].n_tags == cs[i].n_tags);
  }
  std::filesystem::remove_all(dir);
}
