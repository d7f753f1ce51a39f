#include "xling/bpe.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "xling/serialize.hpp"

namespace xling {

namespace {

constexpr const char* kMarker = "</w>";
constexpr const char* kSpecialNames[] = {"<pad>", "<unk>", "<mask>", "<bos>", "<eos>"};
constexpr const char* kHeaderMagic = "bpe-v1";

std::vector<std::string> split_ws(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) words.push_back(std::move(w));
  return words;
}

// "abc" -> {"a", "b", "c</w>"}
std::vector<std::string> word_to_symbols(const std::string& word) {
  std::vector<std::string> syms;
  syms.reserve(word.size());
  for (size_t i = 0; i < word.size(); ++i) syms.emplace_back(1, word[i]);
  if (!syms.empty()) syms.back() += kMarker;
  return syms;
}

void apply_merge(std::vector<std::string>& syms, const std::string& a, const std::string& b) {
  size_t w = 0;
  for (size_t r = 0; r < syms.size();) {
    if (r + 1 < syms.size() && syms[r] == a && syms[r + 1] == b) {
      syms[w++] = a + b;
      r += 2;
    } else {
      if (w != r) syms[w] = std::move(syms[r]);
      ++w;
      ++r;
    }
  }
  syms.resize(w);
}

}  // namespace

void BpeModel::rebuild_tables(const std::vector<std::string>& base_symbols) {
  base_symbols_ = base_symbols;
  id_to_token_.clear();
  token_to_id_.clear();
  for (const char* s : kSpecialNames) id_to_token_.emplace_back(s);
  for (const auto& s : base_symbols_) id_to_token_.push_back(s);
  for (const auto& [a, b] : merges_) {
    const std::string tok = a + b;
    bool present = false;
    for (const auto& existing : id_to_token_) {
      if (existing == tok) {
        present = true;
        break;
      }
    }
    if (!present) id_to_token_.push_back(tok);
  }
  for (size_t i = 0; i < id_to_token_.size(); ++i) {
    token_to_id_.emplace(id_to_token_[i], static_cast<int>(i));
  }
}

const std::string& BpeModel::token(int id) const {
  if (id < 0 || id >= vocab_size()) {
    throw ConfigError("token id " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(vocab_size()));
  }
  return id_to_token_[static_cast<size_t>(id)];
}

int BpeModel::id_of(const std::string& tok) const {
  auto it = token_to_id_.find(tok);
  return it == token_to_id_.end() ? -1 : it->second;
}

std::vector<int> BpeModel::encode_word(const std::string& word) const {
  std::vector<int> ids;
  if (word.empty()) return ids;
  std::vector<std::string> syms = word_to_symbols(word);
  for (const auto& [a, b] : merges_) apply_merge(syms, a, b);
  ids.reserve(syms.size());
  for (const auto& s : syms) {
    const int id = id_of(s);
    ids.push_back(id >= 0 ? id : kUnk);
  }
  return ids;
}

std::vector<int> BpeModel::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& word : split_ws(text)) {
    const auto w = encode_word(word);
    ids.insert(ids.end(), w.begin(), w.end());
  }
  return ids;
}

std::string BpeModel::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPad) continue;
    const std::string& tok = token(id);
    if (tok.size() >= 4 && tok.compare(tok.size() - 4, 4, kMarker) == 0) {
      out += tok.substr(0, tok.size() - 4);
      out += ' ';
    } else {
      out += tok;  // specials render as their angle-bracket names
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

std::string BpeModel::serialize_text() const {
  std::ostringstream os;
  os << kHeaderMagic << ' ' << vocab_size() << ' ' << (vocab_truncated_ ? 1 : 0);
  for (const auto& s : base_symbols_) os << ' ' << s;
  os << '\n';
  for (const auto& [a, b] : merges_) os << a << ' ' << b << '\n';
  return os.str();
}

BpeModel BpeModel::deserialize_text(const std::string& text) {
  std::istringstream is(text);
  std::string header;
  if (!std::getline(is, header)) throw IoError("tokenizer model text is empty");
  std::istringstream hs(header);
  std::string magic;
  int vocab = 0, truncated = 0;
  if (!(hs >> magic >> vocab >> truncated) || magic != kHeaderMagic) {
    throw IoError("tokenizer model has a malformed header line");
  }
  std::vector<std::string> bases;
  std::string sym;
  while (hs >> sym) bases.push_back(sym);

  BpeModel m;
  m.vocab_truncated_ = truncated != 0;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string a, b, extra;
    if (!(ls >> a >> b) || (ls >> extra)) {
      throw IoError("tokenizer model has a malformed merge line: '" + line + "'");
    }
    m.merges_.emplace_back(std::move(a), std::move(b));
  }
  m.rebuild_tables(bases);
  if (m.vocab_size() != vocab) {
    throw IoError("tokenizer model header claims vocab " + std::to_string(vocab) +
                  " but reconstruction yields " + std::to_string(m.vocab_size()));
  }
  return m;
}

void BpeModel::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  const std::string text = serialize_text();
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw IoError("failed writing tokenizer model '" + path + "'");
}

BpeModel BpeModel::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_text(ss.str());
}

uint64_t BpeModel::fingerprint() const { return fnv1a(serialize_text()); }

BpeModel learn_bpe(const std::vector<std::string>& corpora, int vocab_size) {
  // Word frequencies over the concatenated corpora.
  std::map<std::string, int64_t> word_freq;
  for (const auto& corpus : corpora) {
    for (auto& w : split_ws(corpus)) word_freq[w] += 1;
  }
  if (word_freq.empty()) {
    throw ConfigError("tokenizer learning needs at least one word of text");
  }

  // Base symbol inventory, sorted for deterministic id assignment.
  std::set<std::string> base_set;
  for (const auto& [word, freq] : word_freq) {
    for (const auto& s : word_to_symbols(word)) base_set.insert(s);
  }
  const std::vector<std::string> bases(base_set.begin(), base_set.end());
  const int floor_size = BpeModel::kNumSpecials + static_cast<int>(bases.size());
  if (vocab_size <= floor_size) {
    throw ConfigError("vocab size " + std::to_string(vocab_size) +
                      " must exceed specials plus character inventory (" +
                      std::to_string(floor_size) + ")");
  }

  BpeModel m;
  std::map<std::string, std::vector<std::string>> segs;
  for (const auto& [word, freq] : word_freq) segs.emplace(word, word_to_symbols(word));

  m.rebuild_tables(bases);
  while (m.vocab_size() < vocab_size) {
    // Count adjacent pairs weighted by word frequency. std::map iteration
    // is lexicographic, which implements the tie-break: keep the first
    // pair seen at the maximal count.
    std::map<std::pair<std::string, std::string>, int64_t> pair_counts;
    for (const auto& [word, syms] : segs) {
      const int64_t freq = word_freq.at(word);
      for (size_t i = 0; i + 1 < syms.size(); ++i) {
        pair_counts[{syms[i], syms[i + 1]}] += freq;
      }
    }
    const std::pair<std::string, std::string>* best = nullptr;
    int64_t best_count = 0;
    for (const auto& [pair, count] : pair_counts) {
      if (count > best_count) {
        best = &pair;
        best_count = count;
      }
    }
    if (best == nullptr) {
      m.vocab_truncated_ = true;
      break;
    }
    const auto [a, b] = *best;
    m.merges_.emplace_back(a, b);
    for (auto& [word, syms] : segs) apply_merge(syms, a, b);
    m.rebuild_tables(bases);
  }
  return m;
}

}  // namespace xling
