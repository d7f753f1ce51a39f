#include "xling/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "xling/common.hpp"
#include "xling/serialize.hpp"

namespace xling {
namespace {

using nlohmann::json;

// Accumulates every problem; the caller throws once with the full list.
struct Errors {
  std::vector<std::string> items;
  void add(const std::string& path, const std::string& what) {
    items.push_back(path.empty() ? what : path + ": " + what);
  }
};

// Typed view over one JSON object that tracks which keys were consumed, so
// finish() can reject everything unknown.
class Obj {
 public:
  Obj(const json* j, std::string path, Errors* errs) : j_(j), path_(std::move(path)), errs_(errs) {}

  bool valid() const { return j_ != nullptr; }
  bool has(const char* key) const { return j_ && j_->contains(key); }
  std::string at(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* take(const char* key) {
    if (!j_ || !j_->contains(key)) return nullptr;
    used_.insert(key);
    return &(*j_)[key];
  }

  void get(const char* key, std::string* out) {
    if (const json* v = take(key)) {
      if (v->is_string()) {
        *out = v->get<std::string>();
      } else {
        errs_->add(at(key), "expected a string");
      }
    }
  }

  void get(const char* key, bool* out) {
    if (const json* v = take(key)) {
      if (v->is_boolean()) {
        *out = v->get<bool>();
      } else {
        errs_->add(at(key), "expected true or false");
      }
    }
  }

  void get(const char* key, double* out) {
    if (const json* v = take(key)) {
      if (v->is_number()) {
        *out = v->get<double>();
      } else {
        errs_->add(at(key), "expected a number");
      }
    }
  }

  template <typename Int>
  void get_int(const char* key, Int* out) {
    if (const json* v = take(key)) {
      if (v->is_number_integer()) {
        *out = static_cast<Int>(v->get<int64_t>());
      } else {
        errs_->add(at(key), "expected an integer");
      }
    }
  }

  void get_u64(const char* key, uint64_t* out) {
    if (const json* v = take(key)) {
      if (v->is_number_unsigned() || (v->is_number_integer() && v->get<int64_t>() >= 0)) {
        *out = v->get<uint64_t>();
      } else {
        errs_->add(at(key), "expected a non-negative integer");
      }
    }
  }

  void get(const char* key, std::vector<double>* out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) {
        errs_->add(at(key), "expected an array of numbers");
        return;
      }
      out->clear();
      for (const auto& e : *v) {
        if (!e.is_number()) {
          errs_->add(at(key), "expected an array of numbers");
          return;
        }
        out->push_back(e.get<double>());
      }
    }
  }

  void get(const char* key, std::vector<std::string>* out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) {
        errs_->add(at(key), "expected an array of strings");
        return;
      }
      out->clear();
      for (const auto& e : *v) {
        if (!e.is_string()) {
          errs_->add(at(key), "expected an array of strings");
          return;
        }
        out->push_back(e.get<std::string>());
      }
    }
  }

  // Child object; a missing key returns an invalid Obj (defaults stand).
  Obj child(const char* key) {
    if (const json* v = take(key)) {
      if (v->is_object()) return Obj(v, at(key), errs_);
      errs_->add(at(key), "expected an object");
    }
    return Obj(nullptr, at(key), errs_);
  }

  const json* array(const char* key) {
    if (const json* v = take(key)) {
      if (v->is_array()) return v;
      errs_->add(at(key), "expected an array");
    }
    return nullptr;
  }

  void finish() {
    if (!j_) return;
    for (const auto& item : j_->items()) {
      if (!used_.count(item.key())) errs_->add(at(item.key().c_str()), "unknown key");
    }
  }

 private:
  const json* j_;
  std::string path_;
  Errors* errs_;
  std::set<std::string> used_;
};

bool safe_id(const std::string& s, const char* extra) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && std::strchr(extra, c) == nullptr) {
      return false;
    }
  }
  return true;
}

void parse_language(Obj o, LanguageSpec* spec) {
  o.get("language", &spec->language);
  o.get_u64("seed", &spec->seed);
  o.get_int("vocab_words", &spec->vocab_words);
  o.get("shared_fraction", &spec->shared_fraction);
  o.get_int("n_states", &spec->n_states);
  o.get("transition_temperature", &spec->transition_temperature);
  o.get_int("corpus_size", &spec->corpus_size);
  o.get_int("min_sentence_len", &spec->min_sentence_len);
  o.get_int("max_sentence_len", &spec->max_sentence_len);
  o.finish();
}

void parse_run(Obj o, RunSpec* run, Errors* errs) {
  o.get("id", &run->id);
  o.get("languages", &run->languages);
  std::string mode = "shared_only";
  o.get("capacity_mode", &mode);
  try {
    run->mode = capacity_mode_from_string(mode);
  } catch (const Error& e) {
    errs->add(o.at("capacity_mode"), e.what());
  }
  o.get("trainer", &run->trainer);
  o.finish();
}

void validate(const ExperimentConfig& c, Errors* errs) {
  if (!safe_id(c.name, "_-")) {
    errs->add("name", "must be nonempty using only letters, digits, '-', '_'");
  }

  // Corpus languages.
  if (c.family.n_states < 2) errs->add("family.n_states", "needs at least 2 grammar states");
  if (c.family.pool_words < 1) errs->add("family.pool_words", "needs at least 1 word");
  if (c.languages.empty()) errs->add("languages", "at least one language is required");
  std::set<std::string> langs;
  for (size_t i = 0; i < c.languages.size(); ++i) {
    const LanguageSpec& s = c.languages[i];
    const std::string p = "languages[" + std::to_string(i) + "]";
    if (!safe_id(s.language, "_-")) {
      errs->add(p + ".language", "must be nonempty using only letters, digits, '-', '_'");
    } else if (!langs.insert(s.language).second) {
      errs->add(p + ".language", "duplicate language id '" + s.language + "'");
    }
    if (s.vocab_words < 2) errs->add(p + ".vocab_words", "needs at least 2 word types");
    if (s.shared_fraction < 0.0 || s.shared_fraction > 1.0) {
      errs->add(p + ".shared_fraction", "must lie in [0, 1]");
    }
    if (s.n_states != c.family.n_states) {
      errs->add(p + ".n_states", "must match family.n_states (" +
                                     std::to_string(c.family.n_states) + ")");
    }
    if (s.transition_temperature <= 0) errs->add(p + ".transition_temperature", "must be positive");
    if (s.corpus_size < 10) errs->add(p + ".corpus_size", "needs at least 10 sentences");
    if (s.min_sentence_len < 1 || s.min_sentence_len > s.max_sentence_len) {
      errs->add(p + ".min_sentence_len", "must satisfy 1 <= min <= max");
    }
  }

  if (c.bpe_vocab_size < 16) errs->add("bpe.vocab_size", "must be at least 16");

  // Model.
  const TransformerConfig& m = c.model;
  if (m.vocab_size != 0) {
    errs->add("model.vocab_size", "derived from the tokenizer; remove this key");
  }
  if (m.n_layers < 1) errs->add("model.n_layers", "must be at least 1");
  if (m.n_heads < 1) errs->add("model.n_heads", "must be at least 1");
  if (m.d_model < 4 || (m.n_heads > 0 && m.d_model % m.n_heads != 0)) {
    errs->add("model.d_model", "must be >= 4 and divisible by n_heads");
  }
  if (m.d_ffn < 1) errs->add("model.d_ffn", "must be at least 1");
  if (m.max_seq_len < 4) errs->add("model.max_seq_len", "must be at least 4");
  if (m.dropout < 0.0 || m.dropout >= 1.0) errs->add("model.dropout", "must lie in [0, 1)");

  // Runs.
  if (c.runs.empty()) errs->add("runs", "at least one run is required");
  std::set<std::string> run_ids;
  for (size_t i = 0; i < c.runs.size(); ++i) {
    const RunSpec& r = c.runs[i];
    const std::string p = "runs[" + std::to_string(i) + "]";
    if (!safe_id(r.id, "._-")) {
      errs->add(p + ".id", "must be nonempty using only letters, digits, '.', '-', '_'");
    } else if (!run_ids.insert(r.id).second) {
      errs->add(p + ".id", "duplicate run id '" + r.id + "'");
    }
    if (r.languages.empty()) errs->add(p + ".languages", "at least one language is required");
    std::set<std::string> seen;
    for (const std::string& l : r.languages) {
      if (!langs.count(l)) errs->add(p + ".languages", "unknown language '" + l + "'");
      if (!seen.insert(l).second) errs->add(p + ".languages", "duplicate language '" + l + "'");
    }
    if (r.trainer != "joint" && r.trainer != "meta") {
      errs->add(p + ".trainer", "must be 'joint' or 'meta'");
    }
  }

  // Pretraining.
  const PretrainConfig& t = c.pretrain;
  if (t.epochs < 1) errs->add("pretrain.epochs", "must be at least 1");
  if (t.steps_per_epoch < 1) errs->add("pretrain.steps_per_epoch", "must be at least 1");
  if (t.batch_size < 1) errs->add("pretrain.batch_size", "must be at least 1");
  if (t.peak_lr <= 0) errs->add("pretrain.peak_lr", "must be positive");
  if (t.warmup < 1) errs->add("pretrain.warmup", "must be at least 1");
  if (t.mask_prob <= 0 || t.mask_prob >= 1) errs->add("pretrain.mask_prob", "must lie in (0, 1)");
  if (t.temperature <= 0) errs->add("pretrain.temperature", "must be positive");
  if (t.clip_norm <= 0) errs->add("pretrain.clip_norm", "must be positive");
  if (t.eval_rows < 0) errs->add("pretrain.eval_rows", "must be non-negative");
  if (t.alpha_scale < 0) errs->add("pretrain.alpha_scale", "must be non-negative");
  if (t.val_batch_size < 1) errs->add("pretrain.val_batch_size", "must be at least 1");
  if (t.epsilon < 0) errs->add("pretrain.epsilon", "must be non-negative");

  // Probe stage.
  if (c.probes.enabled) {
    const ProbesStageConfig& pr = c.probes;
    if (pr.n_probes < 1) errs->add("probes.n_probes", "must be at least 1");
    if (pr.batch_size < 1) errs->add("probes.batch_size", "must be at least 1");
    if (pr.micro_batches < 1) errs->add("probes.micro_batches", "must be at least 1");
    if (pr.mask_prob <= 0 || pr.mask_prob >= 1) errs->add("probes.mask_prob", "must lie in (0, 1)");
    if (pr.targets.empty()) errs->add("probes.targets", "at least one target is required");
    for (size_t i = 0; i < pr.targets.size(); ++i) {
      const ProbeTarget& tg = pr.targets[i];
      const std::string p = "probes.targets[" + std::to_string(i) + "]";
      const RunSpec* run = c.find_run(tg.run);
      if (run == nullptr) {
        errs->add(p + ".run", "unknown run '" + tg.run + "'");
        continue;
      }
      if (tg.pairs.empty()) errs->add(p + ".pairs", "at least one language pair is required");
      for (const auto& [a, b] : tg.pairs) {
        for (const std::string& l : {a, b}) {
          if (std::find(run->languages.begin(), run->languages.end(), l) ==
              run->languages.end()) {
            errs->add(p + ".pairs", "language '" + l + "' is not trained by run '" + tg.run + "'");
          }
        }
        if (a == b) errs->add(p + ".pairs", "pair languages must differ");
      }
    }
  }

  // Prune stage.
  if (c.prune.enabled) {
    const PruneStageConfig& pc = c.prune;
    const RunSpec* run = c.find_run(pc.run);
    if (run == nullptr) {
      errs->add("prune.run", "unknown run '" + pc.run + "'");
    } else {
      for (const std::string& l : pc.languages) {
        if (std::find(run->languages.begin(), run->languages.end(), l) == run->languages.end()) {
          errs->add("prune.languages", "language '" + l + "' is not trained by run '" + pc.run + "'");
        }
      }
    }
    if (pc.lambda_grid.empty()) errs->add("prune.lambda_grid", "must be nonempty");
    for (double l : pc.lambda_grid) {
      if (l < 0) errs->add("prune.lambda_grid", "entries must be non-negative");
    }
    if (pc.steps < 1) errs->add("prune.steps", "must be at least 1");
    if (pc.batch_size < 1) errs->add("prune.batch_size", "must be at least 1");
    if (pc.lr <= 0) errs->add("prune.lr", "must be positive");
    if (pc.mask_prob <= 0 || pc.mask_prob >= 1) errs->add("prune.mask_prob", "must lie in (0, 1)");
    if (pc.emb_group_size < 1 || (c.model.d_model > 0 && c.model.d_model % pc.emb_group_size)) {
      errs->add("prune.emb_group_size", "must divide model.d_model evenly");
    }
    if (pc.mask_runs < 1) errs->add("prune.mask_runs", "must be at least 1");
    if (pc.eval_batch_size < 1) errs->add("prune.eval_batch_size", "must be at least 1");
    if (pc.eval_rows < 0) errs->add("prune.eval_rows", "must be non-negative");
    if (pc.max_ppl_ratio < 1.0) errs->add("prune.max_ppl_ratio", "must be at least 1");
    if (pc.min_sparsity < 0.0 || pc.min_sparsity >= 1.0) {
      errs->add("prune.min_sparsity", "must lie in [0, 1)");
    }
    if (pc.top_k < 0) errs->add("prune.top_k", "must be non-negative");
  }

  // Eval stage.
  if (c.eval.enabled) {
    const EvalStageConfig& ev = c.eval;
    if (ev.epochs < 0) errs->add("eval.epochs", "must be non-negative");
    if (ev.batch_size < 1) errs->add("eval.batch_size", "must be at least 1");
    if (ev.lr_grid.empty()) errs->add("eval.lr_grid", "must be nonempty");
    for (double l : ev.lr_grid) {
      if (l <= 0) errs->add("eval.lr_grid", "entries must be positive");
    }
    if (ev.mask_prob <= 0 || ev.mask_prob >= 1) errs->add("eval.mask_prob", "must lie in (0, 1)");
    std::vector<std::string> targets = ev.languages;
    if (targets.empty()) {
      for (const auto& s : c.languages) targets.push_back(s.language);
    }
    for (const std::string& l : targets) {
      if (!langs.count(l)) {
        errs->add("eval.languages", "unknown language '" + l + "'");
        continue;
      }
      bool has_mono = false;
      for (const RunSpec& r : c.runs) {
        has_mono |= r.languages.size() == 1 && r.languages[0] == l;
      }
      if (!has_mono) {
        errs->add("eval.languages",
                  "language '" + l + "' needs a single-language baseline run");
      }
      for (const RunSpec& r : c.runs) {
        if (r.languages.size() < 2) continue;
        if (std::find(r.languages.begin(), r.languages.end(), l) == r.languages.end()) {
          errs->add("eval.languages", "multilingual run '" + r.id +
                                          "' does not cover evaluated language '" + l + "'");
        }
      }
    }
  }
}

}  // namespace

const RunSpec* ExperimentConfig::find_run(const std::string& id) const {
  for (const RunSpec& r : runs) {
    if (r.id == id) return &r;
  }
  return nullptr;
}

const LanguageSpec* ExperimentConfig::find_language(const std::string& language) const {
  for (const LanguageSpec& s : languages) {
    if (s.language == language) return &s;
  }
  return nullptr;
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config must be a JSON object");

  Errors errs;
  ExperimentConfig cfg;
  Obj o(&root, "", &errs);

  o.get("name", &cfg.name);
  o.get_u64("seed", &cfg.seed);
  o.get("out_dir", &cfg.out_dir);

  {
    Obj f = o.child("family");
    f.get_u64("seed", &cfg.family.seed);
    f.get_int("n_states", &cfg.family.n_states);
    f.get_int("pool_words", &cfg.family.pool_words);
    f.finish();
  }

  if (const json* arr = o.array("languages")) {
    for (size_t i = 0; i < arr->size(); ++i) {
      const std::string p = "languages[" + std::to_string(i) + "]";
      if (!(*arr)[i].is_object()) {
        errs.add(p, "expected an object");
        continue;
      }
      LanguageSpec spec;
      spec.n_states = cfg.family.n_states;  // default to the family's inventory
      parse_language(Obj(&(*arr)[i], p, &errs), &spec);
      cfg.languages.push_back(std::move(spec));
    }
  }

  {
    Obj b = o.child("bpe");
    b.get_int("vocab_size", &cfg.bpe_vocab_size);
    b.finish();
  }

  {
    Obj m = o.child("model");
    m.get_int("n_layers", &cfg.model.n_layers);
    m.get_int("n_heads", &cfg.model.n_heads);
    m.get_int("d_model", &cfg.model.d_model);
    m.get_int("d_ffn", &cfg.model.d_ffn);
    m.get_int("max_seq_len", &cfg.model.max_seq_len);
    m.get("dropout", &cfg.model.dropout);
    m.get("lang_attn_qkv_only", &cfg.model.lang_attn_qkv_only);
    if (m.has("vocab_size")) m.get_int("vocab_size", &cfg.model.vocab_size);
    m.finish();
  }

  if (const json* arr = o.array("runs")) {
    for (size_t i = 0; i < arr->size(); ++i) {
      const std::string p = "runs[" + std::to_string(i) + "]";
      if (!(*arr)[i].is_object()) {
        errs.add(p, "expected an object");
        continue;
      }
      RunSpec run;
      parse_run(Obj(&(*arr)[i], p, &errs), &run, &errs);
      cfg.runs.push_back(std::move(run));
    }
  }

  {
    Obj t = o.child("pretrain");
    t.get_int("epochs", &cfg.pretrain.epochs);
    t.get_int("steps_per_epoch", &cfg.pretrain.steps_per_epoch);
    t.get_int("batch_size", &cfg.pretrain.batch_size);
    t.get("peak_lr", &cfg.pretrain.peak_lr);
    t.get_int("warmup", &cfg.pretrain.warmup);
    t.get("mask_prob", &cfg.pretrain.mask_prob);
    t.get("temperature", &cfg.pretrain.temperature);
    t.get("clip_norm", &cfg.pretrain.clip_norm);
    t.get_int("eval_rows", &cfg.pretrain.eval_rows);
    t.get("alpha_scale", &cfg.pretrain.alpha_scale);
    t.get_int("val_batch_size", &cfg.pretrain.val_batch_size);
    t.get("epsilon", &cfg.pretrain.epsilon);
    t.finish();
  }

  {
    Obj pr = o.child("probes");
    pr.get("enabled", &cfg.probes.enabled);
    pr.get_int("n_probes", &cfg.probes.n_probes);
    pr.get_int("batch_size", &cfg.probes.batch_size);
    pr.get_int("micro_batches", &cfg.probes.micro_batches);
    pr.get("mask_prob", &cfg.probes.mask_prob);
    if (pr.valid()) {
      if (const json* arr = pr.array("targets")) {
        for (size_t i = 0; i < arr->size(); ++i) {
          const std::string p = "probes.targets[" + std::to_string(i) + "]";
          if (!(*arr)[i].is_object()) {
            errs.add(p, "expected an object");
            continue;
          }
          ProbeTarget tg;
          Obj to(&(*arr)[i], p, &errs);
          to.get("run", &tg.run);
          if (const json* pairs = to.array("pairs")) {
            for (const auto& e : *pairs) {
              if (!e.is_array() || e.size() != 2 || !e[0].is_string() || !e[1].is_string()) {
                errs.add(p + ".pairs", "each pair must be a two-string array");
                continue;
              }
              tg.pairs.emplace_back(e[0].get<std::string>(), e[1].get<std::string>());
            }
          }
          to.finish();
          cfg.probes.targets.push_back(std::move(tg));
        }
      }
    }
    pr.finish();
  }

  {
    Obj pc = o.child("prune");
    pc.get("enabled", &cfg.prune.enabled);
    pc.get("run", &cfg.prune.run);
    pc.get("languages", &cfg.prune.languages);
    pc.get("lambda_grid", &cfg.prune.lambda_grid);
    pc.get_int("steps", &cfg.prune.steps);
    pc.get_int("batch_size", &cfg.prune.batch_size);
    pc.get("lr", &cfg.prune.lr);
    pc.get("mask_prob", &cfg.prune.mask_prob);
    pc.get("init_pi", &cfg.prune.init_pi);
    pc.get_int("emb_group_size", &cfg.prune.emb_group_size);
    pc.get_int("mask_runs", &cfg.prune.mask_runs);
    pc.get_int("eval_batch_size", &cfg.prune.eval_batch_size);
    pc.get_int("eval_rows", &cfg.prune.eval_rows);
    pc.get("max_ppl_ratio", &cfg.prune.max_ppl_ratio);
    pc.get("min_sparsity", &cfg.prune.min_sparsity);
    pc.get_int("top_k", &cfg.prune.top_k);
    pc.finish();
  }

  {
    Obj ev = o.child("eval");
    ev.get("enabled", &cfg.eval.enabled);
    ev.get_int("epochs", &cfg.eval.epochs);
    ev.get_int("batch_size", &cfg.eval.batch_size);
    ev.get("lr_grid", &cfg.eval.lr_grid);
    ev.get("tune_language_specific", &cfg.eval.tune_language_specific);
    ev.get("mask_prob", &cfg.eval.mask_prob);
    ev.get("languages", &cfg.eval.languages);
    ev.finish();
  }

  o.finish();
  validate(cfg, &errs);

  if (!errs.items.empty()) {
    std::ostringstream msg;
    msg << "invalid experiment config (" << errs.items.size() << " problem"
        << (errs.items.size() == 1 ? "" : "s") << "):";
    for (const std::string& e : errs.items) msg << "\n  - " << e;
    throw ConfigError(msg.str());
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_experiment_config(buf.str());
}

std::string canonical_config_json(const ExperimentConfig& c) {
  json root;
  root["name"] = c.name;
  root["seed"] = c.seed;
  root["family"] = {{"seed", c.family.seed},
                    {"n_states", c.family.n_states},
                    {"pool_words", c.family.pool_words}};
  root["languages"] = json::array();
  for (const LanguageSpec& s : c.languages) {
    root["languages"].push_back({{"language", s.language},
                                 {"seed", s.seed},
                                 {"vocab_words", s.vocab_words},
                                 {"shared_fraction", s.shared_fraction},
                                 {"n_states", s.n_states},
                                 {"transition_temperature", s.transition_temperature},
                                 {"corpus_size", s.corpus_size},
                                 {"min_sentence_len", s.min_sentence_len},
                                 {"max_sentence_len", s.max_sentence_len}});
  }
  root["bpe"] = {{"vocab_size", c.bpe_vocab_size}};
  root["model"] = {{"n_layers", c.model.n_layers},
                   {"n_heads", c.model.n_heads},
                   {"d_model", c.model.d_model},
                   {"d_ffn", c.model.d_ffn},
                   {"max_seq_len", c.model.max_seq_len},
                   {"dropout", c.model.dropout},
                   {"lang_attn_qkv_only", c.model.lang_attn_qkv_only}};
  root["runs"] = json::array();
  for (const RunSpec& r : c.runs) {
    root["runs"].push_back({{"id", r.id},
                            {"languages", r.languages},
                            {"capacity_mode", to_string(r.mode)},
                            {"trainer", r.trainer}});
  }
  root["pretrain"] = {{"epochs", c.pretrain.epochs},
                      {"steps_per_epoch", c.pretrain.steps_per_epoch},
                      {"batch_size", c.pretrain.batch_size},
                      {"peak_lr", c.pretrain.peak_lr},
                      {"warmup", c.pretrain.warmup},
                      {"mask_prob", c.pretrain.mask_prob},
                      {"temperature", c.pretrain.temperature},
                      {"clip_norm", c.pretrain.clip_norm},
                      {"eval_rows", c.pretrain.eval_rows},
                      {"alpha_scale", c.pretrain.alpha_scale},
                      {"val_batch_size", c.pretrain.val_batch_size},
                      {"epsilon", c.pretrain.epsilon}};
  json probes = {{"enabled", c.probes.enabled},
                 {"n_probes", c.probes.n_probes},
                 {"batch_size", c.probes.batch_size},
                 {"micro_batches", c.probes.micro_batches},
                 {"mask_prob", c.probes.mask_prob}};
  probes["targets"] = json::array();
  for (const ProbeTarget& t : c.probes.targets) {
    json pairs = json::array();
    for (const auto& [a, b] : t.pairs) pairs.push_back({a, b});
    probes["targets"].push_back({{"run", t.run}, {"pairs", pairs}});
  }
  root["probes"] = probes;
  root["prune"] = {{"enabled", c.prune.enabled},
                   {"run", c.prune.run},
                   {"languages", c.prune.languages},
                   {"lambda_grid", c.prune.lambda_grid},
                   {"steps", c.prune.steps},
                   {"batch_size", c.prune.batch_size},
                   {"lr", c.prune.lr},
                   {"mask_prob", c.prune.mask_prob},
                   {"init_pi", c.prune.init_pi},
                   {"emb_group_size", c.prune.emb_group_size},
                   {"mask_runs", c.prune.mask_runs},
                   {"eval_batch_size", c.prune.eval_batch_size},
                   {"eval_rows", c.prune.eval_rows},
                   {"max_ppl_ratio", c.prune.max_ppl_ratio},
                   {"min_sparsity", c.prune.min_sparsity},
                   {"top_k", c.prune.top_k}};
  root["eval"] = {{"enabled", c.eval.enabled},
                  {"epochs", c.eval.epochs},
                  {"batch_size", c.eval.batch_size},
                  {"lr_grid", c.eval.lr_grid},
                  {"tune_language_specific", c.eval.tune_language_specific},
                  {"mask_prob", c.eval.mask_prob},
                  {"languages", c.eval.languages}};
  return root.dump(2) + "\n";
}

std::string experiment_digest(const ExperimentConfig& cfg) {
  return to_hex(fnv1a(canonical_config_json(cfg)));
}

}  // namespace xling
