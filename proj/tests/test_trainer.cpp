#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "xling/bpe.hpp"
#include "xling/corpus.hpp"
#include "xling/metrics.hpp"
#include "xling/model.hpp"
#include "xling/trainer.hpp"

using namespace xling;

namespace {

struct Lab {
  std::vector<Corpus> corpora;
  BpeModel bpe;
  std::vector<TokenizedCorpus> toks;
  TransformerConfig mcfg;
};

const Lab& lab() {
  static const Lab l = [] {
    Lab out;
    const FamilyPool pool = make_family_pool(7, 4, 30);
    for (const auto& [name, seed] :
         std::vector<std::pair<std::string, uint64_t>>{{"aa", 11}, {"bb", 22}}) {
      LanguageSpec spec;
      spec.language = name;
      spec.seed = seed;
      spec.vocab_words = 18;
      spec.shared_fraction = 0.5;
      spec.n_states = 4;
      spec.corpus_size = 80;
      spec.min_sentence_len = 3;
      spec.max_sentence_len = 6;
      out.corpora.push_back(generate_language(spec, pool));
    }
    out.bpe = learn_bpe({out.corpora[0].train_text(), out.corpora[1].train_text()}, 120);
    for (const auto& c : out.corpora) out.toks.push_back(tokenize_corpus(c, out.bpe, 16));
    out.mcfg.n_layers = 1;
    out.mcfg.n_heads = 2;
    out.mcfg.d_model = 16;
    out.mcfg.d_ffn = 32;
    out.mcfg.max_seq_len = 16;
    out.mcfg.vocab_size = out.bpe.vocab_size();
    out.mcfg.dropout = 0.1;
    return out;
  }();
  return l;
}

TrainConfig small_cfg() {
  TrainConfig cfg;
  cfg.n_epochs = 1;
  cfg.steps_per_epoch = 10;
  cfg.batch_size = 4;
  cfg.lr.peak = 3e-3;
  cfg.lr.warmup = 30;
  cfg.seed = 5;
  return cfg;
}

std::vector<const TokenizedCorpus*> both() {
  return {&lab().toks[0], &lab().toks[1]};
}

std::vector<const TokenizedCorpus*> solo() { return {&lab().toks[0]}; }

bool params_equal(const ParamMap& a, const ParamMap& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, t] : a) {
    auto it = b.find(name);
    if (it == b.end() || it->second.shape() != t.shape()) return false;
    if (std::memcmp(t.data().data(), it->second.data().data(),
                    sizeof(double) * static_cast<size_t>(t.numel())) != 0) {
      return false;
    }
  }
  return true;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string tmp_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / ("xling-trainer-" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace

TEST_CASE("tokenized sample_batch matches the raw-corpus draw") {
  SamplingConfig sc;
  sc.temperature = 2.0;
  sc.sizes = {static_cast<double>(lab().toks[0].train_end),
              static_cast<double>(lab().toks[1].train_end)};
  Rng r1(42), r2(42);
  // Raw corpora have the same train counts by construction.
  std::vector<const Corpus*> raw = {&lab().corpora[0], &lab().corpora[1]};
  REQUIRE(lab().corpora[0].n_train() == lab().toks[0].train_end);
  REQUIRE(lab().corpora[1].n_train() == lab().toks[1].train_end);
  for (int i = 0; i < 20; ++i) {
    const LangBatch a = sample_batch(raw, sc, 3, r1);
    const LangBatch b = sample_batch(both(), sc, 3, r2);
    CHECK(a.lang_index == b.lang_index);
    CHECK(a.language == b.language);
    CHECK(a.sentence_indices == b.sentence_indices);
    for (int64_t row : b.sentence_indices) {
      CHECK(row >= 0);
      CHECK(row < lab().toks[static_cast<size_t>(b.lang_index)].train_end);
    }
  }
}

TEST_CASE("zero epochs returns the initial state") {
  Model m(lab().mcfg, CapacityMode::shared_only, {"aa", "bb"}, 3);
  const Model before = m.clone();
  TrainConfig cfg = small_cfg();
  cfg.n_epochs = 0;
  Trainer tr(std::move(m), cfg);
  tr.train(both());
  CHECK(tr.step() == 0);
  CHECK(tr.epochs_done() == 0);
  CHECK(params_equal(tr.model().params(), before.params()));
}

TEST_CASE("training loss decreases on a tiny corpus") {
  Model m(lab().mcfg, CapacityMode::shared_only, {"aa"}, 3);
  Trainer tr(std::move(m), small_cfg());
  std::vector<double> losses;
  for (int i = 0; i < 150; ++i) {
    const StepReport r = tr.train_step(solo());
    REQUIRE(r.applied);
    REQUIRE(std::isfinite(r.loss));
    losses.push_back(r.loss);
  }
  CHECK(tr.skipped_steps() == 0);
  CHECK(tr.step() == 150);
  double head = 0, tail = 0;
  for (int i = 0; i < 20; ++i) {
    head += losses[static_cast<size_t>(i)];
    tail += losses[losses.size() - 20 + static_cast<size_t>(i)];
  }
  CHECK(tail / 20 < head / 20 - 0.2);
}

TEST_CASE("monolingual training never samples the other language") {
  Model m(lab().mcfg, CapacityMode::shared_only, {"aa"}, 3);
  TrainConfig cfg = small_cfg();
  cfg.steps_per_epoch = 25;
  const std::string mdir = tmp_dir("mono");
  Trainer tr(std::move(m), cfg);
  {
    MetricsWriter w(mdir + "/metrics.csv", cfg.run_id);
    tr.train(solo(), &w);
  }
  CHECK(tr.language_stats().size() == 1);
  CHECK(tr.language_stats().count("aa") == 1);
  for (const MetricsRecord& r : read_metrics(mdir + "/metrics.csv")) {
    CHECK((r.language == "aa" || r.language.empty()));
  }
}

TEST_CASE("uniform-logit model has perplexity equal to the vocabulary size") {
  Model m(lab().mcfg, CapacityMode::shared_only, {"aa"}, 3);
  for (auto& [name, t] : m.params()) {
    (void)name;
    std::fill(t.raw().begin(), t.raw().end(), 0.0);
  }
  Trainer tr(std::move(m), small_cfg());
  const double ppl = tr.validation_perplexity(lab().toks[0]);
  CHECK(ppl == doctest::Approx(static_cast<double>(lab().mcfg.vocab_size)).epsilon(1e-9));
}

TEST_CASE("fresh-init model has perplexity near the vocabulary size") {
  Model m(lab().mcfg, CapacityMode::shared_only, {"aa"}, 3);
  Trainer tr(std::move(m), small_cfg());
  const double ppl = tr.validation_perplexity(lab().toks[0]);
  CHECK(std::fabs(std::log(ppl) - std::log(lab().mcfg.vocab_size)) < 0.2);
}

TEST_CASE("validation perplexity is deterministic under the fixed eval seed") {
  Model m(lab().mcfg, CapacityMode::shared_only, {"aa"}, 3);
  Trainer tr(std::move(m), small_cfg());
  const double p1 = tr.validation_perplexity(lab().toks[0]);
  const double p2 = tr.validation_perplexity(lab().toks[0]);
  CHECK(p1 == p2);

  TrainConfig other = small_cfg();
  other.eval_seed += 1;
  Trainer tr2(tr.model().clone(), other);
  CHECK(tr2.validation_perplexity(lab().toks[0]) != p1);
}

TEST_CASE("empty validation split raises") {
  TokenizedCorpus t;
  t.language = "aa";
  t.seq_len = 4;
  t.train_end = 2;
  t.val_end = 2;
  t.ids.assign(8, BpeModel::kPad);
  t.tag_targets.assign(8, -1);
  Model m(lab().mcfg, CapacityMode::shared_only, {"aa"}, 3);
  Trainer tr(std::move(m), small_cfg());
  CHECK_THROWS_AS(tr.validation_perplexity(t), ConfigError);
}

TEST_CASE("overfitting one repeated sentence drives perplexity toward 1") {
  Corpus c = lab().corpora[0];
  for (auto& s : c.sentences) s = c.sentences[0];
  const TokenizedCorpus tok = tokenize_corpus(c, lab().bpe, 16);

  TransformerConfig mcfg = lab().mcfg;
  mcfg.dropout = 0.0;
  Model m(mcfg, CapacityMode::shared_only, {"aa"}, 3);
  TrainConfig cfg = small_cfg();
  cfg.lr.peak = 5e-3;
  cfg.lr.warmup = 30;
  Trainer tr(std::move(m), cfg);
  std::vector<const TokenizedCorpus*> data = {&tok};
  for (int i = 0; i < 600; ++i) tr.train_step(data);
  const double ppl = tr.validation_perplexity(tok);
  CHECK(ppl > 1.0);
  CHECK(ppl < 1.4);
}

TEST_CASE("per-language running losses account for the total") {
  Model m(lab().mcfg, CapacityMode::shared_only, {"aa", "bb"}, 3);
  TrainConfig cfg = small_cfg();
  cfg.n_epochs = 2;
  cfg.steps_per_epoch = 30;
  Trainer tr(std::move(m), cfg);
  tr.train(both());
  CHECK(tr.step() == 60);

  double weighted = 0.0;
  int64_t batches = 0;
  for (const auto& [lang, stats] : tr.language_stats()) {
    (void)lang;
    REQUIRE(stats.batches > 0);
    const double mean = stats.loss_sum / static_cast<double>(stats.batches);
    weighted += mean * static_cast<double>(stats.batches);
    batches += stats.batches;
  }
  CHECK(batches + tr.skipped_steps() == tr.step());
  CHECK(std::fabs(weighted - tr.total_loss_sum()) < 1e-9);
  // Both languages were actually sampled.
  CHECK(tr.language_stats().count("aa") == 1);
  CHECK(tr.language_stats().count("bb") == 1);
}

TEST_CASE("per-epoch metrics cover validation perplexity per language") {
  Model m(lab().mcfg, CapacityMode::lang_adapter, {"aa", "bb"}, 3);
  TrainConfig cfg = small_cfg();
  cfg.steps_per_epoch = 8;
  const std::string mdir = tmp_dir("metrics");
  Trainer tr(std::move(m), cfg, "bpe-model-text");
  {
    MetricsWriter w(mdir + "/metrics.csv", cfg.run_id);
    tr.train(both(), &w);
  }
  const auto records = read_metrics(mdir + "/metrics.csv");
  int train_rows = 0;
  std::set<std::string> ppl_langs;
  bool saw_skip_counter = false;
  for (const MetricsRecord& r : records) {
    CHECK(r.run_id == cfg.run_id);
    if (r.metric == "train.loss") {
      ++train_rows;
      CHECK((r.language == "aa" || r.language == "bb"));
    } else if (r.metric == "val.perplexity") {
      ppl_langs.insert(r.language);
      CHECK(r.step == 8);
      CHECK(std::isfinite(r.value));
    } else if (r.metric == "train.skipped_steps") {
      saw_skip_counter = true;
      CHECK(r.value == 0.0);
    }
  }
  CHECK(train_rows == 8);
  CHECK(ppl_langs == std::set<std::string>{"aa", "bb"});
  CHECK(saw_skip_counter);
}

TEST_CASE("resumed training continues bit-identically") {
  const std::string dir = tmp_dir("resume");
  TrainConfig cfg = small_cfg();
  cfg.n_epochs = 3;
  cfg.steps_per_epoch = 12;
  cfg.config_digest = "deadbeef";

  // Uninterrupted reference run.
  Trainer a(Model(lab().mcfg, CapacityMode::lang_adapter, {"aa", "bb"}, 3), cfg, "bpe-text");
  {
    MetricsWriter w(dir + "/a.csv", cfg.run_id);
    a.train(both(), &w);
  }
  save_checkpoint(dir + "/a.ckpt", a.to_checkpoint());

  // One epoch, checkpoint, then resume in a fresh trainer.
  Trainer b(Model(lab().mcfg, CapacityMode::lang_adapter, {"aa", "bb"}, 3), cfg, "bpe-text");
  {
    MetricsWriter w(dir + "/b.csv", cfg.run_id);
    b.train_one_epoch(both(), &w);
  }
  save_checkpoint(dir + "/b-epoch1.ckpt", b.to_checkpoint());

  Trainer c(Model(lab().mcfg, CapacityMode::lang_adapter, {"aa", "bb"}, 3), cfg, "");
  c.restore(load_checkpoint(dir + "/b-epoch1.ckpt"));
  CHECK(c.epochs_done() == 1);
  CHECK(c.step() == 12);
  {
    MetricsWriter w(dir + "/b.csv", cfg.run_id);  // appends
    c.train(both(), &w);
  }
  save_checkpoint(dir + "/c.ckpt", c.to_checkpoint());

  CHECK(slurp(dir + "/a.ckpt") == slurp(dir + "/c.ckpt"));
  CHECK(metrics_digest(dir + "/a.csv") == metrics_digest(dir + "/b.csv"));
  CHECK(params_equal(a.model().params(), c.model().params()));
}

TEST_CASE("checkpoints are written per epoch and reload") {
  const std::string dir = tmp_dir("epochs");
  TrainConfig cfg = small_cfg();
  cfg.n_epochs = 2;
  cfg.steps_per_epoch = 6;
  cfg.checkpoint_dir = dir;
  Trainer tr(Model(lab().mcfg, CapacityMode::shared_only, {"aa", "bb"}, 3), cfg, "tok");
  tr.train(both());
  CHECK(std::filesystem::exists(dir + "/epoch-0001.ckpt"));
  CHECK(std::filesystem::exists(dir + "/epoch-0002.ckpt"));
  const Checkpoint ck = load_checkpoint(dir + "/epoch-0002.ckpt");
  CHECK(ck.step == 12);
  CHECK(ck.bpe_text == "tok");
  CHECK(ck.counters.at("epoch") == 2);
}

TEST_CASE("non-finite gradients skip the update and are counted") {
  Model m(lab().mcfg, CapacityMode::shared_only, {"aa"}, 3);
  TrainConfig cfg = small_cfg();
  Trainer tr(std::move(m), cfg);
  for (int i = 0; i < 2; ++i) REQUIRE(tr.train_step(solo()).applied);
  CHECK(tr.skipped_steps() == 0);

  tr.model().params().at("out/bias").raw()[0] = std::nan("");
  const Model snapshot = tr.model().clone();
  for (int i = 0; i < 3; ++i) {
    const StepReport r = tr.train_step(solo());
    CHECK_FALSE(r.applied);
    CHECK_FALSE(std::isfinite(r.loss));
  }
  CHECK(tr.skipped_steps() == 3);
  CHECK(tr.step() == 5);
  CHECK(params_equal(tr.model().params(), snapshot.params()));

  tr.model().params().at("out/bias").raw()[0] = 0.0;
  CHECK(tr.train_step(solo()).applied);
  CHECK(tr.skipped_steps() == 3);
  CHECK(tr.step() == 6);
}

TEST_CASE("restore rejects foreign or incomplete checkpoints") {
  TrainConfig cfg = small_cfg();
  Trainer tr(Model(lab().mcfg, CapacityMode::shared_only, {"aa"}, 3), cfg);
  for (int i = 0; i < 2; ++i) tr.train_step(solo());
  const Checkpoint good = tr.to_checkpoint();

  Trainer fresh(Model(lab().mcfg, CapacityMode::shared_only, {"aa"}, 3), cfg);
  Checkpoint missing = good;
  missing.tensors.erase("param/out/bias");
  CHECK_THROWS_AS(fresh.restore(missing), IoError);

  Checkpoint extra = good;
  extra.tensors["param/bogus"] = Tensor::scalar(1.0);
  CHECK_THROWS_AS(fresh.restore(extra), IoError);

  Checkpoint norng = good;
  norng.rng_states.clear();
  CHECK_THROWS_AS(fresh.restore(norng), IoError);

  TrainConfig strict = cfg;
  strict.config_digest = "aaaa";
  Trainer guarded(Model(lab().mcfg, CapacityMode::shared_only, {"aa"}, 3), strict);
  Checkpoint foreign = good;
  foreign.config_digest = "bbbb";
  CHECK_THROWS_AS(guarded.restore(foreign), ConfigError);
}

TEST_CASE("train config validation") {
  TrainConfig cfg = small_cfg();
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_cfg();
  cfg.mask_prob = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_cfg();
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_cfg();
  cfg.run_id = "bad,id";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_cfg();
  cfg.n_epochs = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("metrics writer appends without repeating the header") {
  const std::string dir = tmp_dir("mwriter");
  const std::string path = dir + "/m.csv";
  {
    MetricsWriter w(path, "run-1");
    w.emit(1, "alpha", 0.5);
    w.emit(2, "beta", "aa", 1.0 / 3.0);
  }
  {
    MetricsWriter w(path, "run-1");
    w.emit(3, "gamma", std::nan(""));
  }
  const auto records = read_metrics(path);
  REQUIRE(records.size() == 3);
  CHECK(records[0].run_id == "run-1");
  CHECK(records[0].metric == "alpha");
  CHECK(records[0].language.empty());
  CHECK(records[1].value == doctest::Approx(1.0 / 3.0).epsilon(1e-16));
  CHECK(records[1].language == "aa");
  CHECK(std::isnan(records[2].value));

  std::ifstream in(path);
  std::string line;
  int headers = 0;
  while (std::getline(in, line)) {
    if (line.rfind("run_id,", 0) == 0) ++headers;
  }
  CHECK(headers == 1);
}

TEST_CASE("metric values round-trip through the text format") {
  for (double v : {1.0 / 3.0, 1e-300, -6.02e23, 0.1, 123456789.123456789}) {
    const std::string s = format_metric_value(v);
    CHECK(std::strtod(s.c_str(), nullptr) == v);
  }
}

TEST_CASE("metrics digest ignores timestamps but not values") {
  const std::string dir = tmp_dir("mdigest");
  auto write = [&](const std::string& name, const std::string& value,
                   const std::string& stamp) {
    std::ofstream out(dir + "/" + name);
    out << "run_id,step,metric,language,value,timestamp\n";
    out << "r,1,m,aa," << value << "," << stamp << "\n";
  };
  write("a.csv", "2.5", "1000");
  write("b.csv", "2.5", "2000");
  write("c.csv", "2.6", "1000");
  CHECK(metrics_digest(dir + "/a.csv") == metrics_digest(dir + "/b.csv"));
  CHECK(metrics_digest(dir + "/a.csv") != metrics_digest(dir + "/c.csv"));
}

TEST_CASE("metrics reader rejects malformed files") {
  const std::string dir = tmp_dir("mbad");
  {
    std::ofstream out(dir + "/short.csv");
    out << "run_id,step,metric,language,value,timestamp\n";
    out << "r,1,m,aa,2.5\n";
  }
  CHECK_THROWS_AS(read_metrics(dir + "/short.csv"), IoError);
  {
    std::ofstream out(dir + "/badhead.csv");
    out << "nope\n";
  }
  CHECK_THROWS_AS(read_metrics(dir + "/badhead.csv"), IoError);
  CHECK_THROWS_AS(read_metrics(dir + "/absent.csv"), IoError);
  {
    std::ofstream out(dir + "/badval.csv");
    out << "run_id,step,metric,language,value,timestamp\n";
    out << "r,1,m,aa,notanumber,5\n";
  }
  CHECK_THROWS_AS(read_metrics(dir + "/badval.csv"), IoError);

  MetricsWriter w(dir + "/ok.csv", "r");
  CHECK_THROWS_AS(w.emit(1, "bad,name", 1.0), ConfigError);
  CHECK_THROWS_AS(w.emit(1, "m", "bad,lang", 1.0), ConfigError);
}
