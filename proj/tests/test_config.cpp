#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "xling/common.hpp"
#include "xling/config.hpp"
#include "xling/experiments.hpp"

using namespace xling;
using nlohmann::json;

namespace {

// A minimal valid config as a mutable JSON tree; tests tweak and serialize.
json base_config() {
  return json::parse(R"({
    "name": "unit",
    "seed": 3,
    "out_dir": "runs/unit",
    "family": {"seed": 7, "n_states": 4, "pool_words": 30},
    "languages": [
      {"language": "aa", "seed": 11, "vocab_words": 18, "shared_fraction": 0.5,
       "corpus_size": 120, "min_sentence_len": 3, "max_sentence_len": 6},
      {"language": "bb", "seed": 22, "vocab_words": 18, "shared_fraction": 0.5,
       "corpus_size": 120, "min_sentence_len": 3, "max_sentence_len": 6}
    ],
    "bpe": {"vocab_size": 140},
    "model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ffn": 32,
              "max_seq_len": 12, "dropout": 0.1},
    "runs": [
      {"id": "mono-aa", "languages": ["aa"]},
      {"id": "mono-bb", "languages": ["bb"]},
      {"id": "joint", "languages": ["aa", "bb"]}
    ],
    "pretrain": {"epochs": 2, "steps_per_epoch": 25, "batch_size": 4,
                 "peak_lr": 3e-3, "warmup": 10}
  })");
}

ExperimentConfig parse(const json& j) { return parse_experiment_config(j.dump()); }

std::string error_of(const json& j) {
  try {
    parse(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

bool mentions(const std::string& msg, const std::string& needle) {
  return msg.find(needle) != std::string::npos;
}

}  // namespace

TEST_CASE("config: minimal file parses with documented defaults") {
  const ExperimentConfig cfg = parse(base_config());
  CHECK(cfg.name == "unit");
  CHECK(cfg.seed == 3);
  CHECK(cfg.out_dir == "runs/unit");
  CHECK(cfg.languages.size() == 2);
  CHECK(cfg.languages[0].n_states == 4);  // inherited from the family
  CHECK(cfg.runs.size() == 3);
  CHECK(cfg.runs[0].mode == CapacityMode::shared_only);
  CHECK(cfg.runs[0].trainer == "joint");
  CHECK(cfg.model.vocab_size == 0);  // tokenizer fills this in later
  CHECK(cfg.pretrain.mask_prob == 0.15);
  CHECK(cfg.pretrain.temperature == 2.0);
  CHECK_FALSE(cfg.probes.enabled);
  CHECK_FALSE(cfg.prune.enabled);
  CHECK_FALSE(cfg.eval.enabled);
  CHECK(cfg.prune.lambda_grid == std::vector<double>{1e-4, 1e-3, 1e-2});
  CHECK(cfg.eval.lr_grid == std::vector<double>{3e-4, 1e-3});
  CHECK(cfg.find_run("joint") != nullptr);
  CHECK(cfg.find_run("nope") == nullptr);
  CHECK(cfg.find_language("bb") != nullptr);
}

TEST_CASE("config: digest is deterministic, content-sensitive, and location-free") {
  const ExperimentConfig a = parse(base_config());
  const ExperimentConfig b = parse(base_config());
  CHECK(experiment_digest(a) == experiment_digest(b));
  CHECK(experiment_digest(a).size() == 16);

  json changed = base_config();
  changed["seed"] = 4;
  CHECK(experiment_digest(parse(changed)) != experiment_digest(a));

  // Moving the artifacts elsewhere keeps the experiment's identity.
  json moved = base_config();
  moved["out_dir"] = "elsewhere";
  CHECK(experiment_digest(parse(moved)) == experiment_digest(a));

  // The canonical dump round-trips to the same digest.
  const ExperimentConfig again = parse_experiment_config(canonical_config_json(a));
  CHECK(experiment_digest(again) == experiment_digest(a));
}

TEST_CASE("config: unknown keys are rejected at every depth, all at once") {
  json j = base_config();
  j["bogus"] = 1;
  j["pretrain"]["typo_lr"] = 0.1;
  j["languages"][0]["alphabet"] = "latin";
  j["model"]["n_head"] = 2;

  const std::string msg = error_of(j);
  CHECK(mentions(msg, "4 problems"));
  CHECK(mentions(msg, "bogus: unknown key"));
  CHECK(mentions(msg, "pretrain.typo_lr: unknown key"));
  CHECK(mentions(msg, "languages[0].alphabet: unknown key"));
  CHECK(mentions(msg, "model.n_head: unknown key"));
}

TEST_CASE("config: type and semantic problems are listed exhaustively") {
  json j = base_config();
  j["name"] = "has space!";
  j["model"]["d_model"] = 15;          // not divisible by heads
  j["pretrain"]["epochs"] = 0;
  j["languages"][1]["shared_fraction"] = 1.5;
  j["runs"][2]["languages"] = {"aa", "zz"};

  const std::string msg = error_of(j);
  CHECK(mentions(msg, "name:"));
  CHECK(mentions(msg, "model.d_model"));
  CHECK(mentions(msg, "pretrain.epochs"));
  CHECK(mentions(msg, "languages[1].shared_fraction"));
  CHECK(mentions(msg, "unknown language 'zz'"));

  json t = base_config();
  t["seed"] = "three";
  t["model"]["dropout"] = "high";
  const std::string tmsg = error_of(t);
  CHECK(mentions(tmsg, "seed: expected a non-negative integer"));
  CHECK(mentions(tmsg, "model.dropout: expected a number"));

  CHECK_THROWS_AS(parse_experiment_config("{nope"), ConfigError);
  CHECK_THROWS_AS(parse_experiment_config("[1,2]"), ConfigError);
}

TEST_CASE("config: duplicate ids and vocabulary-size key are rejected") {
  json j = base_config();
  j["runs"][1]["id"] = "mono-aa";
  CHECK(mentions(error_of(j), "duplicate run id 'mono-aa'"));

  json d = base_config();
  d["languages"][1]["language"] = "aa";
  CHECK(mentions(error_of(d), "duplicate language id 'aa'"));

  json v = base_config();
  v["model"]["vocab_size"] = 100;
  CHECK(mentions(error_of(v), "model.vocab_size: derived from the tokenizer"));

  json s = base_config();
  s["languages"][0]["n_states"] = 5;
  CHECK(mentions(error_of(s), "must match family.n_states (4)"));
}

TEST_CASE("config: probe targets are validated against runs") {
  json j = base_config();
  j["probes"] = {{"enabled", true},
                 {"n_probes", 4},
                 {"targets", json::array({{{"run", "ghost"}, {"pairs", json::array({{"aa", "bb"}})}}})}};
  CHECK(mentions(error_of(j), "unknown run 'ghost'"));

  json k = base_config();
  k["probes"] = {{"enabled", true},
                 {"targets", json::array({{{"run", "mono-aa"}, {"pairs", json::array({{"aa", "bb"}})}}})}};
  CHECK(mentions(error_of(k), "language 'bb' is not trained by run 'mono-aa'"));

  json same = base_config();
  same["probes"] = {{"enabled", true},
                    {"targets", json::array({{{"run", "joint"}, {"pairs", json::array({{"aa", "aa"}})}}})}};
  CHECK(mentions(error_of(same), "pair languages must differ"));

  // Disabled stages skip their own validation entirely.
  json off = base_config();
  off["probes"] = {{"enabled", false}, {"targets", json::array()}};
  CHECK(error_of(off) == "");
}

TEST_CASE("config: prune and eval stage constraints") {
  json j = base_config();
  j["prune"] = {{"enabled", true}, {"run", "joint"}, {"emb_group_size", 5}};
  CHECK(mentions(error_of(j), "emb_group_size: must divide model.d_model"));

  json g = base_config();
  g["prune"] = {{"enabled", true}, {"run", "joint"}, {"lambda_grid", json::array()}};
  CHECK(mentions(error_of(g), "lambda_grid: must be nonempty"));

  // Every evaluated language needs its single-language baseline...
  json e = base_config();
  e["runs"] = json::array({json{{"id", "joint"}, {"languages", {"aa", "bb"}}}});
  e["eval"] = {{"enabled", true}};
  const std::string emsg = error_of(e);
  CHECK(mentions(emsg, "language 'aa' needs a single-language baseline run"));
  CHECK(mentions(emsg, "language 'bb' needs a single-language baseline run"));

  // ...and every multilingual run must cover every evaluated language.
  json c = base_config();
  c["languages"].push_back({{"language", "cc"}, {"seed", 33}, {"vocab_words", 18},
                            {"shared_fraction", 0.5}, {"corpus_size", 120},
                            {"min_sentence_len", 3}, {"max_sentence_len", 6}});
  c["runs"].push_back({{"id", "mono-cc"}, {"languages", {"cc"}}});
  c["eval"] = {{"enabled", true}};
  CHECK(mentions(error_of(c), "multilingual run 'joint' does not cover evaluated language 'cc'"));

  // Restricting eval.languages resolves it.
  c["eval"]["languages"] = {"aa", "bb"};
  CHECK(error_of(c) == "");
}

TEST_CASE("config: every shipped experiment template is valid") {
  for (const auto& [name, file] : canned_experiments()) {
    INFO(name << " -> " << file);
    const ExperimentConfig cfg = load_experiment_config(std::string(XLING_CONFIG_DIR) + "/" + file);
    CHECK(cfg.name == name);
    CHECK_FALSE(cfg.out_dir.empty());
    CHECK(cfg.runs.size() >= 1);
  }
  CHECK(canned_experiments().size() == 7);
}

TEST_CASE("stage names parse and order deterministically") {
  CHECK(parse_stages("").empty());
  const std::vector<Stage> s = parse_stages("report,gen-corpus,pretrain,gen-corpus");
  REQUIRE(s.size() == 3);
  CHECK(s[0] == Stage::gen_corpus);
  CHECK(s[1] == Stage::pretrain);
  CHECK(s[2] == Stage::report);
  CHECK(std::string(to_string(Stage::meta_pretrain)) == "meta-pretrain");
  CHECK(stage_from_string("learn-bpe") == Stage::learn_bpe);
  CHECK_THROWS_AS(stage_from_string("train"), ConfigError);
}
