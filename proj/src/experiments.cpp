#include "xling/experiments.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <tuple>

#include "json.hpp"
#include "xling/bpe.hpp"
#include "xling/common.hpp"
#include "xling/corpus.hpp"
#include "xling/meta.hpp"
#include "xling/metrics.hpp"
#include "xling/probes.hpp"
#include "xling/rng.hpp"
#include "xling/serialize.hpp"
#include "xling/task_eval.hpp"
#include "xling/trainer.hpp"

namespace xling {

namespace fs = std::filesystem;

namespace {

constexpr const char* kStageNames[kNumStages] = {
    "gen-corpus", "learn-bpe", "pretrain", "meta-pretrain", "probe", "prune", "eval", "report"};

// ---------------------------------------------------------------------------
// Output-directory ownership: a `.lock` file holding the owner's pid. A
// lock whose process is gone is stale and may be taken over.
// ---------------------------------------------------------------------------

class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    for (int attempt = 0; attempt < 2; ++attempt) {
      const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd >= 0) {
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] ssize_t n = ::write(fd, pid.data(), pid.size());
        ::close(fd);
        held_ = true;
        return;
      }
      // Lock exists: stale (owner dead) locks are reclaimed once.
      std::ifstream in(path_);
      long pid = 0;
      in >> pid;
      if (pid > 0 && fs::exists("/proc/" + std::to_string(pid))) {
        throw ConfigError("output directory " + dir.string() +
                          " is locked by running process " + std::to_string(pid) +
                          "; parallel runs need distinct directories");
      }
      std::error_code ec;
      fs::remove(path_, ec);
    }
    throw IoError("cannot acquire lock file " + path_.string());
  }

  ~DirLock() {
    if (held_) {
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }

  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
  bool held_ = false;
};

// ---------------------------------------------------------------------------
// Run state: the config digest plus the set of completed stages.
// ---------------------------------------------------------------------------

struct RunState {
  std::string digest;
  std::set<std::string> done;
};

void save_state(const fs::path& path, const RunState& state) {
  nlohmann::json j;
  j["digest"] = state.digest;
  j["done"] = std::vector<std::string>(state.done.begin(), state.done.end());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << j.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

RunState load_state(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt state file " + path.string() + ": " + e.what());
  }
  RunState state;
  state.digest = j.value("digest", "");
  for (const auto& s : j.value("done", std::vector<std::string>{})) state.done.insert(s);
  return state;
}

// ---------------------------------------------------------------------------
// Shared context handed to every stage.
// ---------------------------------------------------------------------------

struct Ctx {
  const ExperimentConfig& cfg;
  const RunOptions& opts;
  fs::path out;
  std::string digest;
  RunState state;

  fs::path corpus_dir() const { return out / "corpus"; }
  fs::path bpe_path() const { return out / "bpe.txt"; }
  fs::path metrics_path() const { return out / "metrics.csv"; }
  fs::path state_path() const { return out / "state.json"; }
  fs::path ckpt_dir(const std::string& run) const { return out / "checkpoints" / run; }
  fs::path final_ckpt(const std::string& run) const { return ckpt_dir(run) / "final.ckpt"; }
  fs::path masks_dir() const { return out / "masks"; }
  fs::path eval_dir() const { return out / "eval"; }
  fs::path report_dir() const { return out / "report"; }

  uint64_t stage_seed(const std::string& a, const std::string& b = "") const {
    return b.empty() ? derive_seed(cfg.seed, fnv1a(a))
                     : derive_seed(cfg.seed, fnv1a(a) ^ fnv1a(b));
  }
};

std::string epoch_ckpt_name(int64_t epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "epoch-%04lld.ckpt", static_cast<long long>(epoch));
  return name;
}

// Languages joined as a pair key for metrics rows ('|' cannot appear in an id).
std::string pair_key(const std::string& a, const std::string& b) { return a + "|" + b; }

// ---------------------------------------------------------------------------
// Artifact loading.
// ---------------------------------------------------------------------------

std::vector<Corpus> load_experiment_corpora(const Ctx& ctx) {
  std::vector<Corpus> corpora = load_corpora(ctx.corpus_dir().string());
  // Present them in config order regardless of manifest order.
  std::vector<Corpus> ordered;
  for (const LanguageSpec& spec : ctx.cfg.languages) {
    auto it = std::find_if(corpora.begin(), corpora.end(),
                           [&](const Corpus& c) { return c.language == spec.language; });
    if (it == corpora.end()) {
      throw IoError("corpus directory is missing language '" + spec.language +
                    "'; re-run the gen-corpus stage");
    }
    ordered.push_back(std::move(*it));
  }
  return ordered;
}

struct Materials {
  BpeModel bpe;
  std::string bpe_text;
  std::vector<TokenizedCorpus> toks;  // config language order

  const TokenizedCorpus& tok(const std::string& language) const {
    for (const TokenizedCorpus& t : toks) {
      if (t.language == language) return t;
    }
    throw ConfigError("no corpus for language '" + language + "'");
  }
};

Materials load_materials(const Ctx& ctx) {
  Materials m;
  m.bpe = BpeModel::load(ctx.bpe_path().string());
  m.bpe_text = m.bpe.serialize_text();
  const std::vector<Corpus> corpora = load_experiment_corpora(ctx);
  for (const Corpus& c : corpora) {
    m.toks.push_back(tokenize_corpus(c, m.bpe, ctx.cfg.model.max_seq_len));
  }
  return m;
}

TransformerConfig model_config(const Ctx& ctx, const BpeModel& bpe) {
  TransformerConfig mc = ctx.cfg.model;
  mc.vocab_size = bpe.vocab_size();
  return mc;
}

Model build_model(const Ctx& ctx, const RunSpec& run, const BpeModel& bpe) {
  return Model(model_config(ctx, bpe), run.mode, run.languages,
               ctx.stage_seed("model-init", run.id));
}

// Reconstructs a run's trained model from its final checkpoint, verifying
// the config digest and that the tokenizer on disk matches the one the
// checkpoint was trained with.
Model load_run_model(const Ctx& ctx, const RunSpec& run, const Materials& mat) {
  const fs::path path = ctx.final_ckpt(run.id);
  const Checkpoint ckpt = load_checkpoint(path.string());
  if (!ckpt.config_digest.empty() && ckpt.config_digest != ctx.digest) {
    throw ConfigError("checkpoint " + path.string() + " was produced by config digest " +
                      ckpt.config_digest + ", expected " + ctx.digest);
  }
  if (!ckpt.bpe_text.empty() && fnv1a(ckpt.bpe_text) != fnv1a(mat.bpe_text)) {
    throw ConfigError("checkpoint " + path.string() +
                      " carries a different tokenizer than bpe.txt; artifacts are mixed up");
  }
  Model model = build_model(ctx, run, mat.bpe);
  for (auto& [name, p] : model.params()) {
    auto it = ckpt.tensors.find("param/" + name);
    if (it == ckpt.tensors.end()) {
      throw IoError("checkpoint " + path.string() + " is missing parameter '" + name + "'");
    }
    if (it->second.shape() != p.shape()) {
      throw ShapeError("checkpoint parameter '" + name + "' does not match the model shape");
    }
    p.raw() = it->second.data();
  }
  return model;
}

std::vector<const TokenizedCorpus*> run_data(const Materials& mat, const RunSpec& run) {
  std::vector<const TokenizedCorpus*> data;
  for (const std::string& lang : run.languages) data.push_back(&mat.tok(lang));
  return data;
}

// ---------------------------------------------------------------------------
// Stages.
// ---------------------------------------------------------------------------

void stage_gen_corpus(Ctx& ctx) {
  const FamilyConfig& fam = ctx.cfg.family;
  const FamilyPool pool = make_family_pool(fam.seed, fam.n_states, fam.pool_words);
  std::vector<Corpus> corpora;
  std::vector<uint64_t> seeds;
  for (const LanguageSpec& spec : ctx.cfg.languages) {
    corpora.push_back(generate_language(spec, pool));
    seeds.push_back(spec.seed);
  }
  fs::create_directories(ctx.corpus_dir());
  save_corpora(corpora, seeds, ctx.corpus_dir().string());
}

void stage_learn_bpe(Ctx& ctx) {
  const std::vector<Corpus> corpora = load_experiment_corpora(ctx);
  std::vector<std::string> texts;
  for (const Corpus& c : corpora) texts.push_back(c.train_text());
  const BpeModel bpe = learn_bpe(texts, ctx.cfg.bpe_vocab_size);
  bpe.save(ctx.bpe_path().string());
}

// Trains every run using the given trainer kind ("joint" or "meta").
// Checkpoints land at each epoch boundary; with --resume a run restarts
// from its newest epoch checkpoint and finished runs are skipped.
void stage_pretrain(Ctx& ctx, const std::string& kind) {
  const Materials mat = load_materials(ctx);
  for (const RunSpec& run : ctx.cfg.runs) {
    if (run.trainer != kind) continue;
    if (ctx.opts.resume && fs::exists(ctx.final_ckpt(run.id))) continue;
    fs::create_directories(ctx.ckpt_dir(run.id));

    const std::vector<const TokenizedCorpus*> data = run_data(mat, run);
    const PretrainConfig& p = ctx.cfg.pretrain;
    MetricsWriter metrics(ctx.metrics_path().string(), run.id);

    // Restore point: the newest epoch checkpoint, when resuming.
    int64_t restore_epoch = 0;
    fs::path restore_path;
    if (ctx.opts.resume) {
      for (int64_t e = p.epochs; e >= 1; --e) {
        const fs::path candidate = ctx.ckpt_dir(run.id) / epoch_ckpt_name(e);
        if (fs::exists(candidate)) {
          restore_epoch = e;
          restore_path = candidate;
          break;
        }
      }
    }

    const auto maybe_interrupt = [&](int64_t epochs_done) {
      if (run.id == ctx.opts.interrupt_run && ctx.opts.interrupt_after_epochs > 0 &&
          epochs_done == ctx.opts.interrupt_after_epochs) {
        throw Error("pretraining of run '" + run.id + "' interrupted after epoch " +
                    std::to_string(epochs_done) + " (crash-injection test hook)");
      }
    };

    if (run.trainer == "joint") {
      TrainConfig tc;
      tc.n_epochs = p.epochs;
      tc.steps_per_epoch = p.steps_per_epoch;
      tc.batch_size = p.batch_size;
      tc.mask_prob = p.mask_prob;
      tc.temperature = p.temperature;
      tc.lr.peak = p.peak_lr;
      tc.lr.warmup = p.warmup;
      tc.clip_norm = p.clip_norm;
      tc.seed = ctx.stage_seed("pretrain", run.id);
      tc.max_eval_sentences = p.eval_rows;
      tc.run_id = run.id;
      tc.config_digest = ctx.digest;
      tc.checkpoint_dir = ctx.ckpt_dir(run.id).string();
      Trainer trainer(build_model(ctx, run, mat.bpe), tc, mat.bpe_text);
      if (restore_epoch > 0) trainer.restore(load_checkpoint(restore_path.string()));
      while (trainer.epochs_done() < tc.n_epochs) {
        trainer.train_one_epoch(data, &metrics);
        maybe_interrupt(trainer.epochs_done());
      }
      save_checkpoint(ctx.final_ckpt(run.id).string(), trainer.to_checkpoint());
    } else {
      MetaConfig mc;
      mc.n_epochs = p.epochs;
      mc.steps_per_epoch = p.steps_per_epoch;
      mc.batch_size = p.batch_size;
      mc.val_batch_size = p.val_batch_size;
      mc.mask_prob = p.mask_prob;
      mc.temperature = p.temperature;
      mc.lr.peak = p.peak_lr;
      mc.lr.warmup = p.warmup;
      mc.alpha_scale = p.alpha_scale;
      mc.epsilon = p.epsilon;
      mc.clip_norm = p.clip_norm;
      mc.seed = ctx.stage_seed("pretrain", run.id);
      mc.max_eval_sentences = p.eval_rows;
      mc.run_id = run.id;
      mc.config_digest = ctx.digest;
      mc.checkpoint_dir = ctx.ckpt_dir(run.id).string();
      MetaTrainer trainer(build_model(ctx, run, mat.bpe), mc, mat.bpe_text);
      if (restore_epoch > 0) trainer.restore(load_checkpoint(restore_path.string()));
      while (trainer.epochs_done() < mc.n_epochs) {
        trainer.train_one_epoch(data, &metrics);
        maybe_interrupt(trainer.epochs_done());
      }
      save_checkpoint(ctx.final_ckpt(run.id).string(), trainer.to_checkpoint());
    }
  }
}

// Gradient-similarity probes on final checkpoints. Probe i compares two
// independent same-language batches (keys 2i and 2i+1) per language, and
// one batch per language across each pair (both at key 2i). Series land in
// the metrics stream with the probe index as the step.
void stage_probe(Ctx& ctx) {
  const Materials mat = load_materials(ctx);
  for (const ProbeTarget& target : ctx.cfg.probes.targets) {
    const RunSpec& run = *ctx.cfg.find_run(target.run);
    const Model model = load_run_model(ctx, run, mat);

    GradientProbeConfig gpc;
    gpc.batch_size = ctx.cfg.probes.batch_size;
    gpc.micro_batches = ctx.cfg.probes.micro_batches;
    gpc.mask_prob = ctx.cfg.probes.mask_prob;
    gpc.use_dropout = false;
    gpc.seed = ctx.stage_seed("probe", run.id);

    std::vector<std::string> languages;
    for (const auto& [a, b] : target.pairs) {
      for (const std::string& l : {a, b}) {
        if (std::find(languages.begin(), languages.end(), l) == languages.end()) {
          languages.push_back(l);
        }
      }
    }

    MetricsWriter metrics(ctx.metrics_path().string(), run.id);
    for (int i = 0; i < ctx.cfg.probes.n_probes; ++i) {
      const uint64_t even = 2 * static_cast<uint64_t>(i);
      std::map<std::string, GradientMap> ga, gb;
      for (const std::string& lang : languages) {
        ga[lang] = shared_gradient(model, mat.tok(lang), gpc, even);
        gb[lang] = shared_gradient(model, mat.tok(lang), gpc, even + 1);
        metrics.emit(i, "probe.cosine_within", lang, gradient_cosine(ga[lang], gb[lang]));
      }
      for (const auto& [a, b] : target.pairs) {
        metrics.emit(i, "probe.cosine_cross", pair_key(a, b),
                     gradient_cosine(ga[a], ga[b]));
      }
    }
    metrics.flush();
  }
}

// Structured-mask learning on a frozen checkpoint. The sparsity weight is
// chosen per language from the grid: the sparsest setting whose gated
// perplexity stays within max_ppl_ratio of the ungated model and whose
// expected sparsity reaches min_sparsity (falling back to the perplexity
// constraint alone, then to the gentlest grid entry). Additional
// independent repetitions at the chosen weight feed the within-language
// mask-similarity series.
void stage_prune(Ctx& ctx) {
  const Materials mat = load_materials(ctx);
  const PruneStageConfig& pc = ctx.cfg.prune;
  const RunSpec& run = *ctx.cfg.find_run(pc.run);
  const Model model = load_run_model(ctx, run, mat);
  fs::create_directories(ctx.masks_dir());

  const std::vector<std::string> languages =
      pc.languages.empty() ? run.languages : pc.languages;
  const uint64_t eval_seed = ctx.stage_seed("prune-eval");
  const double total_groups = static_cast<double>(
      mask_shape_for(model.config(), pc.emb_group_size).total());

  MetricsWriter metrics(ctx.metrics_path().string(), pc.run);
  std::map<std::string, std::vector<MaskParams>> learned;  // language → runs

  for (const std::string& lang : languages) {
    const TokenizedCorpus& data = mat.tok(lang);
    const double unmasked =
        validation_perplexity(model, data, pc.mask_prob, pc.eval_batch_size, eval_seed,
                              pc.eval_rows);
    metrics.emit(0, "prune.unmasked_ppl", lang, unmasked);

    MaskLearnConfig mlc;
    mlc.steps = static_cast<int>(pc.steps);
    mlc.batch_size = pc.batch_size;
    mlc.mask_prob = pc.mask_prob;
    mlc.lr = pc.lr;
    mlc.init_pi = pc.init_pi;
    mlc.emb_group_size = static_cast<int>(pc.emb_group_size);

    // Grid search on repetition 0's seed.
    std::vector<MaskParams> grid_masks;
    std::vector<double> ppls, sparsities;
    for (size_t gi = 0; gi < pc.lambda_grid.size(); ++gi) {
      mlc.lambda = pc.lambda_grid[gi];
      mlc.seed = ctx.stage_seed("mask-" + lang, "rep-0");
      grid_masks.push_back(learn_masks(model, data, mlc));
      const GateSet gates = mean_gates(grid_masks.back(), mlc.hc);
      const double masked = validation_perplexity(model, data, pc.mask_prob,
                                                  pc.eval_batch_size, eval_seed,
                                                  pc.eval_rows, &gates);
      const double sparsity = 1.0 - expected_l0(grid_masks.back(), mlc.hc) / total_groups;
      ppls.push_back(masked);
      sparsities.push_back(sparsity);
      const int64_t step = static_cast<int64_t>(gi);
      metrics.emit(step, "prune.grid_lambda", lang, pc.lambda_grid[gi]);
      metrics.emit(step, "prune.grid_masked_ppl", lang, masked);
      metrics.emit(step, "prune.grid_sparsity", lang, sparsity);
    }

    int best = -1;
    for (size_t gi = 0; gi < ppls.size(); ++gi) {
      const bool ok = ppls[gi] <= pc.max_ppl_ratio * unmasked &&
                      sparsities[gi] >= pc.min_sparsity;
      if (ok && (best < 0 || sparsities[gi] >= sparsities[static_cast<size_t>(best)])) {
        best = static_cast<int>(gi);
      }
    }
    const bool feasible = best >= 0;
    if (best < 0) {
      for (size_t gi = 0; gi < ppls.size(); ++gi) {
        const bool ok = ppls[gi] <= pc.max_ppl_ratio * unmasked;
        if (ok && (best < 0 || sparsities[gi] >= sparsities[static_cast<size_t>(best)])) {
          best = static_cast<int>(gi);
        }
      }
    }
    if (best < 0) best = 0;

    metrics.emit(0, "prune.lambda_selected", lang, pc.lambda_grid[static_cast<size_t>(best)]);
    metrics.emit(0, "prune.lambda_feasible", lang, feasible ? 1.0 : 0.0);
    metrics.emit(0, "prune.masked_ppl", lang, ppls[static_cast<size_t>(best)]);
    metrics.emit(0, "prune.sparsity", lang, sparsities[static_cast<size_t>(best)]);

    std::vector<MaskParams>& reps = learned[lang];
    reps.push_back(std::move(grid_masks[static_cast<size_t>(best)]));
    mlc.lambda = pc.lambda_grid[static_cast<size_t>(best)];
    for (int r = 1; r < pc.mask_runs; ++r) {
      mlc.seed = ctx.stage_seed("mask-" + lang, "rep-" + std::to_string(r));
      reps.push_back(learn_masks(model, data, mlc));
      metrics.emit(r, "prune.sparsity_rep", lang,
                   1.0 - expected_l0(reps.back(), mlc.hc) / total_groups);
    }
    for (size_t r = 0; r < reps.size(); ++r) {
      save_mask_params((ctx.masks_dir() / (lang + "-rep" + std::to_string(r) + ".csv")).string(),
                       reps[r]);
    }
  }

  // Similarity series: within-language pairs repetitions 0 and 1;
  // cross-language compares repetition 0 of each language pair.
  for (const std::string& lang : languages) {
    const std::vector<MaskParams>& reps = learned[lang];
    if (reps.size() < 2) continue;
    for (const LayerSimilarity& row : mask_similarity_by_layer(reps[0], reps[1])) {
      metrics.emit(row.layer, std::string("prune.mask_cos_within.") + to_string(row.block),
                   lang, row.cosine);
    }
  }
  for (size_t i = 0; i < languages.size(); ++i) {
    for (size_t j = i + 1; j < languages.size(); ++j) {
      const MaskParams& a = learned[languages[i]][0];
      const MaskParams& b = learned[languages[j]][0];
      for (const LayerSimilarity& row : mask_similarity_by_layer(a, b)) {
        metrics.emit(row.layer, std::string("prune.mask_cos_cross.") + to_string(row.block),
                     pair_key(languages[i], languages[j]), row.cosine);
      }
      if (pc.top_k > 0) {
        const int k = static_cast<int>(
            std::min<int64_t>(pc.top_k, static_cast<int64_t>(total_groups)));
        std::ofstream out(ctx.masks_dir() /
                          ("top_groups_" + languages[i] + "-" + languages[j] + ".csv"));
        out << "rank,layer,block_type,group_id,pi_a,pi_b,norm_a,norm_b,label\n";
        int rank = 0;
        for (const RankedGroup& g : top_k_groups(a, b, k)) {
          out << rank++ << ',' << g.index.layer << ',' << to_string(g.index.block) << ','
              << g.index.group << ',' << format_metric_value(g.pi_a) << ','
              << format_metric_value(g.pi_b) << ',' << format_metric_value(g.norm_a) << ','
              << format_metric_value(g.norm_b) << ',' << g.label << "\n";
        }
      }
    }
  }
  metrics.flush();
}

// Downstream interference grid: single-language runs act as monolingual
// baselines, multi-language runs as the systems under comparison.
void stage_eval(Ctx& ctx) {
  const Materials mat = load_materials(ctx);
  const EvalStageConfig& ev = ctx.cfg.eval;
  fs::create_directories(ctx.eval_dir());

  std::vector<std::string> languages = ev.languages;
  if (languages.empty()) {
    for (const LanguageSpec& s : ctx.cfg.languages) languages.push_back(s.language);
  }

  std::map<std::string, Model> models;
  for (const RunSpec& run : ctx.cfg.runs) {
    models.emplace(run.id, load_run_model(ctx, run, mat));
  }

  InterferenceInputs inputs;
  for (const std::string& lang : languages) {
    for (const RunSpec& run : ctx.cfg.runs) {
      if (run.languages.size() == 1 && run.languages[0] == lang) {
        inputs.monos[lang] = &models.at(run.id);
        break;  // first single-language run wins
      }
    }
  }
  for (const RunSpec& run : ctx.cfg.runs) {
    if (run.languages.size() >= 2) inputs.joints[run.id] = &models.at(run.id);
  }

  std::vector<const TokenizedCorpus*> corpora;
  for (const std::string& lang : languages) corpora.push_back(&mat.tok(lang));

  FinetuneConfig fc;
  fc.epochs = ev.epochs;
  fc.batch_size = ev.batch_size;
  fc.lr_grid = ev.lr_grid;
  fc.tune_language_specific = ev.tune_language_specific;
  fc.seed = ctx.stage_seed("finetune");

  const InterferenceTable table =
      interference_suite(inputs, corpora, fc, ev.mask_prob, ctx.stage_seed("eval-mask"));

  {
    std::ofstream out(ctx.eval_dir() / "interference.csv", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write the interference table");
    out << interference_csv(table);
  }

  // Mirror the table into the metrics stream, one writer per model id.
  std::string open_id;
  std::unique_ptr<MetricsWriter> metrics;
  for (const InterferenceRow& row : table.rows) {
    if (!metrics || row.model_id != open_id) {
      metrics = std::make_unique<MetricsWriter>(ctx.metrics_path().string(), row.model_id);
      open_id = row.model_id;
    }
    const std::string key = pair_key(row.source, row.target);
    metrics->emit(0, "eval.f1", key, row.f1);
    metrics->emit(0, "eval.val_ppl", key, row.val_perplexity);
    metrics->emit(0, "eval.interference", key, row.interference ? 1.0 : 0.0);
  }
  if (metrics) metrics->flush();
}

// ---------------------------------------------------------------------------
// Report: metrics stream → one CSV per analysis. Re-run stages may have
// appended rows twice; the last occurrence of a (run, step, metric,
// language) key wins. Missing metrics leave a header-only file.
// ---------------------------------------------------------------------------

std::vector<MetricsRecord> deduped_records(const Ctx& ctx) {
  if (!fs::exists(ctx.metrics_path())) return {};
  const std::vector<MetricsRecord> raw = read_metrics(ctx.metrics_path().string());
  std::map<std::tuple<std::string, int64_t, std::string, std::string>, size_t> last;
  for (size_t i = 0; i < raw.size(); ++i) {
    last[{raw[i].run_id, raw[i].step, raw[i].metric, raw[i].language}] = i;
  }
  std::vector<size_t> keep;
  for (const auto& [key, idx] : last) keep.push_back(idx);
  std::sort(keep.begin(), keep.end());
  std::vector<MetricsRecord> out;
  for (size_t idx : keep) out.push_back(raw[idx]);
  return out;
}

void write_csv(const fs::path& path, const std::string& header,
               const std::vector<std::string>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << header << "\n";
  for (const std::string& row : rows) out << row << "\n";
}

void stage_report(Ctx& ctx) {
  fs::create_directories(ctx.report_dir());
  const std::vector<MetricsRecord> records = deduped_records(ctx);

  const auto select = [&](const std::string& metric) {
    std::vector<const MetricsRecord*> out;
    for (const MetricsRecord& r : records) {
      if (r.metric == metric) out.push_back(&r);
    }
    return out;
  };
  const auto prefixed = [&](const std::string& prefix) {
    std::vector<const MetricsRecord*> out;
    for (const MetricsRecord& r : records) {
      if (r.metric.rfind(prefix, 0) == 0) out.push_back(&r);
    }
    return out;
  };

  // Validation-perplexity curves.
  {
    std::vector<const MetricsRecord*> rows = select("val.perplexity");
    std::sort(rows.begin(), rows.end(), [](const MetricsRecord* a, const MetricsRecord* b) {
      return std::tie(a->run_id, a->language, a->step) <
             std::tie(b->run_id, b->language, b->step);
    });
    std::vector<std::string> lines;
    for (const MetricsRecord* r : rows) {
      lines.push_back(r->run_id + "," + r->language + "," + std::to_string(r->step) + "," +
                      format_metric_value(r->value));
    }
    write_csv(ctx.report_dir() / "perplexity_curves.csv", "run,language,step,perplexity",
              lines);
  }

  // Gradient-similarity probe series.
  {
    std::vector<std::string> lines;
    std::vector<const MetricsRecord*> rows = select("probe.cosine_within");
    for (const MetricsRecord* r : select("probe.cosine_cross")) rows.push_back(r);
    std::sort(rows.begin(), rows.end(), [](const MetricsRecord* a, const MetricsRecord* b) {
      return std::tie(a->run_id, a->metric, a->language, a->step) <
             std::tie(b->run_id, b->metric, b->language, b->step);
    });
    for (const MetricsRecord* r : rows) {
      const std::string kind = r->metric == "probe.cosine_within" ? "within" : "cross";
      lines.push_back(r->run_id + "," + kind + "," + r->language + "," +
                      std::to_string(r->step) + "," + format_metric_value(r->value));
    }
    write_csv(ctx.report_dir() / "gradient_similarity.csv",
              "run,kind,languages,probe,cosine", lines);
  }

  // Mask similarity by layer.
  {
    std::vector<const MetricsRecord*> rows = prefixed("prune.mask_cos_");
    std::sort(rows.begin(), rows.end(), [](const MetricsRecord* a, const MetricsRecord* b) {
      return std::tie(a->run_id, a->metric, a->language, a->step) <
             std::tie(b->run_id, b->metric, b->language, b->step);
    });
    std::vector<std::string> lines;
    for (const MetricsRecord* r : rows) {
      // prune.mask_cos_within.attention → kind "within", block "attention".
      const std::string tail = r->metric.substr(std::string("prune.mask_cos_").size());
      const size_t dot = tail.find('.');
      const std::string kind = tail.substr(0, dot);
      const std::string block = dot == std::string::npos ? "" : tail.substr(dot + 1);
      lines.push_back(r->run_id + "," + kind + "," + r->language + "," + block + "," +
                      std::to_string(r->step) + "," + format_metric_value(r->value));
    }
    write_csv(ctx.report_dir() / "mask_similarity_by_layer.csv",
              "run,kind,languages,block,layer,cosine", lines);
  }

  // Interference table.
  {
    struct Cell {
      double f1 = std::nan("");
      double ppl = std::nan("");
      double flag = 0.0;
    };
    std::map<std::pair<std::string, std::string>, Cell> cells;
    for (const MetricsRecord* r : select("eval.f1")) cells[{r->run_id, r->language}].f1 = r->value;
    for (const MetricsRecord* r : select("eval.val_ppl")) {
      cells[{r->run_id, r->language}].ppl = r->value;
    }
    for (const MetricsRecord* r : select("eval.interference")) {
      cells[{r->run_id, r->language}].flag = r->value;
    }
    std::vector<std::string> lines;
    for (const auto& [key, cell] : cells) {
      const std::string& pair = key.second;
      const size_t bar = pair.find('|');
      const std::string source = pair.substr(0, bar);
      const std::string target = bar == std::string::npos ? source : pair.substr(bar + 1);
      const std::string setting = source == target ? "within_language" : "zero_shot";
      lines.push_back(key.first + "," + setting + "," + source + "," + target + "," +
                      format_metric_value(cell.f1) + "," + format_metric_value(cell.ppl) + "," +
                      (cell.flag != 0.0 ? "1" : "0"));
    }
    write_csv(ctx.report_dir() / "interference.csv",
              "model,setting,source,target,f1,val_perplexity,interference", lines);
  }

  // Headline summary.
  {
    std::vector<std::string> lines;
    const auto add = [&](const std::string& section, const std::string& run,
                         const std::string& languages, const std::string& item, double value) {
      lines.push_back(section + "," + run + "," + languages + "," + item + "," +
                      format_metric_value(value));
    };

    // Final perplexity per (run, language): the highest-step row.
    std::map<std::pair<std::string, std::string>, const MetricsRecord*> final_ppl;
    for (const MetricsRecord* r : select("val.perplexity")) {
      auto& slot = final_ppl[{r->run_id, r->language}];
      if (slot == nullptr || r->step > slot->step) slot = r;
    }
    for (const auto& [key, r] : final_ppl) {
      add("perplexity", key.first, key.second, "final_val_ppl", r->value);
    }

    // Mean probe cosines, undefined-similarity rows excluded.
    for (const char* metric : {"probe.cosine_within", "probe.cosine_cross"}) {
      std::map<std::pair<std::string, std::string>, std::pair<double, int64_t>> acc;
      for (const MetricsRecord* r : select(metric)) {
        if (std::isnan(r->value)) continue;
        auto& slot = acc[{r->run_id, r->language}];
        slot.first += r->value;
        slot.second += 1;
      }
      const std::string item = std::string(metric) == "probe.cosine_within"
                                   ? "mean_cosine_within"
                                   : "mean_cosine_cross";
      for (const auto& [key, sum_n] : acc) {
        if (sum_n.second > 0) {
          add("probes", key.first, key.second, item, sum_n.first / sum_n.second);
        }
      }
    }

    // Chosen sparsity settings.
    for (const char* metric : {"prune.lambda_selected", "prune.sparsity", "prune.masked_ppl",
                               "prune.unmasked_ppl"}) {
      for (const MetricsRecord* r : select(metric)) {
        add("pruning", r->run_id, r->language, r->metric.substr(6), r->value);
      }
    }

    // Interference flags per model.
    std::map<std::string, double> flags;
    for (const MetricsRecord* r : select("eval.interference")) flags[r->run_id] += r->value;
    for (const auto& [run, n] : flags) add("eval", run, "", "interference_flags", n);

    write_csv(ctx.report_dir() / "summary.csv", "section,run,languages,item,value", lines);
  }
}

// ---------------------------------------------------------------------------
// Orchestration.
// ---------------------------------------------------------------------------

// The stages an invocation will consider, in pipeline order.
std::vector<Stage> selected_stages(const RunOptions& opts) {
  std::vector<Stage> stages = opts.stages;
  if (stages.empty()) {
    for (int i = 0; i < kNumStages; ++i) stages.push_back(static_cast<Stage>(i));
  }
  std::sort(stages.begin(), stages.end());
  stages.erase(std::unique(stages.begin(), stages.end()), stages.end());
  return stages;
}

bool stage_enabled(const ExperimentConfig& cfg, Stage s) {
  switch (s) {
    case Stage::pretrain:
      return std::any_of(cfg.runs.begin(), cfg.runs.end(),
                         [](const RunSpec& r) { return r.trainer == "joint"; });
    case Stage::meta_pretrain:
      return std::any_of(cfg.runs.begin(), cfg.runs.end(),
                         [](const RunSpec& r) { return r.trainer == "meta"; });
    case Stage::probe:
      return cfg.probes.enabled;
    case Stage::prune:
      return cfg.prune.enabled;
    case Stage::eval:
      return cfg.eval.enabled;
    default:
      return true;
  }
}

// Input requirements, satisfied either by an earlier selected stage or by
// artifacts already on disk. Reported exhaustively before any work runs.
void preflight(const Ctx& ctx, const std::vector<Stage>& stages, bool explicit_selection) {
  std::vector<std::string> errors;
  std::set<Stage> planned;
  for (Stage s : stages) planned.insert(s);

  const auto corpus_ready = [&] {
    return planned.count(Stage::gen_corpus) || fs::exists(ctx.corpus_dir() / "manifest.json");
  };
  const auto bpe_ready = [&] { return planned.count(Stage::learn_bpe) || fs::exists(ctx.bpe_path()); };
  const auto run_ready = [&](const std::string& id) {
    const RunSpec* run = ctx.cfg.find_run(id);
    if (run == nullptr) return false;
    const Stage trains = run->trainer == "meta" ? Stage::meta_pretrain : Stage::pretrain;
    return planned.count(trains) || fs::exists(ctx.final_ckpt(id));
  };

  for (Stage s : stages) {
    if (explicit_selection && !stage_enabled(ctx.cfg, s)) {
      if (s == Stage::probe || s == Stage::prune || s == Stage::eval) {
        errors.push_back(std::string(to_string(s)) + ": stage is disabled in the config");
      } else if (s == Stage::pretrain || s == Stage::meta_pretrain) {
        errors.push_back(std::string(to_string(s)) + ": no run uses this trainer");
      }
      continue;
    }
    if (!stage_enabled(ctx.cfg, s)) continue;
    switch (s) {
      case Stage::learn_bpe:
        if (!corpus_ready()) {
          errors.push_back("learn-bpe: corpora missing; run the gen-corpus stage first");
        }
        break;
      case Stage::pretrain:
      case Stage::meta_pretrain:
        if (!corpus_ready()) {
          errors.push_back(std::string(to_string(s)) +
                           ": corpora missing; run the gen-corpus stage first");
        }
        if (!bpe_ready()) {
          errors.push_back(std::string(to_string(s)) +
                           ": tokenizer missing; run the learn-bpe stage first");
        }
        break;
      case Stage::probe:
        for (const ProbeTarget& t : ctx.cfg.probes.targets) {
          if (!run_ready(t.run)) {
            errors.push_back("probe: run '" + t.run +
                             "' has no final checkpoint; pretrain it first");
          }
        }
        break;
      case Stage::prune:
        if (!run_ready(ctx.cfg.prune.run)) {
          errors.push_back("prune: run '" + ctx.cfg.prune.run +
                           "' has no final checkpoint; pretrain it first");
        }
        break;
      case Stage::eval:
        for (const RunSpec& run : ctx.cfg.runs) {
          if (!run_ready(run.id)) {
            errors.push_back("eval: run '" + run.id +
                             "' has no final checkpoint; pretrain it first");
          }
        }
        break;
      default:
        break;
    }
    if ((s == Stage::probe || s == Stage::prune || s == Stage::eval) && !corpus_ready()) {
      errors.push_back(std::string(to_string(s)) + ": corpora missing");
    }
    if ((s == Stage::probe || s == Stage::prune || s == Stage::eval) && !bpe_ready()) {
      errors.push_back(std::string(to_string(s)) + ": tokenizer missing");
    }
  }

  if (!errors.empty()) {
    std::sort(errors.begin(), errors.end());
    errors.erase(std::unique(errors.begin(), errors.end()), errors.end());
    std::ostringstream msg;
    msg << "cannot start (" << errors.size() << " problem" << (errors.size() == 1 ? "" : "s")
        << "):";
    for (const std::string& e : errors) msg << "\n  - " << e;
    throw ConfigError(msg.str());
  }
}

}  // namespace

const char* to_string(Stage s) { return kStageNames[static_cast<int>(s)]; }

Stage stage_from_string(const std::string& name) {
  for (int i = 0; i < kNumStages; ++i) {
    if (name == kStageNames[i]) return static_cast<Stage>(i);
  }
  std::string known;
  for (int i = 0; i < kNumStages; ++i) {
    known += std::string(i ? ", " : "") + kStageNames[i];
  }
  throw ConfigError("unknown stage '" + name + "' (stages: " + known + ")");
}

std::vector<Stage> parse_stages(const std::string& csv) {
  std::vector<Stage> stages;
  if (csv.empty()) return stages;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) stages.push_back(stage_from_string(item));
  }
  std::sort(stages.begin(), stages.end());
  stages.erase(std::unique(stages.begin(), stages.end()), stages.end());
  return stages;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  if (cfg.out_dir.empty()) {
    throw ConfigError("no output directory: set out_dir in the config, pass --out, "
                      "or set XLING_OUT");
  }

  Ctx ctx{cfg, opts, fs::path(cfg.out_dir), experiment_digest(cfg), {}};
  fs::create_directories(ctx.out);
  DirLock lock(ctx.out);

  // State bookkeeping: an existing directory must belong to this very
  // experiment; stage invocations into it are additive.
  if (fs::exists(ctx.state_path())) {
    ctx.state = load_state(ctx.state_path());
    if (ctx.state.digest != ctx.digest) {
      throw ConfigError("output directory " + ctx.out.string() +
                        " belongs to config digest " + ctx.state.digest + ", not " + ctx.digest +
                        "; choose a fresh directory");
    }
  } else {
    ctx.state.digest = ctx.digest;
    std::ofstream out(ctx.out / "config.json", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write config.json under " + ctx.out.string());
    out << canonical_config_json(cfg);
  }

  const std::vector<Stage> stages = selected_stages(opts);
  preflight(ctx, stages, !opts.stages.empty());

  ExperimentResult result;
  result.out_dir = ctx.out.string();
  result.digest = ctx.digest;

  for (Stage s : stages) {
    if (!stage_enabled(cfg, s)) {
      result.stages_skipped.push_back(to_string(s));
      continue;
    }
    if (opts.resume && ctx.state.done.count(to_string(s)) &&
        !(s == Stage::report)) {  // reports are cheap and always refreshed
      result.stages_skipped.push_back(to_string(s));
      continue;
    }
    switch (s) {
      case Stage::gen_corpus:
        stage_gen_corpus(ctx);
        break;
      case Stage::learn_bpe:
        stage_learn_bpe(ctx);
        break;
      case Stage::pretrain:
        stage_pretrain(ctx, "joint");
        break;
      case Stage::meta_pretrain:
        stage_pretrain(ctx, "meta");
        break;
      case Stage::probe:
        stage_probe(ctx);
        break;
      case Stage::prune:
        stage_prune(ctx);
        break;
      case Stage::eval:
        stage_eval(ctx);
        break;
      case Stage::report:
        stage_report(ctx);
        break;
    }
    result.stages_run.push_back(to_string(s));
    ctx.state.done.insert(to_string(s));
    save_state(ctx.state_path(), ctx.state);
  }
  return result;
}

std::vector<std::pair<std::string, std::string>> canned_experiments() {
  return {
      {"interference-pair", "interference_pair.json"},
      {"corpus-size-ablation", "corpus_size_ablation.json"},
      {"similarity-ablation", "similarity_ablation.json"},
      {"trilingual", "trilingual.json"},
      {"gradient-probe", "gradient_probe.json"},
      {"pruning-analysis", "pruning_analysis.json"},
      {"capacity-mode-sweep", "capacity_mode_sweep.json"},
  };
}

}  // namespace xling
