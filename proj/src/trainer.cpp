#include "xling/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>

namespace xling {

namespace {

constexpr const char* kDataRngName = "train-data";

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.size() >= prefix.size() && std::memcmp(s.data(), prefix.data(), prefix.size()) == 0;
}

}  // namespace

void TrainConfig::validate() const {
  if (n_epochs < 0) throw ConfigError("n_epochs must be nonnegative");
  if (steps_per_epoch < 1) throw ConfigError("steps_per_epoch must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ConfigError("mask_prob must lie in (0,1)");
  if (!(temperature > 0.0)) throw ConfigError("sampling temperature must be positive");
  if (!(lr.peak > 0.0)) throw ConfigError("peak learning rate must be positive");
  if (lr.warmup < 1) throw ConfigError("warmup must be at least 1 step");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (run_id.empty() || run_id.find_first_of(",\n\r") != std::string::npos) {
    throw ConfigError("run_id must be nonempty and comma/newline-free");
  }
  if (max_eval_sentences < 0) throw ConfigError("max_eval_sentences must be nonnegative");
}

Trainer::Trainer(Model model, TrainConfig cfg, std::string bpe_text)
    : cfg_(std::move(cfg)),
      model_(std::move(model)),
      opt_(cfg_.adam),
      bpe_text_(std::move(bpe_text)),
      data_rng_(derive_seed(cfg_.seed, fnv1a(kDataRngName))),
      dropout_{derive_seed(cfg_.seed, fnv1a("dropout")), 0} {
  cfg_.validate();
}

SamplingConfig Trainer::sampling_config(const std::vector<const TokenizedCorpus*>& data) const {
  SamplingConfig sc;
  sc.temperature = cfg_.temperature;
  sc.sizes.reserve(data.size());
  for (const TokenizedCorpus* c : data) sc.sizes.push_back(static_cast<double>(c->train_end));
  return sc;
}

std::pair<IntArray, IntArray> Trainer::batch_arrays(const TokenizedCorpus& data,
                                                    const std::vector<int64_t>& rows,
                                                    const MaskedBatch& masked) {
  const int64_t b = static_cast<int64_t>(rows.size());
  const int64_t t = data.seq_len;
  IntArray inputs, targets;
  inputs.shape = {b, t};
  targets.shape = {b, t};
  inputs.data.assign(masked.inputs.begin(), masked.inputs.end());
  targets.data.assign(masked.targets.begin(), masked.targets.end());
  return {std::move(inputs), std::move(targets)};
}

StepReport Trainer::train_step(const std::vector<const TokenizedCorpus*>& data) {
  if (data.empty()) throw ConfigError("train_step needs at least one corpus");
  const auto sc = sampling_config(data);
  const LangBatch batch = sample_batch(data, sc, cfg_.batch_size, data_rng_);
  const TokenizedCorpus& corpus = *data[static_cast<size_t>(batch.lang_index)];

  std::vector<int> flat;
  flat.reserve(batch.sentence_indices.size() * static_cast<size_t>(corpus.seq_len));
  for (int64_t row : batch.sentence_indices) {
    const int* r = corpus.row(row);
    flat.insert(flat.end(), r, r + corpus.seq_len);
  }
  const MaskedBatch masked =
      mask_for_mlm(flat, cfg_.mask_prob, model_.config().vocab_size, data_rng_);
  auto [inputs, targets] = batch_arrays(corpus, batch.sentence_indices, masked);

  step_ += 1;
  StepReport report;
  report.step = step_;
  report.language = batch.language;
  report.lr = cfg_.lr.at(step_);
  report.loss = std::numeric_limits<double>::quiet_NaN();
  report.applied = false;

  try {
    Tape tape(true);
    const Tensor loss = model_.forward_mlm(tape, inputs, targets, batch.language, &dropout_);
    const double loss_val = loss.item();
    report.loss = loss_val;
    if (!std::isfinite(loss_val)) {
      skipped_ += 1;
      return report;
    }
    GradientMap grads = gradients(tape, loss, model_.params());
    if (!grads_finite(grads)) {
      skipped_ += 1;
      return report;
    }
    clip_gradients(grads, cfg_.clip_norm);
    opt_.step(model_.params(), grads, report.lr);
    report.applied = true;
    loss_sum_ += loss_val;
    auto& stats = lang_stats_[batch.language];
    stats.batches += 1;
    stats.loss_sum += loss_val;
  } catch (const NumericError&) {
    skipped_ += 1;
    report.applied = false;
  }
  return report;
}

void Trainer::train_one_epoch(const std::vector<const TokenizedCorpus*>& data,
                              MetricsWriter* metrics) {
  for (int64_t s = 0; s < cfg_.steps_per_epoch; ++s) {
    const StepReport r = train_step(data);
    if (metrics) metrics->emit(r.step, "train.loss", r.language, r.loss);
  }
  epoch_ += 1;
  for (const TokenizedCorpus* c : data) {
    const double ppl = validation_perplexity(*c);
    if (metrics) metrics->emit(step_, "val.perplexity", c->language, ppl);
  }
  if (metrics) {
    for (const auto& [lang, stats] : lang_stats_) {
      const double mean =
          stats.batches > 0 ? stats.loss_sum / static_cast<double>(stats.batches) : 0.0;
      metrics->emit(step_, "train.running_loss", lang, mean);
    }
    metrics->emit(step_, "train.skipped_steps", static_cast<double>(skipped_));
    metrics->flush();
  }
  assert_routing_isolation(data);
  if (!cfg_.checkpoint_dir.empty()) {
    save_checkpoint(checkpoint_path(epoch_), to_checkpoint());
  }
}

void Trainer::train(const std::vector<const TokenizedCorpus*>& data, MetricsWriter* metrics) {
  while (epoch_ < cfg_.n_epochs) train_one_epoch(data, metrics);
}

double validation_perplexity(const Model& model, const TokenizedCorpus& data, double mask_prob,
                             int batch_size, uint64_t eval_seed, int64_t max_rows,
                             const GateSet* gates) {
  const int64_t begin = data.train_end;
  int64_t n_rows = data.val_end - data.train_end;
  if (n_rows <= 0) {
    throw ConfigError("language '" + data.language + "' has an empty validation split");
  }
  if (max_rows > 0) n_rows = std::min(n_rows, max_rows);

  Rng eval_rng(derive_seed(eval_seed, fnv1a(data.language)));
  double ce_sum = 0.0;
  int64_t n_masked = 0;
  for (int64_t start = 0; start < n_rows; start += batch_size) {
    const int64_t b = std::min<int64_t>(batch_size, n_rows - start);
    std::vector<int> flat;
    flat.reserve(static_cast<size_t>(b * data.seq_len));
    for (int64_t i = 0; i < b; ++i) {
      const int* r = data.row(begin + start + i);
      flat.insert(flat.end(), r, r + data.seq_len);
    }
    const MaskedBatch masked = mask_for_mlm(flat, mask_prob, model.config().vocab_size, eval_rng);
    if (masked.n_masked == 0) continue;
    IntArray inputs, targets;
    inputs.shape = {b, data.seq_len};
    targets.shape = {b, data.seq_len};
    inputs.data.assign(masked.inputs.begin(), masked.inputs.end());
    targets.data.assign(masked.targets.begin(), masked.targets.end());
    Tape tape(false);
    const Tensor loss = model.forward_mlm(tape, inputs, targets, data.language, nullptr, gates);
    ce_sum += loss.item() * static_cast<double>(masked.n_masked);
    n_masked += masked.n_masked;
  }
  if (n_masked == 0) return std::numeric_limits<double>::quiet_NaN();
  return std::exp(ce_sum / static_cast<double>(n_masked));
}

double Trainer::validation_perplexity(const TokenizedCorpus& data) const {
  return xling::validation_perplexity(model_, data, cfg_.mask_prob, cfg_.batch_size,
                                      cfg_.eval_seed, cfg_.max_eval_sentences);
}

void Trainer::assert_routing_isolation(const std::vector<const TokenizedCorpus*>& data) const {
  Rng probe_rng(
      derive_seed(cfg_.seed, fnv1a("probe-isolation"), static_cast<uint64_t>(epoch_)));
  const auto sc = sampling_config(data);
  const int b = std::min(cfg_.batch_size, 2);
  const LangBatch batch = sample_batch(data, sc, b, probe_rng);
  const TokenizedCorpus& corpus = *data[static_cast<size_t>(batch.lang_index)];
  std::vector<int> flat;
  for (int64_t row : batch.sentence_indices) {
    const int* r = corpus.row(row);
    flat.insert(flat.end(), r, r + corpus.seq_len);
  }
  const MaskedBatch masked =
      mask_for_mlm(flat, cfg_.mask_prob, model_.config().vocab_size, probe_rng);
  auto [inputs, targets] = batch_arrays(corpus, batch.sentence_indices, masked);
  Tape tape(true);
  const Tensor loss = model_.forward_mlm(tape, inputs, targets, batch.language, nullptr);
  const GradientMap grads = gradients(tape, loss, model_.params());
  const std::string own = "lang/" + batch.language + "/";
  for (const auto& kv : grads) {
    const std::string& name = kv.first;
    if (starts_with(name, "lang/") && !starts_with(name, own)) {
      throw Error("routing isolation violated: '" + name + "' received gradient from a '" +
                  batch.language + "' batch");
    }
  }
}

std::string Trainer::checkpoint_path(int64_t epoch) const {
  char name[32];
  std::snprintf(name, sizeof name, "epoch-%04lld.ckpt", static_cast<long long>(epoch));
  return cfg_.checkpoint_dir + "/" + name;
}

Checkpoint Trainer::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.config_digest = cfg_.config_digest;
  ckpt.step = step_;
  ckpt.bpe_text = bpe_text_;
  for (const auto& [name, t] : model_.params()) ckpt.tensors["param/" + name] = t.clone();
  for (const auto& [name, t] : opt_.export_state()) ckpt.tensors["opt/" + name] = t;
  ckpt.tensors["stats/loss_sum"] = Tensor::scalar(loss_sum_);
  for (const auto& [lang, stats] : lang_stats_) {
    ckpt.tensors["stats/loss_sum/" + lang] = Tensor::scalar(stats.loss_sum);
    ckpt.counters["batches/" + lang] = static_cast<uint64_t>(stats.batches);
  }
  ckpt.counters["epoch"] = static_cast<uint64_t>(epoch_);
  ckpt.counters["skipped"] = static_cast<uint64_t>(skipped_);
  ckpt.counters["dropout"] = dropout_.counter;
  ckpt.rng_states[kDataRngName] = data_rng_.state();
  return ckpt;
}

void Trainer::restore(const Checkpoint& ckpt) {
  if (!cfg_.config_digest.empty() && !ckpt.config_digest.empty() &&
      ckpt.config_digest != cfg_.config_digest) {
    throw ConfigError("checkpoint was produced by a different configuration (digest " +
                      ckpt.config_digest + ", expected " + cfg_.config_digest + ")");
  }
  // Parameters: exact name and shape agreement both ways.
  std::map<std::string, Tensor> opt_state;
  double loss_sum = 0.0;
  std::map<std::string, LanguageStats> lang_stats;
  for (const auto& [key, t] : ckpt.tensors) {
    if (starts_with(key, "param/")) {
      const std::string name = key.substr(6);
      auto it = model_.params().find(name);
      if (it == model_.params().end()) {
        throw IoError("checkpoint carries unknown parameter '" + name + "'");
      }
      if (it->second.shape() != t.shape()) {
        throw ShapeError("checkpoint parameter '" + name + "' has shape " +
                         shape_str(t.shape()) + ", model expects " +
                         shape_str(it->second.shape()));
      }
    } else if (starts_with(key, "opt/")) {
      opt_state[key.substr(4)] = t.clone();
    } else if (key == "stats/loss_sum") {
      loss_sum = t.item();
    } else if (starts_with(key, "stats/loss_sum/")) {
      lang_stats[key.substr(15)].loss_sum = t.item();
    } else {
      throw IoError("checkpoint carries unrecognized tensor '" + key + "'");
    }
  }
  for (const auto& kv : model_.params()) {
    if (ckpt.tensors.find("param/" + kv.first) == ckpt.tensors.end()) {
      throw IoError("checkpoint is missing parameter '" + kv.first + "'");
    }
  }
  for (auto& [name, p] : model_.params()) {
    const Tensor& src = ckpt.tensors.at("param/" + name);
    p.raw() = src.data();
  }
  opt_ = Adam(cfg_.adam);
  opt_.import_state(opt_state);
  step_ = ckpt.step;
  epoch_ = static_cast<int64_t>(ckpt.counters.count("epoch") ? ckpt.counters.at("epoch") : 0);
  skipped_ =
      static_cast<int64_t>(ckpt.counters.count("skipped") ? ckpt.counters.at("skipped") : 0);
  dropout_.counter = ckpt.counters.count("dropout") ? ckpt.counters.at("dropout") : 0;
  for (const auto& [key, v] : ckpt.counters) {
    if (starts_with(key, "batches/")) {
      lang_stats[key.substr(8)].batches = static_cast<int64_t>(v);
    }
  }
  loss_sum_ = loss_sum;
  lang_stats_ = std::move(lang_stats);
  auto rs = ckpt.rng_states.find(kDataRngName);
  if (rs == ckpt.rng_states.end()) {
    throw IoError("checkpoint is missing the training RNG state");
  }
  data_rng_.set_state(rs->second);
  bpe_text_ = ckpt.bpe_text;
}

}  // namespace xling
