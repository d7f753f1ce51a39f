#include "xling/meta.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace xling {

namespace {

constexpr const char* kDataRngName = "meta-data";

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}

std::map<std::string, std::vector<double>> snapshot(const ParamMap& params) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, t] : params) out[name] = t.data();
  return out;
}

void write_values(ParamMap& params, const std::map<std::string, std::vector<double>>& values) {
  for (auto& [name, t] : params) t.raw() = values.at(name);
}

// Restores θ on every exit path; hypergrad_fd perturbs θ in place.
struct ThetaGuard {
  ParamMap& params;
  std::map<std::string, std::vector<double>> saved;
  explicit ThetaGuard(ParamMap& p) : params(p), saved(snapshot(p)) {}
  ~ThetaGuard() { write_values(params, saved); }
};

// params ← base + c·dir for every name dir covers; other names ← base.
void write_offset(ParamMap& params, const std::map<std::string, std::vector<double>>& base,
                  const GradientMap& dir, double c) {
  for (auto& [name, t] : params) {
    auto& dst = t.raw();
    dst = base.at(name);
    auto it = dir.find(name);
    if (it == dir.end()) continue;
    const auto& d = it->second.data();
    for (size_t k = 0; k < dst.size(); ++k) dst[k] += c * d[k];
  }
}

void check_finite(const GradientMap& grads, const std::string& what) {
  if (!grads_finite(grads)) throw NumericError(what + " contains a non-finite value");
}

double value_norm(const GradientMap& grads) { return global_grad_norm(grads); }

}  // namespace

ParamMap lookahead_theta(BilevelProblem& prob, const std::string& lang, uint64_t key,
                         double beta, double* train_loss_out) {
  ParamMap& theta = prob.theta();
  Tape tape(true);
  const Tensor loss = prob.train_loss(tape, lang, key);
  const double loss_val = loss.item();
  if (!std::isfinite(loss_val)) throw NumericError("lookahead train loss is non-finite");
  if (train_loss_out) *train_loss_out = loss_val;
  const GradientMap g = gradients(tape, loss, theta);
  check_finite(g, "lookahead gradient");
  ParamMap ahead;
  for (const auto& [name, t] : theta) {
    Tensor next = t.clone();
    auto it = g.find(name);
    if (it != g.end()) {
      auto& dst = next.raw();
      const auto& gd = it->second.data();
      for (size_t k = 0; k < dst.size(); ++k) dst[k] -= beta * gd[k];
    }
    ahead.emplace(name, std::move(next));
  }
  return ahead;
}

Hypergrad hypergrad_fd(BilevelProblem& prob, const std::string& lang, uint64_t train_key,
                       uint64_t val_key, const HypergradConfig& cfg) {
  ParamMap& theta = prob.theta();
  ParamMap& phi_i = prob.phi(lang);
  const auto& langs = prob.languages();
  Hypergrad out;

  ThetaGuard guard(theta);

  // Lookahead gradient at (θ, φ_i) and the in-place move to θ′.
  GradientMap train_grad;
  {
    Tape tape(true);
    const Tensor loss = prob.train_loss(tape, lang, train_key);
    out.train_loss = loss.item();
    if (!std::isfinite(out.train_loss)) throw NumericError("train loss is non-finite");
    train_grad = gradients(tape, loss, theta);
    check_finite(train_grad, "lookahead gradient");
  }
  write_offset(theta, guard.saved, train_grad, -cfg.beta);

  // Mean validation loss at θ′ over all languages, on one tape: gives both
  // v = ∇_{θ′} and the direct φ_i term.
  GradientMap v;
  GradientMap direct;
  {
    ParamMap joint = theta;
    for (const auto& [name, t] : phi_i) joint.emplace(name, t);
    Tape tape(true);
    Tensor total;
    for (const auto& l : langs) {
      const Tensor lv = prob.val_loss(tape, l, val_key);
      out.val_losses[l] = lv.item();
      if (!std::isfinite(out.val_losses[l])) {
        throw NumericError("validation loss for '" + l + "' is non-finite");
      }
      total = total.defined() ? add(tape, total, lv) : lv;
    }
    total = scale(tape, total, 1.0 / static_cast<double>(langs.size()));
    GradientMap joint_grad = gradients(tape, total, joint);
    check_finite(joint_grad, "validation gradient");
    for (auto& [name, g] : joint_grad) {
      if (theta.count(name)) {
        v.emplace(name, std::move(g));
      } else {
        direct.emplace(name, std::move(g));
      }
    }
  }

  // Second-order term by central differences along v, at the original θ.
  const double v_norm = value_norm(v);
  GradientMap second;
  if (v_norm > 0.0) {
    out.epsilon = cfg.epsilon > 0.0 ? cfg.epsilon : 0.01 / v_norm;
    GradientMap plus, minus;
    write_offset(theta, guard.saved, v, out.epsilon);
    {
      Tape tape(true);
      const Tensor loss = prob.train_loss(tape, lang, train_key);
      if (!std::isfinite(loss.item())) throw NumericError("train loss at θ+ is non-finite");
      plus = gradients(tape, loss, phi_i);
    }
    write_offset(theta, guard.saved, v, -out.epsilon);
    {
      Tape tape(true);
      const Tensor loss = prob.train_loss(tape, lang, train_key);
      if (!std::isfinite(loss.item())) throw NumericError("train loss at θ- is non-finite");
      minus = gradients(tape, loss, phi_i);
    }
    const double c = -cfg.beta / (2.0 * out.epsilon);
    for (const auto& [name, t] : phi_i) {
      const auto ip = plus.find(name);
      const auto im = minus.find(name);
      if (ip == plus.end() && im == minus.end()) continue;
      Tensor g = Tensor::zeros(t.shape());
      auto& gd = g.raw();
      if (ip != plus.end()) {
        const auto& pd = ip->second.data();
        for (size_t k = 0; k < gd.size(); ++k) gd[k] += c * pd[k];
      }
      if (im != minus.end()) {
        const auto& md = im->second.data();
        for (size_t k = 0; k < gd.size(); ++k) gd[k] -= c * md[k];
      }
      second.emplace(name, std::move(g));
    }
    check_finite(second, "second-order term");
  }

  out.direct_norm = value_norm(direct);
  out.second_norm = value_norm(second);

  // Assemble: every φ_i tensor gets an entry (zero where no signal).
  for (const auto& [name, t] : phi_i) {
    Tensor g = Tensor::zeros(t.shape());
    auto& gd = g.raw();
    if (cfg.include_direct) {
      auto it = direct.find(name);
      if (it != direct.end()) {
        const auto& dd = it->second.data();
        for (size_t k = 0; k < gd.size(); ++k) gd[k] += dd[k];
      }
    }
    auto is = second.find(name);
    if (is != second.end()) {
      const auto& sd = is->second.data();
      for (size_t k = 0; k < gd.size(); ++k) gd[k] += sd[k];
    }
    out.grad.emplace(name, std::move(g));
  }
  check_finite(out.grad, "hypergradient");
  return out;
}

// ---------------------------------------------------------------------------
// MlmBilevel
// ---------------------------------------------------------------------------

MlmBilevel::MlmBilevel(Model& model, std::vector<const TokenizedCorpus*> data, int batch_size,
                       int val_batch_size, double mask_prob, uint64_t seed)
    : model_(model),
      data_(std::move(data)),
      batch_size_(batch_size),
      val_batch_size_(val_batch_size),
      mask_prob_(mask_prob),
      seed_(seed) {
  if (data_.empty()) throw ConfigError("bilevel problem needs at least one corpus");
  for (const TokenizedCorpus* c : data_) {
    langs_.push_back(c->language);
    if (!model_.has_language(c->language)) {
      throw ConfigError("model does not route language '" + c->language + "'");
    }
  }
  parts_ = model_.partition();
}

ParamMap& MlmBilevel::phi(const std::string& lang) {
  auto it = parts_.phi.find(lang);
  if (it == parts_.phi.end()) {
    throw ConfigError("no language-specific parameters for '" + lang + "'");
  }
  return it->second;
}

const TokenizedCorpus& MlmBilevel::corpus(const std::string& lang) const {
  for (const TokenizedCorpus* c : data_) {
    if (c->language == lang) return *c;
  }
  throw ConfigError("no corpus for language '" + lang + "'");
}

Tensor MlmBilevel::loss_on_rows(Tape& t, const TokenizedCorpus& data,
                                const std::vector<int64_t>& rows, Rng& mask_rng,
                                CounterStream* dropout) {
  std::vector<int> flat;
  flat.reserve(rows.size() * static_cast<size_t>(data.seq_len));
  for (int64_t row : rows) {
    const int* r = data.row(row);
    flat.insert(flat.end(), r, r + data.seq_len);
  }
  const MaskedBatch masked = mask_for_mlm(flat, mask_prob_, model_.config().vocab_size, mask_rng);
  IntArray inputs, targets;
  inputs.shape = {static_cast<int64_t>(rows.size()), data.seq_len};
  targets.shape = inputs.shape;
  inputs.data.assign(masked.inputs.begin(), masked.inputs.end());
  targets.data.assign(masked.targets.begin(), masked.targets.end());
  return model_.forward_mlm(t, inputs, targets, data.language, dropout);
}

Tensor MlmBilevel::train_loss(Tape& t, const std::string& lang, uint64_t key) {
  const TokenizedCorpus& data = corpus(lang);
  if (data.train_end <= 0) {
    throw ConfigError("language '" + lang + "' has an empty train split");
  }
  Rng rng(derive_seed(seed_, fnv1a(lang) ^ fnv1a("meta-train"), key));
  std::vector<int64_t> rows;
  rows.reserve(static_cast<size_t>(batch_size_));
  for (int i = 0; i < batch_size_; ++i) {
    rows.push_back(static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(data.train_end))));
  }
  CounterStream stream{derive_seed(seed_, fnv1a(lang) ^ fnv1a("meta-dropout"), key), 0};
  return loss_on_rows(t, data, rows, rng, &stream);
}

Tensor MlmBilevel::val_loss(Tape& t, const std::string& lang, uint64_t key) {
  const TokenizedCorpus& data = corpus(lang);
  const int64_t n_val = data.val_end - data.train_end;
  if (n_val <= 0) {
    throw ConfigError("language '" + lang + "' has an empty validation split");
  }
  std::vector<int64_t> rows;
  rows.reserve(static_cast<size_t>(val_batch_size_));
  const int64_t start =
      static_cast<int64_t>((key * static_cast<uint64_t>(val_batch_size_)) %
                           static_cast<uint64_t>(n_val));
  for (int i = 0; i < val_batch_size_; ++i) {
    rows.push_back(data.train_end + (start + i) % n_val);
  }
  Rng rng(derive_seed(seed_, fnv1a(lang) ^ fnv1a("meta-val"), key));
  return loss_on_rows(t, data, rows, rng, nullptr);
}

// ---------------------------------------------------------------------------
// MetaTrainer
// ---------------------------------------------------------------------------

void MetaConfig::validate() const {
  if (n_epochs < 0) throw ConfigError("n_epochs must be nonnegative");
  if (steps_per_epoch < 1) throw ConfigError("steps_per_epoch must be at least 1");
  if (batch_size < 1 || val_batch_size < 1) throw ConfigError("batch sizes must be at least 1");
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ConfigError("mask_prob must lie in (0,1)");
  if (!(temperature > 0.0)) throw ConfigError("sampling temperature must be positive");
  if (!(lr.peak > 0.0)) throw ConfigError("peak learning rate must be positive");
  if (lr.warmup < 1) throw ConfigError("warmup must be at least 1 step");
  if (alpha_scale < 0.0) throw ConfigError("alpha_scale must be nonnegative");
  if (epsilon < 0.0) throw ConfigError("epsilon must be nonnegative (0 selects the norm rule)");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (run_id.empty() || run_id.find_first_of(",\n\r") != std::string::npos) {
    throw ConfigError("run_id must be nonempty and comma/newline-free");
  }
  if (max_eval_sentences < 0) throw ConfigError("max_eval_sentences must be nonnegative");
}

MetaTrainer::MetaTrainer(Model model, MetaConfig cfg, std::string bpe_text)
    : cfg_(std::move(cfg)),
      model_(std::move(model)),
      opt_theta_(cfg_.adam),
      opt_phi_(cfg_.adam),
      bpe_text_(std::move(bpe_text)),
      data_rng_(derive_seed(cfg_.seed, fnv1a(kDataRngName))) {
  cfg_.validate();
  if (model_.languages().empty()) {
    throw ConfigError("meta-training needs a model with registered languages");
  }
}

MetaStepReport MetaTrainer::meta_step(const std::vector<const TokenizedCorpus*>& data) {
  if (data.empty()) throw ConfigError("meta_step needs at least one corpus");
  MlmBilevel prob(model_, data, cfg_.batch_size, cfg_.val_batch_size, cfg_.mask_prob, cfg_.seed);
  SamplingConfig sc;
  sc.temperature = cfg_.temperature;
  for (const TokenizedCorpus* c : data) sc.sizes.push_back(static_cast<double>(c->train_end));

  step_ += 1;
  MetaStepReport report;
  report.step = step_;
  const double beta = cfg_.lr.at(step_);
  const double alpha = cfg_.alpha_scale * beta;
  report.lr_beta = beta;
  report.lr_alpha = alpha;

  const int i = sample_language(sc, data_rng_);
  report.language = data[static_cast<size_t>(i)]->language;
  const int j = sample_language(sc, data_rng_);
  report.phase2_language = data[static_cast<size_t>(j)]->language;
  const uint64_t key1 = 2 * static_cast<uint64_t>(step_);
  const uint64_t key2 = key1 + 1;

  try {
    // Phase one: move φ_i along its hypergradient.
    HypergradConfig hc;
    hc.beta = beta;
    hc.epsilon = cfg_.epsilon;
    hc.include_direct = cfg_.include_direct;
    Hypergrad hg =
        hypergrad_fd(prob, report.language, key1, static_cast<uint64_t>(step_), hc);
    report.train_loss = hg.train_loss;
    report.val_losses = hg.val_losses;
    report.direct_norm = hg.direct_norm;
    report.second_norm = hg.second_norm;
    report.epsilon = hg.epsilon;
    clip_gradients(hg.grad, cfg_.clip_norm);
    ParamMap& phi_i = prob.phi(report.language);
    if (cfg_.sgd_phases) {
      for (auto& [name, p] : phi_i) {
        auto it = hg.grad.find(name);
        if (it == hg.grad.end()) continue;
        auto& pd = p.raw();
        const auto& gd = it->second.data();
        for (size_t k = 0; k < pd.size(); ++k) pd[k] -= alpha * gd[k];
      }
    } else {
      opt_phi_.step(phi_i, hg.grad, alpha);
    }

    // Phase two: θ moves on a freshly sampled batch at φ^{t+1}.
    Tape tape(true);
    const Tensor loss = prob.train_loss(tape, report.phase2_language, key2);
    report.phase2_loss = loss.item();
    if (!std::isfinite(report.phase2_loss)) {
      throw NumericError("phase-two train loss is non-finite");
    }
    GradientMap g = gradients(tape, loss, prob.theta());
    if (!grads_finite(g)) throw NumericError("phase-two gradient is non-finite");
    clip_gradients(g, cfg_.clip_norm);
    if (cfg_.sgd_phases) {
      for (auto& [name, p] : prob.theta()) {
        auto it = g.find(name);
        if (it == g.end()) continue;
        auto& pd = p.raw();
        const auto& gd = it->second.data();
        for (size_t k = 0; k < pd.size(); ++k) pd[k] -= beta * gd[k];
      }
    } else {
      opt_theta_.step(prob.theta(), g, beta);
    }
    report.applied = true;
    loss_sum_ += report.phase2_loss;
    auto& stats = lang_stats_[report.phase2_language];
    stats.batches += 1;
    stats.loss_sum += report.phase2_loss;
  } catch (const NumericError&) {
    skipped_ += 1;
    report.applied = false;
  }
  return report;
}

void MetaTrainer::train_one_epoch(const std::vector<const TokenizedCorpus*>& data,
                                  MetricsWriter* metrics) {
  for (int64_t s = 0; s < cfg_.steps_per_epoch; ++s) {
    const MetaStepReport r = meta_step(data);
    if (metrics) {
      metrics->emit(r.step, "train.loss", r.phase2_language, r.phase2_loss);
      metrics->emit(r.step, "meta.train_loss", r.language, r.train_loss);
      metrics->emit(r.step, "meta.direct_norm", r.direct_norm);
      metrics->emit(r.step, "meta.second_norm", r.second_norm);
      metrics->emit(r.step, "meta.epsilon", r.epsilon);
    }
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
  if (!cfg_.checkpoint_dir.empty()) {
    save_checkpoint(checkpoint_path(epoch_), to_checkpoint());
  }
}

void MetaTrainer::train(const std::vector<const TokenizedCorpus*>& data,
                        MetricsWriter* metrics) {
  while (epoch_ < cfg_.n_epochs) train_one_epoch(data, metrics);
}

double MetaTrainer::validation_perplexity(const TokenizedCorpus& data) const {
  return xling::validation_perplexity(model_, data, cfg_.mask_prob, cfg_.batch_size,
                                      cfg_.eval_seed, cfg_.max_eval_sentences);
}

std::string MetaTrainer::checkpoint_path(int64_t epoch) const {
  char name[32];
  std::snprintf(name, sizeof name, "epoch-%04lld.ckpt", static_cast<long long>(epoch));
  return cfg_.checkpoint_dir + "/" + name;
}

Checkpoint MetaTrainer::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.config_digest = cfg_.config_digest;
  ckpt.step = step_;
  ckpt.bpe_text = bpe_text_;
  for (const auto& [name, t] : model_.params()) ckpt.tensors["param/" + name] = t.clone();
  for (const auto& [name, t] : opt_theta_.export_state()) {
    ckpt.tensors["opt_theta/" + name] = t;
  }
  for (const auto& [name, t] : opt_phi_.export_state()) ckpt.tensors["opt_phi/" + name] = t;
  ckpt.tensors["stats/loss_sum"] = Tensor::scalar(loss_sum_);
  for (const auto& [lang, stats] : lang_stats_) {
    ckpt.tensors["stats/loss_sum/" + lang] = Tensor::scalar(stats.loss_sum);
    ckpt.counters["batches/" + lang] = static_cast<uint64_t>(stats.batches);
  }
  ckpt.counters["epoch"] = static_cast<uint64_t>(epoch_);
  ckpt.counters["skipped"] = static_cast<uint64_t>(skipped_);
  ckpt.rng_states[kDataRngName] = data_rng_.state();
  return ckpt;
}

void MetaTrainer::restore(const Checkpoint& ckpt) {
  if (!cfg_.config_digest.empty() && !ckpt.config_digest.empty() &&
      ckpt.config_digest != cfg_.config_digest) {
    throw ConfigError("checkpoint was produced by a different configuration (digest " +
                      ckpt.config_digest + ", expected " + cfg_.config_digest + ")");
  }
  std::map<std::string, Tensor> theta_state, phi_state;
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
    } else if (starts_with(key, "opt_theta/")) {
      theta_state[key.substr(10)] = t.clone();
    } else if (starts_with(key, "opt_phi/")) {
      phi_state[key.substr(8)] = t.clone();
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
  for (auto& [name, p] : model_.params()) p.raw() = ckpt.tensors.at("param/" + name).data();
  opt_theta_ = Adam(cfg_.adam);
  opt_theta_.import_state(theta_state);
  opt_phi_ = Adam(cfg_.adam);
  opt_phi_.import_state(phi_state);
  step_ = ckpt.step;
  epoch_ = static_cast<int64_t>(ckpt.counters.count("epoch") ? ckpt.counters.at("epoch") : 0);
  skipped_ =
      static_cast<int64_t>(ckpt.counters.count("skipped") ? ckpt.counters.at("skipped") : 0);
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
