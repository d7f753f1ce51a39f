#include "xling/task_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <sstream>

#include "xling/common.hpp"
#include "xling/serialize.hpp"
#include "xling/trainer.hpp"

namespace xling {

namespace {

// Row range of one split: train [0, train_end), val [train_end, val_end),
// test [val_end, n).
std::pair<int64_t, int64_t> split_range(const TokenizedCorpus& data, Split split) {
  switch (split) {
    case Split::train: return {0, data.train_end};
    case Split::val: return {data.train_end, data.val_end};
    case Split::test: return {data.val_end, data.n()};
  }
  throw Error("unreachable split");
}

const char* split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  throw Error("unreachable split");
}

void check_tagged(const TokenizedCorpus& data, const TaggerHead& head) {
  if (!data.has_tags || data.n_tags <= 0) {
    throw ConfigError("language '" + data.language + "' carries no tags");
  }
  if (head.n_tags() != data.n_tags) {
    throw ConfigError("head predicts " + std::to_string(head.n_tags()) + " tags but '" +
                      data.language + "' has " + std::to_string(data.n_tags));
  }
}

IntArray rows_to_ids(const TokenizedCorpus& data, const std::vector<int64_t>& rows) {
  IntArray ids;
  ids.shape = {static_cast<int64_t>(rows.size()), data.seq_len};
  ids.data.reserve(rows.size() * static_cast<size_t>(data.seq_len));
  for (int64_t r : rows) {
    const int* p = data.row(r);
    ids.data.insert(ids.data.end(), p, p + data.seq_len);
  }
  return ids;
}

IntArray rows_to_tags(const TokenizedCorpus& data, const std::vector<int64_t>& rows) {
  IntArray tags;
  tags.shape = {static_cast<int64_t>(rows.size()), data.seq_len};
  tags.data.reserve(rows.size() * static_cast<size_t>(data.seq_len));
  for (int64_t r : rows) {
    const int* p = data.tag_targets.data() + r * data.seq_len;
    tags.data.insert(tags.data.end(), p, p + data.seq_len);
  }
  return tags;
}

Tensor head_logits(Tape& t, const Model& model, const TaggerHead& head, const IntArray& ids,
                   const std::string& route_language, CounterStream* dropout_stream) {
  const Tensor hidden = model.forward_hidden(t, ids, route_language, dropout_stream);
  const int64_t d = model.config().d_model;
  const Tensor flat = reshape(t, hidden, {ids.shape[0] * ids.shape[1], d});
  return add(t, matmul(t, flat, head.w), head.b);
}

std::string format_value(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void FinetuneConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (lr_grid.empty()) throw ConfigError("lr grid must be nonempty");
  for (double lr : lr_grid) {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr grid entries must be positive");
  }
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
}

TaggerHead init_tagger_head(int d_model, int n_tags, uint64_t seed) {
  if (d_model < 1 || n_tags < 1) throw ConfigError("head dimensions must be positive");
  Rng rng(derive_seed(seed, fnv1a("tagger-head")));
  TaggerHead head;
  head.w = Tensor::randn({d_model, n_tags}, rng, 0.02, /*requires_grad=*/true);
  head.b = Tensor::zeros({n_tags}, /*requires_grad=*/true);
  return head;
}

const char* to_string(EvalSetting setting) {
  return setting == EvalSetting::within_language ? "within_language" : "zero_shot";
}

std::string model_fingerprint(const Model& model) {
  uint64_t h = fnv1a(std::string());
  for (const auto& [name, p] : model.params()) {
    h = fnv1a(name, h);
    const auto& d = p.data();
    h = fnv1a(d.data(), d.size() * sizeof(double), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double micro_f1(const std::vector<int>& predictions, const std::vector<int>& gold) {
  if (predictions.size() != gold.size()) {
    throw ShapeError("prediction and gold vectors differ in length");
  }
  if (predictions.empty()) throw ConfigError("cannot score an empty label set");

  // Per-class confusion counts; micro-averaging sums them before the ratio.
  std::map<int, int64_t> tp, fp, fn;
  for (size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] < 0 || gold[i] < 0) throw ConfigError("labels must be nonnegative");
    if (predictions[i] == gold[i]) {
      ++tp[gold[i]];
    } else {
      ++fp[predictions[i]];
      ++fn[gold[i]];
    }
  }
  int64_t tp_sum = 0, fp_sum = 0, fn_sum = 0;
  for (const auto& [c, n] : tp) tp_sum += n;
  for (const auto& [c, n] : fp) fp_sum += n;
  for (const auto& [c, n] : fn) fn_sum += n;
  if (tp_sum == 0) return 0.0;
  const double precision = static_cast<double>(tp_sum) / static_cast<double>(tp_sum + fp_sum);
  const double recall = static_cast<double>(tp_sum) / static_cast<double>(tp_sum + fn_sum);
  return 2.0 * precision * recall / (precision + recall);
}

double tagging_f1(const Model& model, const TaggerHead& head, const TokenizedCorpus& data,
                  Split split, const std::string& route_language) {
  check_tagged(data, head);
  const auto [begin, end] = split_range(data, split);
  if (end <= begin) {
    throw ConfigError(std::string("empty ") + split_name(split) + " split for '" +
                      data.language + "'");
  }

  std::vector<int> preds, golds;
  const int64_t chunk = 16;
  for (int64_t start = begin; start < end; start += chunk) {
    const int64_t stop = std::min(end, start + chunk);
    std::vector<int64_t> rows;
    for (int64_t r = start; r < stop; ++r) rows.push_back(r);
    const IntArray ids = rows_to_ids(data, rows);
    const IntArray tags = rows_to_tags(data, rows);

    Tape tape(false);
    const Tensor logits = head_logits(tape, model, head, ids, route_language, nullptr);
    const auto& ld = logits.data();
    const int n_tags = head.n_tags();
    for (int64_t pos = 0; pos < ids.numel(); ++pos) {
      const int g = static_cast<int>(tags.data[static_cast<size_t>(pos)]);
      if (g < 0) continue;  // not a word's first subword
      const double* row = ld.data() + pos * n_tags;
      int best = 0;
      for (int c = 1; c < n_tags; ++c) {
        if (row[c] > row[best]) best = c;
      }
      preds.push_back(best);
      golds.push_back(g);
    }
  }
  if (preds.empty()) {
    throw ConfigError(std::string(split_name(split)) + " split of '" + data.language +
                      "' has no tagged words");
  }
  return micro_f1(preds, golds);
}

FinetuneResult finetune(const Model& pretrained, const TokenizedCorpus& source,
                        const FinetuneConfig& cfg) {
  cfg.validate();
  if (!source.has_tags || source.n_tags <= 0) {
    throw ConfigError("language '" + source.language + "' carries no tags");
  }
  if (source.train_end <= 0) {
    throw ConfigError("language '" + source.language + "' has an empty train split");
  }
  if (source.val_end <= source.train_end) {
    throw ConfigError("language '" + source.language + "' has an empty dev split");
  }
  if (!pretrained.has_language(source.language)) {
    throw ConfigError("language '" + source.language + "' is not registered with this model");
  }

  const std::string checkpoint_id = model_fingerprint(pretrained);

  std::optional<Model> best_model;
  TaggerHead best_head;
  double best_dev = -1.0;
  double best_lr = 0.0;
  std::vector<double> grid_scores;

  for (size_t li = 0; li < cfg.lr_grid.size(); ++li) {
    const double lr = cfg.lr_grid[li];
    Model m = pretrained.clone();
    TaggerHead head =
        init_tagger_head(m.config().d_model, source.n_tags, derive_seed(cfg.seed, fnv1a("head"), li));

    ParamMap trainable;
    trainable.emplace("head/w", head.w);
    trainable.emplace("head/b", head.b);
    {
      const ModelParams parts = m.partition();
      for (const auto& [name, p] : parts.theta) trainable.emplace(name, p);
      if (cfg.tune_language_specific) {
        const auto it = parts.phi.find(source.language);
        if (it != parts.phi.end()) {
          for (const auto& [name, p] : it->second) trainable.emplace(name, p);
        }
      }
    }

    Adam opt(cfg.adam);
    Rng data_rng(derive_seed(cfg.seed, fnv1a("finetune-data"), li));
    CounterStream dropout_stream{derive_seed(cfg.seed, fnv1a("finetune-dropout"), li), 0};

    std::vector<int64_t> order(static_cast<size_t>(source.train_end));
    for (int64_t i = 0; i < source.train_end; ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      // Fisher-Yates reshuffle per epoch.
      for (size_t i = order.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(data_rng.next_below(i));
        std::swap(order[i - 1], order[j]);
      }
      for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
        const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
        const std::vector<int64_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                        order.begin() + static_cast<std::ptrdiff_t>(stop));
        const IntArray ids = rows_to_ids(source, rows);
        const IntArray tags = rows_to_tags(source, rows);

        Tape tape(true);
        const Tensor logits = head_logits(tape, m, head, ids, source.language, &dropout_stream);
        const Tensor loss = cross_entropy(tape, logits, tags);
        if (!std::isfinite(loss.item())) {
          throw NumericError("finetuning loss is non-finite");
        }
        GradientMap grads = gradients(tape, loss, trainable);
        if (!grads_finite(grads)) throw NumericError("finetuning gradients are non-finite");
        clip_gradients(grads, cfg.clip_norm);
        opt.step(trainable, grads, lr);
      }
    }

    const double dev = tagging_f1(m, head, source, Split::val, source.language);
    grid_scores.push_back(dev);
    if (dev > best_dev) {
      best_dev = dev;
      best_lr = lr;
      best_model.emplace(std::move(m));
      best_head = head;
    }
  }

  FinetuneResult result{std::move(*best_model), best_head, best_lr, best_dev,
                        std::move(grid_scores), checkpoint_id};
  return result;
}

EvalReport evaluate_f1(const Model& model, const TaggerHead& head,
                       const std::string& source_language, const TokenizedCorpus& target,
                       uint64_t seed, const std::string& checkpoint_id) {
  const std::string route =
      model.has_language(target.language) ? target.language : source_language;
  if (!model.has_language(route)) {
    throw ConfigError("model covers neither '" + target.language + "' nor '" + source_language +
                      "'");
  }
  EvalReport report;
  report.setting = source_language == target.language ? EvalSetting::within_language
                                                      : EvalSetting::zero_shot;
  report.source = source_language;
  report.target = target.language;
  report.f1 = tagging_f1(model, head, target, Split::test, route);
  report.seed = seed;
  report.checkpoint_id = checkpoint_id;
  return report;
}

InterferenceTable interference_suite(const InterferenceInputs& inputs,
                                     const std::vector<const TokenizedCorpus*>& corpora,
                                     const FinetuneConfig& cfg, double mask_prob,
                                     uint64_t eval_seed) {
  cfg.validate();
  if (corpora.empty()) throw ConfigError("interference suite needs at least one language");
  for (const TokenizedCorpus* c : corpora) {
    if (inputs.monos.find(c->language) == inputs.monos.end()) {
      throw ConfigError("missing mono checkpoint for language '" + c->language + "'");
    }
    for (const auto& [id, joint] : inputs.joints) {
      if (!joint->has_language(c->language)) {
        throw ConfigError("joint model '" + id + "' misses language '" + c->language + "'");
      }
    }
  }

  InterferenceTable table;
  // language -> mono within-language F1, for the interference flags.
  std::map<std::string, double> mono_within;

  auto eval_model = [&](const std::string& model_id, const Model& model,
                        const std::vector<const TokenizedCorpus*>& sources) {
    for (const TokenizedCorpus* src : sources) {
      const FinetuneResult ft = finetune(model, *src, cfg);
      for (const TokenizedCorpus* tgt : corpora) {
        const EvalReport report =
            evaluate_f1(ft.model, ft.head, src->language, *tgt, cfg.seed, ft.checkpoint_id);
        InterferenceRow row;
        row.model_id = model_id;
        row.setting = report.setting;
        row.source = report.source;
        row.target = report.target;
        row.f1 = report.f1;
        row.val_perplexity =
            model.has_language(tgt->language)
                ? validation_perplexity(model, *tgt, mask_prob, cfg.batch_size, eval_seed)
                : std::numeric_limits<double>::quiet_NaN();
        table.rows.push_back(std::move(row));
        if (report.setting == EvalSetting::within_language &&
            inputs.monos.at(src->language) == &model) {
          mono_within[src->language] = report.f1;
        }
      }
    }
  };

  // Mono baselines first (each finetunes only on its own language), then
  // joint models over every source, in stable map order.
  for (const auto& [lang, model] : inputs.monos) {
    const auto it = std::find_if(corpora.begin(), corpora.end(),
                                 [&](const TokenizedCorpus* c) { return c->language == lang; });
    if (it == corpora.end()) continue;  // extra baseline without a corpus: skip
    eval_model("mono:" + lang, *model, {*it});
  }
  for (const auto& [id, model] : inputs.joints) {
    eval_model(id, *model, corpora);
  }

  for (InterferenceRow& row : table.rows) {
    if (row.setting != EvalSetting::within_language) continue;
    if (row.model_id.rfind("mono:", 0) == 0) continue;
    const auto it = mono_within.find(row.source);
    if (it != mono_within.end() && it->second > row.f1) row.interference = true;
  }
  return table;
}

std::string interference_csv(const InterferenceTable& table) {
  std::ostringstream out;
  out << "model,setting,source,target,f1,val_perplexity,interference\n";
  for (const InterferenceRow& row : table.rows) {
    out << row.model_id << ',' << to_string(row.setting) << ',' << row.source << ',' << row.target
        << ',' << format_value(row.f1) << ',' << format_value(row.val_perplexity) << ','
        << (row.interference ? 1 : 0) << "\n";
  }
  return out.str();
}

}  // namespace xling
