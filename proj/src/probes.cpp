#include "xling/probes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "xling/common.hpp"
#include "xling/serialize.hpp"

namespace xling {

namespace {

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Cosine of two equal-length vectors; NaN when either has zero norm.
double cosine_of(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::string mask_name(int layer, BlockType block) {
  if (block == BlockType::embedding) return "mask/emb";
  return "mask/layer" + std::to_string(layer) +
         (block == BlockType::attention ? "/attn" : "/ffn");
}

}  // namespace

// ============================ gradient probes ==============================

void GradientProbeConfig::validate() const {
  if (batch_size < 1) throw ConfigError("probe batch_size must be at least 1");
  if (micro_batches < 1) throw ConfigError("probe micro_batches must be at least 1");
  if (mask_prob <= 0.0 || mask_prob >= 1.0) {
    throw ConfigError("probe mask_prob must lie strictly between 0 and 1");
  }
}

double gradient_cosine(const GradientMap& ga, const GradientMap& gb) {
  if (ga.size() != gb.size()) {
    throw ShapeError("gradient maps hold different numbers of tensors");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  auto it_b = gb.begin();
  for (const auto& [name, ta] : ga) {
    if (it_b->first != name) {
      throw ShapeError("gradient name sets differ: '" + name + "' vs '" + it_b->first + "'");
    }
    const Tensor& tb = it_b->second;
    ++it_b;
    if (ta.shape() != tb.shape()) {
      throw ShapeError("gradient shapes differ for '" + name + "': " + shape_str(ta.shape()) +
                       " vs " + shape_str(tb.shape()));
    }
    const auto& da = ta.data();
    const auto& db = tb.data();
    for (size_t i = 0; i < da.size(); ++i) {
      dot += da[i] * db[i];
      na += da[i] * da[i];
      nb += db[i] * db[i];
    }
  }
  if (na == 0.0 || nb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

GradientMap shared_gradient(const Model& model, const TokenizedCorpus& data,
                            const GradientProbeConfig& cfg, uint64_t key) {
  cfg.validate();
  if (!model.has_language(data.language)) {
    throw ConfigError("language '" + data.language + "' is not registered with this model");
  }
  if (data.train_end <= 0) {
    throw ConfigError("language '" + data.language + "' has an empty train split");
  }
  const ModelParams parts = model.partition();
  GradientMap acc;
  for (const auto& [name, p] : parts.theta) {
    acc.emplace(name, Tensor::zeros(p.shape()));
  }
  for (int m = 0; m < cfg.micro_batches; ++m) {
    const uint64_t sub = key * static_cast<uint64_t>(cfg.micro_batches) + static_cast<uint64_t>(m);
    Rng rng(derive_seed(cfg.seed, fnv1a(data.language) ^ fnv1a("probe-batch"), sub));
    std::vector<int> flat;
    flat.reserve(static_cast<size_t>(cfg.batch_size) * static_cast<size_t>(data.seq_len));
    for (int i = 0; i < cfg.batch_size; ++i) {
      const int64_t row =
          static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(data.train_end)));
      const int* r = data.row(row);
      flat.insert(flat.end(), r, r + data.seq_len);
    }
    const MaskedBatch masked = mask_for_mlm(flat, cfg.mask_prob, model.config().vocab_size, rng);
    IntArray inputs, targets;
    inputs.shape = {cfg.batch_size, data.seq_len};
    targets.shape = inputs.shape;
    inputs.data.assign(masked.inputs.begin(), masked.inputs.end());
    targets.data.assign(masked.targets.begin(), masked.targets.end());

    CounterStream stream{derive_seed(cfg.seed, fnv1a(data.language) ^ fnv1a("probe-dropout"), sub),
                         0};
    Tape tape(true);
    const Tensor loss = model.forward_mlm(tape, inputs, targets, data.language,
                                          cfg.use_dropout ? &stream : nullptr);
    const GradientMap grads = gradients(tape, loss, parts.theta);
    for (const auto& [name, g] : grads) {
      auto& dst = acc.at(name).raw();
      const auto& src = g.data();
      for (size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    }
  }
  return acc;
}

double probe_cosine(const Model& model, const TokenizedCorpus& a, uint64_t key_a,
                    const TokenizedCorpus& b, uint64_t key_b, const GradientProbeConfig& cfg) {
  return gradient_cosine(shared_gradient(model, a, cfg, key_a),
                         shared_gradient(model, b, cfg, key_b));
}

// ============================ Hard Concrete ================================

void HardConcreteConfig::validate() const {
  if (!(gamma < 0.0)) throw ConfigError("hard-concrete gamma must be negative");
  if (!(zeta > 1.0)) throw ConfigError("hard-concrete zeta must exceed 1");
  if (!(beta > 0.0 && beta < 1.0)) {
    throw ConfigError("hard-concrete beta must lie strictly between 0 and 1");
  }
}

double HardConcreteConfig::open_shift() const { return beta * std::log(-gamma / zeta); }

double hard_concrete_gate(double pi, double u, const HardConcreteConfig& cfg) {
  if (!(u > 0.0 && u < 1.0)) {
    throw ConfigError("hard-concrete draw u must lie strictly between 0 and 1");
  }
  const double s = sigmoid_d((std::log(u) - std::log1p(-u) + pi) / cfg.beta);
  const double stretched = s * (cfg.zeta - cfg.gamma) + cfg.gamma;
  return std::min(1.0, std::max(0.0, stretched));
}

double gate_open_probability(double pi, const HardConcreteConfig& cfg) {
  return sigmoid_d(pi - cfg.open_shift());
}

double expected_l0(const std::vector<double>& pi, const HardConcreteConfig& cfg) {
  double total = 0.0;
  for (double p : pi) total += gate_open_probability(p, cfg);
  return total;
}

Tensor reparam_gates(Tape& t, const Tensor& pi, const Tensor& logit_u,
                     const HardConcreteConfig& cfg) {
  if (pi.shape() != logit_u.shape()) {
    throw ShapeError("pi and noise shapes differ: " + shape_str(pi.shape()) + " vs " +
                     shape_str(logit_u.shape()));
  }
  const Tensor s = sigmoid(t, scale(t, add(t, pi, logit_u), 1.0 / cfg.beta));
  return clamp(t, shift(t, scale(t, s, cfg.zeta - cfg.gamma), cfg.gamma), 0.0, 1.0);
}

Tensor expected_l0_term(Tape& t, const Tensor& pi, const HardConcreteConfig& cfg) {
  return sum(t, sigmoid(t, shift(t, pi, -cfg.open_shift())));
}

Tensor logistic_noise(const Shape& shape, Rng& rng) {
  std::vector<double> vals(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : vals) {
    const double u = rng.next_open_double();
    v = std::log(u) - std::log1p(-u);
  }
  return Tensor::from_data(shape, std::move(vals));
}

// =============================== mask params ===============================

const char* to_string(BlockType block) {
  switch (block) {
    case BlockType::embedding: return "embedding";
    case BlockType::attention: return "attention";
    case BlockType::feedforward: return "feedforward";
  }
  throw Error("unreachable block type");
}

BlockType block_type_from_string(const std::string& name) {
  if (name == "embedding") return BlockType::embedding;
  if (name == "attention") return BlockType::attention;
  if (name == "feedforward") return BlockType::feedforward;
  throw ConfigError("unknown block type '" + name + "'");
}

int64_t MaskShape::total() const {
  int64_t n = emb;
  n = std::accumulate(attn.begin(), attn.end(), n);
  n = std::accumulate(ffn.begin(), ffn.end(), n);
  return n;
}

namespace {

// Visits the stable flattening order: embedding, then per layer attention
// then feedforward. fn(layer, block, group_count, tensor_name).
template <typename Fn>
void for_each_block(const MaskShape& shape, Fn&& fn) {
  if (shape.emb > 0) fn(-1, BlockType::embedding, shape.emb, std::string("mask/emb"));
  const size_t layers = std::max(shape.attn.size(), shape.ffn.size());
  for (size_t L = 0; L < layers; ++L) {
    const int layer = static_cast<int>(L);
    if (L < shape.attn.size() && shape.attn[L] > 0) {
      fn(layer, BlockType::attention, shape.attn[L], mask_name(layer, BlockType::attention));
    }
    if (L < shape.ffn.size() && shape.ffn[L] > 0) {
      fn(layer, BlockType::feedforward, shape.ffn[L], mask_name(layer, BlockType::feedforward));
    }
  }
}

void check_counts(const MaskShape& shape) {
  if (shape.emb < 0) throw ConfigError("negative embedding group count");
  for (int64_t c : shape.attn) {
    if (c < 0) throw ConfigError("negative attention group count");
  }
  for (int64_t c : shape.ffn) {
    if (c < 0) throw ConfigError("negative feedforward group count");
  }
  if (shape.total() <= 0) throw ConfigError("mask shape has no groups");
}

}  // namespace

std::vector<double> MaskParams::flat() const {
  std::vector<double> out;
  out.reserve(static_cast<size_t>(shape.total()));
  for_each_block(shape, [&](int, BlockType, int64_t, const std::string& name) {
    const auto& d = pi.at(name).data();
    out.insert(out.end(), d.begin(), d.end());
  });
  return out;
}

std::vector<GroupIndex> MaskParams::index() const {
  std::vector<GroupIndex> out;
  out.reserve(static_cast<size_t>(shape.total()));
  for_each_block(shape, [&](int layer, BlockType block, int64_t count, const std::string&) {
    for (int64_t g = 0; g < count; ++g) out.push_back({layer, block, g});
  });
  return out;
}

MaskShape mask_shape_for(const TransformerConfig& cfg, int emb_group_size) {
  cfg.validate();
  if (emb_group_size < 1 || cfg.d_model % emb_group_size != 0) {
    throw ConfigError("emb_group_size must evenly divide d_model");
  }
  MaskShape shape;
  shape.emb = cfg.d_model / emb_group_size;
  shape.attn.assign(static_cast<size_t>(cfg.n_layers), cfg.n_heads);
  shape.ffn.assign(static_cast<size_t>(cfg.n_layers), cfg.d_ffn);
  return shape;
}

MaskParams init_mask_params(std::string language, const MaskShape& shape, double init_pi) {
  check_counts(shape);
  if (!std::isfinite(init_pi)) throw ConfigError("init_pi must be finite");
  MaskParams mp;
  mp.language = std::move(language);
  mp.shape = shape;
  for_each_block(shape, [&](int, BlockType, int64_t count, const std::string& name) {
    mp.pi.emplace(name, Tensor::full({count}, init_pi, /*requires_grad=*/true));
  });
  return mp;
}

GateSet mean_gates(const MaskParams& masks, const HardConcreteConfig& cfg) {
  cfg.validate();
  GateSet gates;
  auto gate_tensor = [&](const Tensor& pi) {
    std::vector<double> z(pi.data().size());
    for (size_t i = 0; i < z.size(); ++i) z[i] = hard_concrete_gate(pi.data()[i], 0.5, cfg);
    return Tensor::from_data(pi.shape(), std::move(z));
  };
  const size_t layers = std::max(masks.shape.attn.size(), masks.shape.ffn.size());
  gates.attn.resize(layers);
  gates.ffn.resize(layers);
  for_each_block(masks.shape, [&](int layer, BlockType block, int64_t, const std::string& name) {
    const Tensor z = gate_tensor(masks.pi.at(name));
    if (block == BlockType::embedding) {
      gates.emb = z;
    } else if (block == BlockType::attention) {
      gates.attn[static_cast<size_t>(layer)] = z;
    } else {
      gates.ffn[static_cast<size_t>(layer)] = z;
    }
  });
  return gates;
}

double expected_l0(const MaskParams& masks, const HardConcreteConfig& cfg) {
  return expected_l0(masks.flat(), cfg);
}

// ============================== mask learning ==============================

void MaskLearnConfig::validate() const {
  hc.validate();
  if (lambda < 0.0 || !std::isfinite(lambda)) throw ConfigError("lambda must be finite and >= 0");
  if (steps < 0) throw ConfigError("steps must be nonnegative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (mask_prob <= 0.0 || mask_prob >= 1.0) {
    throw ConfigError("mask_prob must lie strictly between 0 and 1");
  }
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!std::isfinite(init_pi)) throw ConfigError("init_pi must be finite");
  if (emb_group_size < 1) throw ConfigError("emb_group_size must be at least 1");
}

MaskParams learn_masks(MaskableObjective& objective, std::string language,
                       const MaskLearnConfig& cfg) {
  cfg.validate();
  const MaskShape shape = objective.mask_shape();
  MaskParams mp = init_mask_params(std::move(language), shape, cfg.init_pi);

  Adam opt(cfg.adam);
  Rng noise_rng(derive_seed(cfg.seed, fnv1a("mask-noise")));
  const size_t layers = std::max(shape.attn.size(), shape.ffn.size());

  for (int step = 1; step <= cfg.steps; ++step) {
    Tape tape(true);

    GateSet gates;
    gates.attn.resize(layers);
    gates.ffn.resize(layers);
    Tensor penalty;
    for_each_block(shape, [&](int layer, BlockType block, int64_t, const std::string& name) {
      const Tensor& pi = mp.pi.at(name);
      const Tensor z = reparam_gates(tape, pi, logistic_noise(pi.shape(), noise_rng), cfg.hc);
      if (block == BlockType::embedding) {
        gates.emb = z;
      } else if (block == BlockType::attention) {
        gates.attn[static_cast<size_t>(layer)] = z;
      } else {
        gates.ffn[static_cast<size_t>(layer)] = z;
      }
      const Tensor term = expected_l0_term(tape, pi, cfg.hc);
      penalty = penalty.defined() ? add(tape, penalty, term) : term;
    });

    const Tensor task = objective.loss(tape, gates, static_cast<uint64_t>(step));
    const Tensor total = add(tape, task, scale(tape, penalty, cfg.lambda));
    if (!std::isfinite(total.item())) {
      throw NumericError("mask-learning loss is non-finite at step " + std::to_string(step));
    }
    GradientMap grads = gradients(tape, total, mp.pi);
    if (!grads_finite(grads)) {
      throw NumericError("mask-learning gradients are non-finite at step " + std::to_string(step));
    }
    opt.step(mp.pi, grads, cfg.lr);
  }
  return mp;
}

MlmMaskObjective::MlmMaskObjective(const Model& model, const TokenizedCorpus& data, int batch_size,
                                   double mask_prob, int emb_group_size, uint64_t seed)
    : model_(model),
      data_(data),
      batch_size_(batch_size),
      mask_prob_(mask_prob),
      emb_group_size_(emb_group_size),
      seed_(seed) {
  if (!model.has_language(data.language)) {
    throw ConfigError("language '" + data.language + "' is not registered with this model");
  }
  if (data.train_end <= 0) {
    throw ConfigError("language '" + data.language + "' has an empty train split");
  }
  if (batch_size_ < 1) throw ConfigError("batch_size must be at least 1");
}

MaskShape MlmMaskObjective::mask_shape() const {
  return mask_shape_for(model_.config(), emb_group_size_);
}

Tensor MlmMaskObjective::loss(Tape& t, const GateSet& gates, uint64_t key) {
  Rng rng(derive_seed(seed_, fnv1a(data_.language) ^ fnv1a("mask-batch"), key));
  std::vector<int> flat;
  flat.reserve(static_cast<size_t>(batch_size_) * static_cast<size_t>(data_.seq_len));
  for (int i = 0; i < batch_size_; ++i) {
    const int64_t row =
        static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(data_.train_end)));
    const int* r = data_.row(row);
    flat.insert(flat.end(), r, r + data_.seq_len);
  }
  const MaskedBatch masked = mask_for_mlm(flat, mask_prob_, model_.config().vocab_size, rng);
  IntArray inputs, targets;
  inputs.shape = {batch_size_, data_.seq_len};
  targets.shape = inputs.shape;
  inputs.data.assign(masked.inputs.begin(), masked.inputs.end());
  targets.data.assign(masked.targets.begin(), masked.targets.end());
  return model_.forward_mlm(t, inputs, targets, data_.language, nullptr, &gates);
}

MaskParams learn_masks(const Model& model, const TokenizedCorpus& data,
                       const MaskLearnConfig& cfg) {
  cfg.validate();
  std::vector<std::vector<double>> before;
  before.reserve(model.params().size());
  for (const auto& [name, p] : model.params()) before.push_back(p.data());

  MlmMaskObjective objective(model, data, cfg.batch_size, cfg.mask_prob, cfg.emb_group_size,
                             cfg.seed);
  MaskParams mp = learn_masks(objective, data.language, cfg);

  size_t i = 0;
  for (const auto& [name, p] : model.params()) {
    const auto& now = p.data();
    const auto& was = before[i++];
    if (now.size() != was.size() ||
        std::memcmp(now.data(), was.data(), now.size() * sizeof(double)) != 0) {
      throw Error("mask learning mutated frozen model weights: " + name);
    }
  }
  return mp;
}

// ============================= mask analytics ==============================

std::vector<LayerSimilarity> mask_similarity_by_layer(const MaskParams& a, const MaskParams& b) {
  if (!(a.shape == b.shape)) {
    throw ShapeError("mask group indexing differs between '" + a.language + "' and '" +
                     b.language + "'");
  }
  std::vector<LayerSimilarity> rows;
  for_each_block(a.shape, [&](int layer, BlockType block, int64_t, const std::string& name) {
    if (block == BlockType::embedding) return;  // no layer coordinate
    rows.push_back({layer, block, cosine_of(a.pi.at(name).data(), b.pi.at(name).data())});
  });
  return rows;
}

namespace {

std::vector<double> min_max_normalized(const std::vector<double>& v) {
  const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<double> out(v.size(), 0.0);
  if (hi > lo) {
    for (size_t i = 0; i < v.size(); ++i) out[i] = -1.0 + 2.0 * (v[i] - lo) / (hi - lo);
  }
  return out;
}

}  // namespace

std::vector<RankedGroup> top_k_groups(const MaskParams& a, const MaskParams& b, int k) {
  if (!(a.shape == b.shape)) {
    throw ShapeError("mask group indexing differs between '" + a.language + "' and '" +
                     b.language + "'");
  }
  const std::vector<double> fa = a.flat();
  const std::vector<double> fb = b.flat();
  const std::vector<GroupIndex> idx = a.index();
  if (k < 0 || static_cast<size_t>(k) > fa.size()) {
    throw ConfigError("k must lie between 0 and the group count");
  }
  const std::vector<double> na = min_max_normalized(fa);
  const std::vector<double> nb = min_max_normalized(fb);

  std::vector<size_t> order(fa.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t x, size_t y) {
    return std::abs(fa[x]) > std::abs(fa[y]);
  });

  std::vector<RankedGroup> out;
  out.reserve(static_cast<size_t>(k));
  for (int r = 0; r < k; ++r) {
    const size_t i = order[static_cast<size_t>(r)];
    RankedGroup g;
    g.index = idx[i];
    g.pi_a = fa[i];
    g.pi_b = fb[i];
    g.norm_a = na[i];
    g.norm_b = nb[i];
    const bool kept_a = fa[i] >= 0.0;
    const bool kept_b = fb[i] >= 0.0;
    g.label = kept_a ? (kept_b ? "universal" : "specific_to_a")
                     : (kept_b ? "specific_to_b" : "dropped_by_both");
    out.push_back(std::move(g));
  }
  return out;
}

// ============================= persistence =================================

namespace {

constexpr const char* kMaskHeader = "language,layer,block_type,group_id,pi";

std::string format_pi(double v) {
  char buf[64];
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

int64_t parse_int_field(const std::string& s, const std::string& what) {
  if (s.empty()) throw IoError("empty " + what + " field in mask file");
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (end != s.c_str() + s.size()) throw IoError("malformed " + what + " field '" + s + "'");
  return static_cast<int64_t>(v);
}

double parse_pi_field(const std::string& s) {
  if (s.empty()) throw IoError("empty pi field in mask file");
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) throw IoError("malformed pi field '" + s + "'");
  return v;
}

}  // namespace

void save_mask_params(const std::string& path, const MaskParams& masks) {
  check_counts(masks.shape);
  if (masks.language.find_first_of(",\n\r") != std::string::npos) {
    throw ConfigError("language id must not contain commas or newlines");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << kMaskHeader << "\n";
  const std::vector<double> flat = masks.flat();
  const std::vector<GroupIndex> idx = masks.index();
  for (size_t i = 0; i < flat.size(); ++i) {
    out << masks.language << ',' << idx[i].layer << ',' << to_string(idx[i].block) << ','
        << idx[i].group << ',' << format_pi(flat[i]) << "\n";
  }
  out.flush();
  if (!out) throw IoError("failed writing '" + path + "'");
}

MaskParams load_mask_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::string line;
  if (!std::getline(in, line) || line != kMaskHeader) {
    throw IoError("mask file '" + path + "' has a bad header");
  }

  std::string language;
  // (layer, block) -> pi values indexed by group id.
  std::map<std::pair<int, int>, std::vector<double>> blocks;
  bool any = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.push_back("");
    if (fields.size() != 5) {
      throw IoError("mask row has " + std::to_string(fields.size()) + " fields, expected 5");
    }
    if (!any) {
      language = fields[0];
      any = true;
    } else if (fields[0] != language) {
      throw IoError("mask file mixes languages '" + language + "' and '" + fields[0] + "'");
    }
    const int layer = static_cast<int>(parse_int_field(fields[1], "layer"));
    const BlockType block = block_type_from_string(fields[2]);
    const int64_t group = parse_int_field(fields[3], "group_id");
    const double pi = parse_pi_field(fields[4]);
    if ((block == BlockType::embedding) != (layer == -1)) {
      throw IoError("embedding rows must carry layer -1 and only they may");
    }
    if (block != BlockType::embedding && layer < 0) {
      throw IoError("negative layer on a non-embedding row");
    }
    auto& vec = blocks[{layer, static_cast<int>(block)}];
    if (group != static_cast<int64_t>(vec.size())) {
      throw IoError("group ids must be dense and ascending per block; got " +
                    std::to_string(group) + " at position " + std::to_string(vec.size()));
    }
    vec.push_back(pi);
  }
  if (!any) throw IoError("mask file '" + path + "' has no rows");

  MaskShape shape;
  int max_layer = -1;
  for (const auto& [key, vec] : blocks) {
    if (key.first > max_layer) max_layer = key.first;
  }
  shape.attn.assign(static_cast<size_t>(max_layer + 1), 0);
  shape.ffn.assign(static_cast<size_t>(max_layer + 1), 0);
  for (const auto& [key, vec] : blocks) {
    const auto [layer, block] = key;
    if (static_cast<BlockType>(block) == BlockType::embedding) {
      shape.emb = static_cast<int64_t>(vec.size());
    } else if (static_cast<BlockType>(block) == BlockType::attention) {
      shape.attn[static_cast<size_t>(layer)] = static_cast<int64_t>(vec.size());
    } else {
      shape.ffn[static_cast<size_t>(layer)] = static_cast<int64_t>(vec.size());
    }
  }

  MaskParams mp;
  mp.language = language;
  mp.shape = shape;
  for_each_block(shape, [&](int layer, BlockType block, int64_t, const std::string& name) {
    auto& vec = blocks.at({layer, static_cast<int>(block)});
    const Shape tensor_shape{static_cast<int64_t>(vec.size())};
    mp.pi.emplace(name, Tensor::from_data(tensor_shape, std::move(vec), /*requires_grad=*/true));
  });
  return mp;
}

}  // namespace xling
