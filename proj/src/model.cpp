#include "xling/model.hpp"

#include <algorithm>
#include <cmath>

#include "xling/bpe.hpp"
#include "xling/rng.hpp"
#include "xling/serialize.hpp"

namespace xling {

const char* to_string(CapacityMode mode) {
  switch (mode) {
    case CapacityMode::shared_only: return "shared_only";
    case CapacityMode::lang_ffn: return "lang_ffn";
    case CapacityMode::lang_attn: return "lang_attn";
    case CapacityMode::lang_adapter: return "lang_adapter";
    case CapacityMode::shared_adapter: return "shared_adapter";
  }
  throw ConfigError("unknown capacity mode value");
}

CapacityMode capacity_mode_from_string(const std::string& name) {
  if (name == "shared_only") return CapacityMode::shared_only;
  if (name == "lang_ffn") return CapacityMode::lang_ffn;
  if (name == "lang_attn") return CapacityMode::lang_attn;
  if (name == "lang_adapter") return CapacityMode::lang_adapter;
  if (name == "shared_adapter") return CapacityMode::shared_adapter;
  throw ConfigError("unknown capacity mode '" + name + "'");
}

void TransformerConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ffn < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (d_model % 8 != 0) {
    throw ConfigError("d_model must be divisible by 8 (embedding gate groups)");
  }
  if (d_model % 4 != 0) {
    throw ConfigError("d_model must be divisible by 4 (adapter bottleneck)");
  }
  if (max_seq_len < 3) throw ConfigError("max_seq_len must be at least 3");
  if (vocab_size <= BpeModel::kNumSpecials) {
    throw ConfigError("vocab_size must exceed the special-token count");
  }
  if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must lie in [0,1)");
}

int64_t ParamCounts::total() const {
  int64_t n = theta;
  for (const auto& [lang, c] : phi) n += c;
  return n;
}

namespace {

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.size() >= prefix.size() && s.compare(0, prefix.size(), prefix) == 0;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

Model::Model(TransformerConfig cfg, CapacityMode mode, std::vector<std::string> languages,
             uint64_t seed)
    : cfg_(cfg), mode_(mode), languages_(std::move(languages)), seed_(seed) {
  cfg_.validate();
  if (mode_ != CapacityMode::shared_only && mode_ != CapacityMode::shared_adapter &&
      languages_.empty()) {
    throw ConfigError("per-language capacity modes need at least one language");
  }
  for (const auto& lang : languages_) {
    if (lang.empty()) throw ConfigError("language ids must be nonempty");
  }

  const int64_t d = cfg_.d_model;
  const int64_t f = cfg_.d_ffn;
  const int64_t V = cfg_.vocab_size;
  const int64_t b = cfg_.adapter_dim();

  // Collect (name, shape); initialization is derived from each name below,
  // which keeps θ values identical across capacity modes for one seed.
  std::vector<std::pair<std::string, Shape>> defs;
  defs.emplace_back("emb/tok", Shape{V, d});
  defs.emplace_back("emb/pos", Shape{cfg_.max_seq_len, d});
  defs.emplace_back("out/bias", Shape{V});

  auto add_attn = [&](const std::string& prefix, bool include_out) {
    defs.emplace_back(prefix + "/attn/wq", Shape{d, d});
    defs.emplace_back(prefix + "/attn/wk", Shape{d, d});
    defs.emplace_back(prefix + "/attn/wv", Shape{d, d});
    defs.emplace_back(prefix + "/attn/bq", Shape{d});
    defs.emplace_back(prefix + "/attn/bk", Shape{d});
    defs.emplace_back(prefix + "/attn/bv", Shape{d});
    if (include_out) {
      defs.emplace_back(prefix + "/attn/wo", Shape{d, d});
      defs.emplace_back(prefix + "/attn/bo", Shape{d});
    }
  };
  auto add_ffn = [&](const std::string& prefix) {
    defs.emplace_back(prefix + "/ffn/w1", Shape{d, f});
    defs.emplace_back(prefix + "/ffn/b1", Shape{f});
    defs.emplace_back(prefix + "/ffn/w2", Shape{f, d});
    defs.emplace_back(prefix + "/ffn/b2", Shape{d});
  };
  auto add_adapters = [&](const std::string& prefix) {
    for (const char* site : {"adapt_attn", "adapt_ffn"}) {
      defs.emplace_back(prefix + "/" + site + "/wz", Shape{d, b});
      defs.emplace_back(prefix + "/" + site + "/wh", Shape{b, d});
    }
  };

  for (int L = 0; L < cfg_.n_layers; ++L) {
    const std::string layer = "layer" + std::to_string(L);
    // Attention projections: shared unless lang_attn routes them.
    if (mode_ == CapacityMode::lang_attn) {
      for (const auto& lang : languages_) {
        add_attn("lang/" + lang + "/" + layer, !cfg_.lang_attn_qkv_only);
      }
      if (cfg_.lang_attn_qkv_only) {
        defs.emplace_back(layer + "/attn/wo", Shape{d, d});
        defs.emplace_back(layer + "/attn/bo", Shape{d});
      }
    } else {
      add_attn(layer, true);
    }
    defs.emplace_back(layer + "/attn/ln/gamma", Shape{d});
    defs.emplace_back(layer + "/attn/ln/beta", Shape{d});

    if (mode_ == CapacityMode::lang_ffn) {
      for (const auto& lang : languages_) add_ffn("lang/" + lang + "/" + layer);
    } else {
      add_ffn(layer);
    }
    defs.emplace_back(layer + "/ffn/ln/gamma", Shape{d});
    defs.emplace_back(layer + "/ffn/ln/beta", Shape{d});

    if (mode_ == CapacityMode::lang_adapter) {
      for (const auto& lang : languages_) add_adapters("lang/" + lang + "/" + layer);
    } else if (mode_ == CapacityMode::shared_adapter) {
      add_adapters(layer);
    }
  }

  for (auto& [name, shape] : defs) {
    Rng rng(derive_seed(seed, fnv1a(name)));
    Tensor tensor;
    if (ends_with(name, "/gamma")) {
      tensor = Tensor::full(shape, 1.0, true);
    } else if (ends_with(name, "/beta") || ends_with(name, "/wh") || name == "out/bias" ||
               ends_with(name, "/bq") || ends_with(name, "/bk") || ends_with(name, "/bv") ||
               ends_with(name, "/bo") || ends_with(name, "/b1") || ends_with(name, "/b2")) {
      tensor = Tensor::zeros(shape, true);
    } else if (ends_with(name, "/wz")) {
      tensor = Tensor::randn(shape, rng, 0.01, true);
    } else {
      tensor = Tensor::randn(shape, rng, 0.02, true);
    }
    params_.emplace(std::move(name), std::move(tensor));
  }
}

bool Model::has_language(const std::string& lang) const {
  return std::find(languages_.begin(), languages_.end(), lang) != languages_.end();
}

ModelParams Model::partition() const {
  ModelParams mp;
  for (const auto& lang : languages_) mp.phi.emplace(lang, ParamMap{});
  for (const auto& [name, tensor] : params_) {
    if (starts_with(name, "lang/")) {
      const size_t slash = name.find('/', 5);
      const std::string lang = name.substr(5, slash - 5);
      mp.phi.at(lang).emplace(name, tensor);
    } else {
      mp.theta.emplace(name, tensor);
    }
  }
  // φ entries exist only for languages that own tensors.
  for (auto it = mp.phi.begin(); it != mp.phi.end();) {
    it = it->second.empty() ? mp.phi.erase(it) : std::next(it);
  }
  return mp;
}

ParamCounts Model::param_counts() const {
  const ModelParams mp = partition();
  ParamCounts counts;
  for (const auto& [name, tensor] : mp.theta) counts.theta += tensor.numel();
  for (const auto& [lang, map] : mp.phi) {
    int64_t n = 0;
    for (const auto& [name, tensor] : map) n += tensor.numel();
    counts.phi.emplace(lang, n);
  }
  return counts;
}

const Tensor& Model::p(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw ConfigError("model has no parameter named '" + name + "'");
  }
  return it->second;
}

const Tensor& Model::routed(const std::string& lang, const std::string& suffix) const {
  auto it = params_.find("lang/" + lang + "/" + suffix);
  if (it != params_.end()) return it->second;
  return p(suffix);
}

Tensor adapter_apply(Tape& t, const Tensor& z, const Tensor& wz, const Tensor& wh) {
  if (z.ndim() != 2 || wz.ndim() != 2 || wh.ndim() != 2 || z.dim(1) != wz.dim(0) ||
      wz.dim(1) != wh.dim(0) || wh.dim(1) != z.dim(1)) {
    throw ShapeError("adapter shapes do not chain: z " + shape_str(z.shape()) + ", wz " +
                     shape_str(wz.shape()) + ", wh " + shape_str(wh.shape()));
  }
  const Tensor h = relu(t, matmul(t, z, wz));
  return add(t, matmul(t, h, wh), z);
}

Tensor Model::forward_hidden(Tape& t, const IntArray& ids, const std::string& lang,
                             CounterStream* dropout_stream, const GateSet* gates) const {
  if (!has_language(lang)) {
    throw ConfigError("language '" + lang + "' is not registered with this model");
  }
  if (ids.shape.size() != 2) {
    throw ShapeError("token batch must be 2-D (batch, seq), got " + shape_str(ids.shape));
  }
  const int64_t B = ids.shape[0];
  const int64_t T = ids.shape[1];
  if (T > cfg_.max_seq_len) {
    throw ShapeError("sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                     std::to_string(cfg_.max_seq_len));
  }
  if (gates) {
    if (static_cast<int>(gates->attn.size()) > cfg_.n_layers ||
        static_cast<int>(gates->ffn.size()) > cfg_.n_layers) {
      throw ShapeError("gate set lists more layers than the model has");
    }
  }
  const int64_t H = cfg_.n_heads;
  const int64_t d = cfg_.d_model;
  const int64_t dk = cfg_.head_dim();
  const bool use_dropout = dropout_stream != nullptr && cfg_.dropout > 0;

  auto maybe_dropout = [&](Tensor x) {
    return use_dropout ? dropout(t, x, cfg_.dropout, *dropout_stream) : x;
  };

  // Additive attention mask: -1e9 at PAD keys, replicated per head and row.
  Tensor attn_mask;
  {
    std::vector<double> m(static_cast<size_t>(B * H * T * T), 0.0);
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t j = 0; j < T; ++j) {
        if (ids.data[static_cast<size_t>(b * T + j)] != BpeModel::kPad) continue;
        for (int64_t h = 0; h < H; ++h) {
          for (int64_t i = 0; i < T; ++i) {
            m[static_cast<size_t>((((b * H + h) * T) + i) * T + j)] = -1e9;
          }
        }
      }
    }
    attn_mask = Tensor::from_data({B * H, T, T}, std::move(m));
  }

  IntArray pos_ids;
  pos_ids.shape = {T};
  pos_ids.data.resize(static_cast<size_t>(T));
  for (int64_t i = 0; i < T; ++i) pos_ids.data[static_cast<size_t>(i)] = i;

  Tensor x = add(t, embedding(t, p("emb/tok"), ids), embedding(t, p("emb/pos"), pos_ids));
  if (gates && gates->emb.defined()) {
    const int64_t g = gates->emb.numel();
    if (g <= 0 || d % g != 0) {
      throw ShapeError("embedding gate count " + std::to_string(g) +
                       " must evenly divide d_model " + std::to_string(d));
    }
    x = mul(t, x, repeat_interleave(t, gates->emb, d / g));
  }
  x = maybe_dropout(x);

  auto heads_split = [&](const Tensor& m2d) {
    // (B*T, d) -> (B*H, T, dk)
    return reshape(t, transpose(t, reshape(t, m2d, {B, T, H, dk}), {0, 2, 1, 3}),
                   {B * H, T, dk});
  };

  for (int L = 0; L < cfg_.n_layers; ++L) {
    const std::string layer = "layer" + std::to_string(L);
    const Tensor x2d = reshape(t, x, {B * T, d});

    const Tensor q = heads_split(
        add(t, matmul(t, x2d, routed(lang, layer + "/attn/wq")), routed(lang, layer + "/attn/bq")));
    const Tensor k = heads_split(
        add(t, matmul(t, x2d, routed(lang, layer + "/attn/wk")), routed(lang, layer + "/attn/bk")));
    const Tensor v = heads_split(
        add(t, matmul(t, x2d, routed(lang, layer + "/attn/wv")), routed(lang, layer + "/attn/bv")));

    Tensor att = softmax(t, add(t, scale(t, matmul_nt(t, q, k), 1.0 / std::sqrt(static_cast<double>(dk))),
                                attn_mask));
    att = maybe_dropout(att);

    Tensor ctx = reshape(t, matmul(t, att, v), {B, H, T, dk});
    if (gates && L < static_cast<int>(gates->attn.size()) && gates->attn[static_cast<size_t>(L)].defined()) {
      const Tensor head_gate =
          reshape(t, repeat_interleave(t, gates->attn[static_cast<size_t>(L)], T * dk), {H, T, dk});
      ctx = mul(t, ctx, head_gate);
    }
    ctx = reshape(t, transpose(t, ctx, {0, 2, 1, 3}), {B * T, d});

    Tensor attn_out = add(t, matmul(t, ctx, routed(lang, layer + "/attn/wo")),
                          routed(lang, layer + "/attn/bo"));
    attn_out = maybe_dropout(attn_out);
    x = layer_norm(t, add(t, x, reshape(t, attn_out, {B, T, d})), p(layer + "/attn/ln/gamma"),
                   p(layer + "/attn/ln/beta"));

    if (mode_ == CapacityMode::lang_adapter || mode_ == CapacityMode::shared_adapter) {
      const Tensor o = adapter_apply(t, reshape(t, x, {B * T, d}),
                                     routed(lang, layer + "/adapt_attn/wz"),
                                     routed(lang, layer + "/adapt_attn/wh"));
      x = reshape(t, o, {B, T, d});
    }

    const Tensor f_in = x;
    Tensor h = gelu(t, add(t, matmul(t, reshape(t, x, {B * T, d}), routed(lang, layer + "/ffn/w1")),
                           routed(lang, layer + "/ffn/b1")));
    if (gates && L < static_cast<int>(gates->ffn.size()) && gates->ffn[static_cast<size_t>(L)].defined()) {
      const Tensor& fg = gates->ffn[static_cast<size_t>(L)];
      const int64_t g = fg.numel();
      if (g <= 0 || cfg_.d_ffn % g != 0) {
        throw ShapeError("ffn gate count " + std::to_string(g) + " must evenly divide d_ffn " +
                         std::to_string(cfg_.d_ffn));
      }
      h = mul(t, h, g == cfg_.d_ffn ? fg : repeat_interleave(t, fg, cfg_.d_ffn / g));
    }
    Tensor ffn_out =
        add(t, matmul(t, h, routed(lang, layer + "/ffn/w2")), routed(lang, layer + "/ffn/b2"));
    ffn_out = maybe_dropout(ffn_out);
    x = layer_norm(t, add(t, f_in, reshape(t, ffn_out, {B, T, d})), p(layer + "/ffn/ln/gamma"),
                   p(layer + "/ffn/ln/beta"));

    if (mode_ == CapacityMode::lang_adapter || mode_ == CapacityMode::shared_adapter) {
      const Tensor o = adapter_apply(t, reshape(t, x, {B * T, d}),
                                     routed(lang, layer + "/adapt_ffn/wz"),
                                     routed(lang, layer + "/adapt_ffn/wh"));
      x = reshape(t, o, {B, T, d});
    }
  }
  return x;
}

Tensor Model::forward_logits(Tape& t, const IntArray& ids, const std::string& lang,
                             CounterStream* dropout_stream, const GateSet* gates) const {
  const Tensor h = forward_hidden(t, ids, lang, dropout_stream, gates);
  const int64_t B = ids.shape[0];
  const int64_t T = ids.shape[1];
  const Tensor h2d = reshape(t, h, {B * T, cfg_.d_model});
  return add(t, matmul_nt(t, h2d, p("emb/tok")), p("out/bias"));
}

Tensor Model::forward_mlm(Tape& t, const IntArray& inputs, const IntArray& targets,
                          const std::string& lang, CounterStream* dropout_stream,
                          const GateSet* gates) const {
  if (targets.numel() != inputs.numel()) {
    throw ShapeError("targets numel " + std::to_string(targets.numel()) +
                     " != inputs numel " + std::to_string(inputs.numel()));
  }
  const Tensor logits = forward_logits(t, inputs, lang, dropout_stream, gates);
  IntArray flat;
  flat.shape = {targets.numel()};
  flat.data = targets.data;
  return cross_entropy(t, logits, flat, -1);
}

Model Model::clone() const {
  Model m(cfg_, mode_, languages_, seed_);
  for (auto& [name, tensor] : m.params_) {
    tensor.raw() = params_.at(name).data();
  }
  return m;
}

}  // namespace xling
