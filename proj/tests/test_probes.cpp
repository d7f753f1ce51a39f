#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "planted_toy.hpp"
#include "xling/bpe.hpp"
#include "xling/common.hpp"
#include "xling/corpus.hpp"
#include "xling/model.hpp"
#include "xling/probes.hpp"
#include "xling/serialize.hpp"
#include "xling/trainer.hpp"

using namespace xling;
using xling_test::PlantedObjective;

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

std::string tmp_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / ("xling-probes-" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

// Four-group single-layer masks with hand-picked pi values.
MaskParams toy_masks(const std::string& language, const std::vector<double>& pi) {
  MaskShape shape;
  shape.ffn = {static_cast<int64_t>(pi.size())};
  MaskParams mp = init_mask_params(language, shape, 0.0);
  mp.pi.at("mask/layer0/ffn").raw() = pi;
  return mp;
}

GradientMap negated(const GradientMap& g) {
  GradientMap out;
  for (const auto& [name, t] : g) {
    Tensor n = t.clone();
    for (auto& v : n.raw()) v = -v;
    out.emplace(name, std::move(n));
  }
  return out;
}

}  // namespace

TEST_CASE("hard-concrete gate: hand values and saturation") {
  HardConcreteConfig hc;
  hc.validate();

  // pi = 0, u = 0.5: s = sigmoid(0) = 0.5, stretched to 0.5*1.2 - 0.1 = 0.5.
  CHECK(hard_concrete_gate(0.0, 0.5, hc) == doctest::Approx(0.5).epsilon(1e-15));

  CHECK(hard_concrete_gate(50.0, 0.5, hc) == 1.0);
  CHECK(hard_concrete_gate(50.0, 0.01, hc) == 1.0);
  CHECK(hard_concrete_gate(-50.0, 0.5, hc) == 0.0);
  CHECK(hard_concrete_gate(-50.0, 0.99, hc) == 0.0);

  // Interior draw stays inside [0, 1].
  const double z = hard_concrete_gate(0.3, 0.7, hc);
  CHECK(z >= 0.0);
  CHECK(z <= 1.0);

  CHECK_THROWS_AS(hard_concrete_gate(0.0, 0.0, hc), ConfigError);
  CHECK_THROWS_AS(hard_concrete_gate(0.0, 1.0, hc), ConfigError);
}

TEST_CASE("hard-concrete config validation") {
  HardConcreteConfig hc;
  hc.gamma = 0.1;
  CHECK_THROWS_AS(hc.validate(), ConfigError);
  hc = {};
  hc.zeta = 0.9;
  CHECK_THROWS_AS(hc.validate(), ConfigError);
  hc = {};
  hc.beta = 1.0;
  CHECK_THROWS_AS(hc.validate(), ConfigError);
  hc = {};
  hc.beta = 0.0;
  CHECK_THROWS_AS(hc.validate(), ConfigError);
}

TEST_CASE("gate is monotone non-decreasing in pi at fixed u") {
  const HardConcreteConfig hc;
  for (double u : {0.1, 0.3, 0.5, 0.9}) {
    double prev = -1.0;
    for (double pi = -6.0; pi <= 6.0; pi += 0.25) {
      const double z = hard_concrete_gate(pi, u, hc);
      CHECK(z >= prev);
      prev = z;
    }
  }
}

TEST_CASE("expected_l0: closed form, additivity, and Monte-Carlo agreement") {
  const HardConcreteConfig hc;

  // Independent arithmetic for the open probability at pi = 0.
  const double direct = 1.0 / (1.0 + std::exp((2.0 / 3.0) * std::log(0.1 / 1.1)));
  CHECK(gate_open_probability(0.0, hc) == doctest::Approx(direct).epsilon(1e-15));
  CHECK(gate_open_probability(0.0, hc) == doctest::Approx(0.8318).epsilon(2e-4));
  CHECK(gate_open_probability(-50.0, hc) == doctest::Approx(0.0).epsilon(1e-12));

  const std::vector<double> pis{-2.0, 0.0, 2.0};
  double singles = 0.0;
  for (double p : pis) singles += expected_l0(std::vector<double>{p}, hc);
  CHECK(expected_l0(pis, hc) == doctest::Approx(singles).epsilon(1e-15));

  // 100k-draw Monte Carlo of P(z > 0) against the formula, 3 binomial sigma.
  Rng rng(424242);
  const int n = 100000;
  for (double pi : pis) {
    int open = 0;
    for (int i = 0; i < n; ++i) {
      if (hard_concrete_gate(pi, rng.next_open_double(), hc) > 0.0) ++open;
    }
    const double p = gate_open_probability(pi, hc);
    const double sigma = std::sqrt(p * (1.0 - p) / n);
    CHECK(std::abs(static_cast<double>(open) / n - p) <= 3.0 * sigma);
  }
}

TEST_CASE("reparameterized gates match the scalar path and differentiate to pi") {
  const HardConcreteConfig hc;
  const std::vector<double> pis{-0.5, 0.0, 0.5};
  const std::vector<double> us{0.4, 0.5, 0.6};

  std::vector<double> lu(us.size());
  for (size_t i = 0; i < us.size(); ++i) lu[i] = std::log(us[i]) - std::log1p(-us[i]);
  const Tensor noise = Tensor::from_data({3}, lu);

  ParamMap params;
  params.emplace("pi", Tensor::from_data({3}, pis, /*requires_grad=*/true));

  Tape tape(true);
  const Tensor z = reparam_gates(tape, params.at("pi"), noise, hc);
  for (size_t i = 0; i < pis.size(); ++i) {
    CHECK(z.data()[i] == doctest::Approx(hard_concrete_gate(pis[i], us[i], hc)).epsilon(1e-15));
  }

  const Tensor loss = sum(tape, z);
  const GradientMap grads = gradients(tape, loss, params);

  auto f = [&](const ParamMap& p) {
    Tape t2(false);
    return sum(t2, reparam_gates(t2, p.at("pi"), noise, hc)).item();
  };
  const GradientMap fd = finite_difference_grad(f, params, 1e-6);
  for (size_t i = 0; i < pis.size(); ++i) {
    CHECK(grads.at("pi").data()[i] == doctest::Approx(fd.at("pi").data()[i]).epsilon(1e-6));
  }
}

TEST_CASE("expected_l0_term matches the closed form and differentiates") {
  const HardConcreteConfig hc;
  const std::vector<double> pis{-1.5, 0.2, 3.0, -0.1};
  ParamMap params;
  params.emplace("pi", Tensor::from_data({4}, pis, /*requires_grad=*/true));

  Tape tape(true);
  const Tensor term = expected_l0_term(tape, params.at("pi"), hc);
  CHECK(term.item() == doctest::Approx(expected_l0(pis, hc)).epsilon(1e-14));

  const GradientMap grads = gradients(tape, term, params);
  auto f = [&](const ParamMap& p) {
    Tape t2(false);
    return expected_l0_term(t2, p.at("pi"), hc).item();
  };
  const GradientMap fd = finite_difference_grad(f, params, 1e-6);
  for (size_t i = 0; i < pis.size(); ++i) {
    CHECK(grads.at("pi").data()[i] == doctest::Approx(fd.at("pi").data()[i]).epsilon(1e-6));
  }
}

TEST_CASE("logistic noise is deterministic per seed and finite") {
  Rng a(99), b(99), c(100);
  const Tensor ta = logistic_noise({32}, a);
  const Tensor tb = logistic_noise({32}, b);
  const Tensor tc = logistic_noise({32}, c);
  CHECK(std::memcmp(ta.data().data(), tb.data().data(), 32 * sizeof(double)) == 0);
  CHECK(std::memcmp(ta.data().data(), tc.data().data(), 32 * sizeof(double)) != 0);
  for (double v : ta.data()) CHECK(std::isfinite(v));
}

TEST_CASE("mask shape and initial parameters") {
  TransformerConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.d_model = 64;
  cfg.d_ffn = 256;
  cfg.vocab_size = 50;

  const MaskShape shape = mask_shape_for(cfg);
  CHECK(shape.emb == 8);
  CHECK(shape.attn == std::vector<int64_t>{4, 4});
  CHECK(shape.ffn == std::vector<int64_t>{256, 256});
  CHECK(shape.total() == 8 + 8 + 512);

  CHECK(mask_shape_for(cfg, 16).emb == 4);
  CHECK_THROWS_AS(mask_shape_for(cfg, 7), ConfigError);

  const MaskParams mp = init_mask_params("aa", shape, 1.25);
  CHECK(mp.language == "aa");
  CHECK(mp.pi.size() == 5);  // emb + 2 layers x (attn, ffn)
  for (const auto& [name, t] : mp.pi) {
    CHECK(t.requires_grad());
    for (double v : t.data()) CHECK(v == 1.25);
  }

  const auto flat = mp.flat();
  const auto idx = mp.index();
  REQUIRE(flat.size() == static_cast<size_t>(shape.total()));
  REQUIRE(idx.size() == flat.size());
  // Stable order: embedding block first, then layer 0 attention.
  CHECK(idx[0].layer == -1);
  CHECK(idx[0].block == BlockType::embedding);
  CHECK(idx[7].group == 7);
  CHECK(idx[8].layer == 0);
  CHECK(idx[8].block == BlockType::attention);
  CHECK(idx[12].block == BlockType::feedforward);
  CHECK(idx.back().layer == 1);
  CHECK(idx.back().block == BlockType::feedforward);
  CHECK(idx.back().group == 255);
}

TEST_CASE("saturated-open masks reproduce the ungated model exactly") {
  const Model model(lab().mcfg, CapacityMode::shared_only, {"aa", "bb"}, 31);
  const MaskShape shape = mask_shape_for(lab().mcfg, 8);
  const MaskParams open = init_mask_params("aa", shape, 50.0);
  const HardConcreteConfig hc;

  const GateSet gates = mean_gates(open, hc);
  REQUIRE(gates.emb.defined());
  for (double v : gates.emb.data()) CHECK(v == 1.0);

  const double plain = validation_perplexity(model, lab().toks[0], 0.15, 4, 77);
  const double gated = validation_perplexity(model, lab().toks[0], 0.15, 4, 77, 0, &gates);
  CHECK(plain == gated);

  // pi = 0 mean gates sit at exactly the half-open value.
  const GateSet half = mean_gates(init_mask_params("aa", shape, 0.0), hc);
  for (double v : half.ffn[0].data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
  const double half_gated = validation_perplexity(model, lab().toks[0], 0.15, 4, 77, 0, &half);
  CHECK(std::isfinite(half_gated));
  CHECK(half_gated != plain);
}

TEST_CASE("mask persistence round-trips exactly and rejects malformed files") {
  const std::string dir = tmp_dir("persist");
  MaskShape shape;
  shape.emb = 2;
  shape.attn = {2};
  shape.ffn = {3};
  MaskParams mp = init_mask_params("qq", shape, 0.0);
  mp.pi.at("mask/emb").raw() = {0.1234567890123456789, -7.25};
  mp.pi.at("mask/layer0/attn").raw() = {1e-300, -1e300};
  mp.pi.at("mask/layer0/ffn").raw() = {0.0, 3.5, -2.25};

  const std::string path = dir + "/masks.csv";
  save_mask_params(path, mp);
  const MaskParams back = load_mask_params(path);
  CHECK(back.language == "qq");
  CHECK(back.shape == mp.shape);
  const auto a = mp.flat();
  const auto b = back.flat();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  // Deterministic bytes: saving the loaded copy reproduces the file.
  save_mask_params(dir + "/masks2.csv", back);
  std::ifstream f1(path), f2(dir + "/masks2.csv");
  const std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);

  CHECK_THROWS_AS(load_mask_params(dir + "/absent.csv"), IoError);

  {
    std::ofstream out(dir + "/bad_header.csv");
    out << "language,layer,block,group,pi\nqq,-1,embedding,0,1\n";
  }
  CHECK_THROWS_AS(load_mask_params(dir + "/bad_header.csv"), IoError);
  {
    std::ofstream out(dir + "/short_row.csv");
    out << "language,layer,block_type,group_id,pi\nqq,-1,embedding,0\n";
  }
  CHECK_THROWS_AS(load_mask_params(dir + "/short_row.csv"), IoError);
  {
    std::ofstream out(dir + "/mixed_lang.csv");
    out << "language,layer,block_type,group_id,pi\nqq,-1,embedding,0,1\nzz,-1,embedding,1,1\n";
  }
  CHECK_THROWS_AS(load_mask_params(dir + "/mixed_lang.csv"), IoError);
  {
    std::ofstream out(dir + "/gap.csv");
    out << "language,layer,block_type,group_id,pi\nqq,0,feedforward,0,1\nqq,0,feedforward,2,1\n";
  }
  CHECK_THROWS_AS(load_mask_params(dir + "/gap.csv"), IoError);
  {
    std::ofstream out(dir + "/emb_layer.csv");
    out << "language,layer,block_type,group_id,pi\nqq,0,embedding,0,1\n";
  }
  CHECK_THROWS_AS(load_mask_params(dir + "/emb_layer.csv"), IoError);
  {
    std::ofstream out(dir + "/bad_value.csv");
    out << "language,layer,block_type,group_id,pi\nqq,0,feedforward,0,oops\n";
  }
  CHECK_THROWS_AS(load_mask_params(dir + "/bad_value.csv"), IoError);
  {
    std::ofstream out(dir + "/empty.csv");
    out << "language,layer,block_type,group_id,pi\n";
  }
  CHECK_THROWS_AS(load_mask_params(dir + "/empty.csv"), IoError);

  std::filesystem::remove_all(dir);
}

TEST_CASE("gradient cosine: replay, negation, symmetry, scale invariance, sentinel") {
  const Model model(lab().mcfg, CapacityMode::shared_only, {"aa", "bb"}, 40);
  GradientProbeConfig cfg;
  cfg.batch_size = 4;
  cfg.seed = 9;

  const GradientMap ga = shared_gradient(model, lab().toks[0], cfg, 3);
  const GradientMap ga_replay = shared_gradient(model, lab().toks[0], cfg, 3);
  CHECK(gradient_cosine(ga, ga_replay) == doctest::Approx(1.0).epsilon(1e-12));

  CHECK(gradient_cosine(ga, negated(ga)) == doctest::Approx(-1.0).epsilon(1e-12));

  const GradientMap gb = shared_gradient(model, lab().toks[1], cfg, 4);
  const double ab = gradient_cosine(ga, gb);
  CHECK(ab == gradient_cosine(gb, ga));
  CHECK(ab >= -1.0);
  CHECK(ab <= 1.0);

  GradientMap scaled;
  for (const auto& [name, t] : ga) {
    Tensor s = t.clone();
    for (auto& v : s.raw()) v *= 3.75;
    scaled.emplace(name, std::move(s));
  }
  CHECK(gradient_cosine(scaled, gb) == doctest::Approx(ab).epsilon(1e-12));

  GradientMap zeros;
  for (const auto& [name, t] : ga) zeros.emplace(name, Tensor::zeros(t.shape()));
  CHECK(std::isnan(gradient_cosine(ga, zeros)));
  CHECK(std::isnan(gradient_cosine(zeros, zeros)));

  GradientMap missing = ga;
  missing.erase(missing.begin());
  CHECK_THROWS_AS(gradient_cosine(missing, gb), ShapeError);
}

TEST_CASE("shared gradients cover exactly the shared parameters") {
  const Model model(lab().mcfg, CapacityMode::lang_adapter, {"aa", "bb"}, 41);
  GradientProbeConfig cfg;
  cfg.batch_size = 4;
  const GradientMap g = shared_gradient(model, lab().toks[0], cfg, 0);

  const ModelParams parts = model.partition();
  CHECK(g.size() == parts.theta.size());
  for (const auto& [name, t] : g) {
    CHECK(parts.theta.count(name) == 1);
    CHECK(name.rfind("lang/", 0) != 0);
    CHECK(t.shape() == parts.theta.at(name).shape());
  }
}

TEST_CASE("micro-batch accumulation sums the per-batch gradients") {
  const Model model(lab().mcfg, CapacityMode::shared_only, {"aa", "bb"}, 42);
  GradientProbeConfig two;
  two.batch_size = 4;
  two.micro_batches = 2;
  GradientProbeConfig one;
  one.batch_size = 4;
  one.micro_batches = 1;

  const GradientMap acc = shared_gradient(model, lab().toks[0], two, 5);
  const GradientMap g10 = shared_gradient(model, lab().toks[0], one, 10);
  const GradientMap g11 = shared_gradient(model, lab().toks[0], one, 11);
  for (const auto& [name, t] : acc) {
    const auto& a = t.data();
    const auto& x = g10.at(name).data();
    const auto& y = g11.at(name).data();
    for (size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i] == doctest::Approx(x[i] + y[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("probes replay exactly under keyed dropout") {
  const Model model(lab().mcfg, CapacityMode::shared_only, {"aa", "bb"}, 43);
  GradientProbeConfig cfg;
  cfg.batch_size = 4;
  cfg.use_dropout = true;
  // Same language, same data, same dropout key: cosine is exactly 1.
  CHECK(probe_cosine(model, lab().toks[0], 7, lab().toks[0], 7, cfg) ==
        doctest::Approx(1.0).epsilon(1e-12));
  // Different keys draw different batches and dropout noise.
  const double other = probe_cosine(model, lab().toks[0], 7, lab().toks[0], 8, cfg);
  CHECK(other < 1.0);
}

TEST_CASE("learn_masks freezes weights, is deterministic, and validates config") {
  Model model(lab().mcfg, CapacityMode::shared_only, {"aa", "bb"}, 44);

  MaskLearnConfig cfg;
  cfg.steps = 8;
  cfg.batch_size = 4;
  cfg.seed = 13;

  std::vector<std::vector<double>> before;
  for (const auto& [name, p] : model.params()) before.push_back(p.data());

  const MaskParams m1 = learn_masks(model, lab().toks[0], cfg);
  const MaskParams m2 = learn_masks(model, lab().toks[0], cfg);

  size_t i = 0;
  for (const auto& [name, p] : model.params()) {
    CHECK(std::memcmp(p.data().data(), before[i].data(), p.data().size() * sizeof(double)) == 0);
    ++i;
  }

  const auto f1 = m1.flat();
  const auto f2 = m2.flat();
  REQUIRE(f1.size() == f2.size());
  for (size_t j = 0; j < f1.size(); ++j) CHECK(f1[j] == f2[j]);
  CHECK(m1.language == "aa");
  CHECK(m1.shape == mask_shape_for(lab().mcfg, cfg.emb_group_size));

  // A different seed moves the masks differently.
  MaskLearnConfig other = cfg;
  other.seed = 14;
  const auto f3 = learn_masks(model, lab().toks[0], other).flat();
  bool any_diff = false;
  for (size_t j = 0; j < f1.size(); ++j) any_diff = any_diff || f1[j] != f3[j];
  CHECK(any_diff);

  MaskLearnConfig bad = cfg;
  bad.lambda = -1.0;
  CHECK_THROWS_AS(learn_masks(model, lab().toks[0], bad), ConfigError);
  bad = cfg;
  bad.lr = 0.0;
  CHECK_THROWS_AS(learn_masks(model, lab().toks[0], bad), ConfigError);
  bad = cfg;
  bad.emb_group_size = 5;  // does not divide d_model = 16
  CHECK_THROWS_AS(learn_masks(model, lab().toks[0], bad), ConfigError);
}

TEST_CASE("lambda extremes: heavy sparsity pressure prunes, none keeps gates open") {
  // Pretrain until the weights sit near a loss minimum: only then does every
  // open gate genuinely help the MLM loss, which is what the no-pressure
  // check below relies on.
  Model model(lab().mcfg, CapacityMode::shared_only, {"aa", "bb"}, 45);
  {
    TrainConfig tc;
    tc.n_epochs = 1;
    tc.steps_per_epoch = 500;
    tc.batch_size = 8;
    tc.lr.peak = 3e-3;
    tc.lr.warmup = 50;
    tc.seed = 6;
    Trainer trainer(std::move(model), tc);
    trainer.train_one_epoch({&lab().toks[0], &lab().toks[1]}, nullptr);
    model = trainer.model().clone();
  }

  MaskLearnConfig cfg;
  cfg.steps = 60;
  cfg.batch_size = 4;
  cfg.lr = 0.05;
  cfg.seed = 21;

  const HardConcreteConfig hc;
  const double total = static_cast<double>(mask_shape_for(lab().mcfg, 8).total());
  const double init_l0 =
      expected_l0(init_mask_params("aa", mask_shape_for(lab().mcfg, 8), cfg.init_pi), hc);

  MaskLearnConfig heavy = cfg;
  heavy.lambda = 50.0;
  heavy.steps = 150;
  const MaskParams pruned = learn_masks(model, lab().toks[0], heavy);
  CHECK(expected_l0(pruned, hc) < 0.15 * total);
  int negative = 0;
  for (double v : pruned.flat()) negative += v < 0.0;
  CHECK(static_cast<double>(negative) > 0.9 * total);

  MaskLearnConfig free = cfg;
  free.lambda = 0.0;
  const MaskParams kept = learn_masks(model, lab().toks[0], free);
  CHECK(expected_l0(kept, hc) >= init_l0 - 0.02 * total);
  CHECK(expected_l0(kept, hc) > expected_l0(pruned, hc));
}

TEST_CASE("planted structure: language-specific groups recovered") {
  MaskLearnConfig cfg;
  cfg.steps = 250;
  cfg.batch_size = 8;
  cfg.lambda = 1e-3;
  cfg.lr = 0.05;
  cfg.seed = 77;

  const int64_t n_a = 16, n_b = 16, n_shared = 4;
  PlantedObjective obj_a("a", n_a, n_b, n_shared, cfg.batch_size, 303);
  PlantedObjective obj_b("b", n_a, n_b, n_shared, cfg.batch_size, 303);
  const MaskParams ma = learn_masks(obj_a, "a", cfg);
  const MaskParams mb = learn_masks(obj_b, "b", cfg);

  const auto fa = ma.flat();
  const auto fb = mb.flat();
  REQUIRE(fa.size() == static_cast<size_t>(n_a + n_b + n_shared));

  int recovered = 0;
  for (int64_t j = 0; j < n_a; ++j) {
    if (fa[static_cast<size_t>(j)] > 0.0 && fb[static_cast<size_t>(j)] < 0.0) ++recovered;
  }
  CHECK(static_cast<double>(recovered) >= 0.9 * static_cast<double>(n_a));

  // Mirror image: b-only groups kept by b, pruned by a.
  int recovered_b = 0;
  for (int64_t j = n_a; j < n_a + n_b; ++j) {
    if (fb[static_cast<size_t>(j)] > 0.0 && fa[static_cast<size_t>(j)] < 0.0) ++recovered_b;
  }
  CHECK(static_cast<double>(recovered_b) >= 0.9 * static_cast<double>(n_b));

  // Shared groups stay kept by both.
  for (int64_t j = n_a + n_b; j < n_a + n_b + n_shared; ++j) {
    CHECK(fa[static_cast<size_t>(j)] > 0.0);
    CHECK(fb[static_cast<size_t>(j)] > 0.0);
  }

  // The planted groups surface in the top-k as language-specific.
  const auto top = top_k_groups(ma, mb, static_cast<int>(n_a + n_b + n_shared));
  int specific = 0;
  for (const auto& g : top) {
    if (g.label == "specific_to_a" || g.label == "specific_to_b") ++specific;
  }
  CHECK(specific >= static_cast<int>(0.9 * static_cast<double>(n_a + n_b)));
}

TEST_CASE("mask similarity by layer: trivial oracles and indexing mismatch") {
  MaskShape shape;
  shape.emb = 2;
  shape.attn = {2, 2};
  shape.ffn = {3, 3};
  MaskParams a = init_mask_params("a", shape, 0.0);
  a.pi.at("mask/layer0/attn").raw() = {1.0, -2.0};
  a.pi.at("mask/layer0/ffn").raw() = {0.5, 1.5, -0.5};
  a.pi.at("mask/layer1/attn").raw() = {2.0, 2.0};
  a.pi.at("mask/layer1/ffn").raw() = {-1.0, 0.25, 4.0};

  const auto self = mask_similarity_by_layer(a, a);
  REQUIRE(self.size() == 4);  // 2 layers x (attention, feedforward); embedding excluded
  CHECK(self[0].layer == 0);
  CHECK(self[0].block == BlockType::attention);
  CHECK(self[1].block == BlockType::feedforward);
  CHECK(self[2].layer == 1);
  for (const auto& row : self) CHECK(row.cosine == doctest::Approx(1.0).epsilon(1e-12));

  MaskParams neg = init_mask_params("b", shape, 0.0);
  for (auto& [name, t] : neg.pi) {
    const auto& src = a.pi.at(name).data();
    auto& dst = t.raw();
    for (size_t i = 0; i < src.size(); ++i) dst[i] = -src[i];
  }
  for (const auto& row : mask_similarity_by_layer(a, neg)) {
    CHECK(row.cosine == doctest::Approx(-1.0).epsilon(1e-12));
  }

  // Zero vector on one side: undefined similarity sentinel.
  MaskParams zero = init_mask_params("z", shape, 0.0);
  for (const auto& row : mask_similarity_by_layer(a, zero)) CHECK(std::isnan(row.cosine));

  MaskShape other = shape;
  other.ffn = {3, 4};
  CHECK_THROWS_AS(mask_similarity_by_layer(a, init_mask_params("c", other, 0.0)), ShapeError);
}

TEST_CASE("top-k groups: ranking, labels, normalization, edge cases") {
  const MaskParams a = toy_masks("a", {3.0, -2.0, 0.5, -1.0});
  const MaskParams b = toy_masks("b", {1.0, 1.0, -1.0, -1.0});

  CHECK(top_k_groups(a, b, 0).empty());
  CHECK_THROWS_AS(top_k_groups(a, b, 5), ConfigError);
  CHECK_THROWS_AS(top_k_groups(a, b, -1), ConfigError);
  CHECK_THROWS_AS(top_k_groups(a, toy_masks("b", {1.0, 2.0}), 1), ShapeError);

  const auto ranked = top_k_groups(a, b, 4);
  REQUIRE(ranked.size() == 4);
  // |pi_a| descending: 3.0, -2.0, -1.0, 0.5.
  CHECK(ranked[0].index.group == 0);
  CHECK(ranked[1].index.group == 1);
  CHECK(ranked[2].index.group == 3);
  CHECK(ranked[3].index.group == 2);
  for (const auto& g : ranked) {
    CHECK(g.index.layer == 0);
    CHECK(g.index.block == BlockType::feedforward);
  }

  CHECK(ranked[0].label == "universal");       // (+3, +1)
  CHECK(ranked[1].label == "specific_to_b");   // (-2, +1)
  CHECK(ranked[2].label == "dropped_by_both"); // (-1, -1)
  CHECK(ranked[3].label == "specific_to_a");   // (+0.5, -1)

  // Min-max normalization to [-1, 1] within each language.
  CHECK(ranked[0].norm_a == doctest::Approx(1.0));
  CHECK(ranked[1].norm_a == doctest::Approx(-1.0));
  CHECK(ranked[2].norm_a == doctest::Approx(-0.6));
  CHECK(ranked[3].norm_a == doctest::Approx(0.0));
  CHECK(ranked[0].norm_b == doctest::Approx(1.0));
  CHECK(ranked[2].norm_b == doctest::Approx(-1.0));

  // All-positive pair: every group universal.
  const MaskParams pos_a = toy_masks("a", {1.0, 2.0, 3.0, 4.0});
  const MaskParams pos_b = toy_masks("b", {4.0, 3.0, 2.0, 1.0});
  for (const auto& g : top_k_groups(pos_a, pos_b, 4)) CHECK(g.label == "universal");

  // Constant vector: normalization degenerates to 0.
  const MaskParams flat_a = toy_masks("a", {2.0, 2.0, 2.0, 2.0});
  for (const auto& g : top_k_groups(flat_a, pos_b, 4)) CHECK(g.norm_a == 0.0);
}
