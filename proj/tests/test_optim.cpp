#include <cmath>
#include <cstring>

#include "doctest.h"
#include "xling/optim.hpp"

using namespace xling;
using doctest::Approx;

TEST_CASE("lr schedule: warmup ramp and inverse-sqrt decay") {
  LrSchedule sched{1e-3, 100};
  CHECK(sched.at(0) == 0.0);
  CHECK(sched.at(50) == Approx(5e-4));
  CHECK(sched.at(100) == Approx(1e-3));
  // Inverse-sqrt: four times the warmup step halves the rate.
  CHECK(sched.at(400) == Approx(5e-4));
  CHECK(sched.at(10000) == Approx(1e-3 * std::sqrt(100.0 / 10000.0)));
  // Monotone non-increasing after warmup.
  CHECK(sched.at(101) <= sched.at(100));
  CHECK(sched.at(500) < sched.at(200));
}

TEST_CASE("adam: first step matches the hand-derived update") {
  // With zero-initialized moments, bias correction makes the very first
  // update equal to lr * g / (|g| + eps') up to the eps placement; derive
  // it exactly instead of assuming.
  AdamConfig cfg;
  Adam opt(cfg);
  ParamMap params;
  params.emplace("w", Tensor::from_data({2}, {1.0, -2.0}));
  GradientMap grads;
  grads.emplace("w", Tensor::from_data({2}, {0.5, -0.25}));
  const double lr = 0.1;
  opt.step(params, grads, lr);

  for (int i = 0; i < 2; ++i) {
    const double g = (i == 0) ? 0.5 : -0.25;
    const double m = (1 - cfg.beta1) * g;
    const double v = (1 - cfg.beta2) * g * g;
    const double mhat = m / (1 - cfg.beta1);
    const double vhat = v / (1 - cfg.beta2);
    const double expect = ((i == 0) ? 1.0 : -2.0) - lr * mhat / (std::sqrt(vhat) + cfg.eps);
    CHECK(params.at("w").data()[static_cast<size_t>(i)] == Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("adam: two steps on a scalar match a scalar re-implementation") {
  AdamConfig cfg;
  Adam opt(cfg);
  ParamMap params;
  params.emplace("x", Tensor::scalar(0.7));
  double x = 0.7, m = 0.0, v = 0.0;
  const double lr = 0.05;
  for (int t = 1; t <= 2; ++t) {
    const double g = 2.0 * x;  // d/dx of x^2
    GradientMap grads;
    grads.emplace("x", Tensor::scalar(g));
    opt.step(params, grads, lr);

    m = cfg.beta1 * m + (1 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
    const double mhat = m / (1 - std::pow(cfg.beta1, t));
    const double vhat = v / (1 - std::pow(cfg.beta2, t));
    x -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    CHECK(params.at("x").item() == Approx(x).epsilon(1e-14));
  }
}

TEST_CASE("adam: parameters absent from the gradient map are untouched") {
  Adam opt;
  ParamMap params;
  params.emplace("a", Tensor::from_data({2}, {1.0, 2.0}));
  params.emplace("b", Tensor::from_data({2}, {3.0, 4.0}));
  GradientMap grads;
  grads.emplace("a", Tensor::from_data({2}, {1.0, 1.0}));
  opt.step(params, grads, 0.1);
  CHECK(params.at("b").data()[0] == 3.0);
  CHECK(params.at("b").data()[1] == 4.0);
  CHECK(params.at("a").data()[0] != 1.0);

  // Later step that includes "b" starts its moments fresh at t=1.
  GradientMap grads2;
  grads2.emplace("b", Tensor::from_data({2}, {0.5, 0.5}));
  opt.step(params, grads2, 0.1);
  // First-step update with bias correction is ~lr in magnitude.
  CHECK(params.at("b").data()[0] == Approx(3.0 - 0.1).epsilon(1e-6));
}

TEST_CASE("adam: unknown gradient name or shape mismatch throws") {
  Adam opt;
  ParamMap params;
  params.emplace("a", Tensor::from_data({2}, {1.0, 2.0}));
  GradientMap bad_name;
  bad_name.emplace("zzz", Tensor::from_data({2}, {1.0, 1.0}));
  CHECK_THROWS_AS(opt.step(params, bad_name, 0.1), ConfigError);
  GradientMap bad_shape;
  bad_shape.emplace("a", Tensor::from_data({3}, {1.0, 1.0, 1.0}));
  CHECK_THROWS_AS(opt.step(params, bad_shape, 0.1), ShapeError);
}

TEST_CASE("adam: export/import state resumes bit-identically") {
  AdamConfig cfg;
  Adam opt(cfg);
  ParamMap params;
  params.emplace("w", Tensor::from_data({3}, {0.1, -0.2, 0.3}));

  auto grad_at = [&](int t) {
    const double s = 0.1 * (t + 1);
    GradientMap g;
    g.emplace("w", Tensor::from_data({3}, {s, -s, 2 * s}));
    return g;
  };

  for (int t = 0; t < 3; ++t) opt.step(params, grad_at(t), 0.01);

  // Fork: continue directly vs. round-trip through exported state.
  ParamMap params2;
  params2.emplace("w", params.at("w").clone());
  Adam opt2(cfg);
  opt2.import_state(opt.export_state());

  for (int t = 3; t < 6; ++t) {
    opt.step(params, grad_at(t), 0.01);
    opt2.step(params2, grad_at(t), 0.01);
  }
  const auto& a = params.at("w").data();
  const auto& b = params2.at("w").data();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("gradient clipping: rescales only when above the threshold") {
  GradientMap g;
  g.emplace("a", Tensor::from_data({2}, {3.0, 0.0}));
  g.emplace("b", Tensor::from_data({1}, {4.0}));
  CHECK(global_grad_norm(g) == Approx(5.0));

  clip_gradients(g, 10.0);  // below threshold: untouched
  CHECK(g.at("a").data()[0] == 3.0);

  clip_gradients(g, 2.5);  // above: scaled to norm 2.5
  CHECK(global_grad_norm(g) == Approx(2.5));
  CHECK(g.at("a").data()[0] == Approx(1.5));
  CHECK(g.at("b").data()[0] == Approx(2.0));
}

TEST_CASE("grads_finite flags non-finite coordinates") {
  GradientMap g;
  g.emplace("a", Tensor::from_data({2}, {1.0, 2.0}));
  CHECK(grads_finite(g));
  g.at("a").raw()[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(grads_finite(g));
}
