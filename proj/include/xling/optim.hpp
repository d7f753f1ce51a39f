#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "xling/tensor.hpp"

namespace xling {

// Linear warmup to `peak` over `warmup` steps, then inverse-sqrt decay.
// at(0) == 0, at(warmup) == peak, at(4*warmup) == peak/2.
struct LrSchedule {
  double peak = 3e-4;
  int64_t warmup = 200;

  double at(int64_t step) const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moments are allocated lazily per parameter
// name; a parameter absent from the gradient map is left untouched (its
// moments do not decay that step, matching "missing entry means zero
// gradient" at the optimizer boundary: untouched parameters are simply not
// part of the step).
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }

  // Applies one update to every parameter present in `grads`.
  // pre: gradient shapes match parameter shapes; all values finite.
  void step(ParamMap& params, const GradientMap& grads, double lr);

  // Moments exported by-name for checkpointing: "m/<name>", "v/<name>",
  // and a scalar "t/<name>" step counter.
  std::map<std::string, Tensor> export_state() const;
  void import_state(const std::map<std::string, Tensor>& state);

 private:
  struct Slot {
    Tensor m, v;
    int64_t t = 0;
  };
  AdamConfig cfg_;
  std::map<std::string, Slot> slots_;
};

// L2 norm over every gradient coordinate in the map.
double global_grad_norm(const GradientMap& grads);

// Scales all gradients in place so the global norm is at most max_norm.
void clip_gradients(GradientMap& grads, double max_norm);

// True when every gradient coordinate is finite.
bool grads_finite(const GradientMap& grads);

}  // namespace xling
