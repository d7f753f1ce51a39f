#include "xling/optim.hpp"

#include <cmath>

namespace xling {

double LrSchedule::at(int64_t step) const {
  if (step <= 0) return 0.0;
  if (step < warmup) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup);
  }
  return peak * std::sqrt(static_cast<double>(warmup) / static_cast<double>(step));
}

void Adam::step(ParamMap& params, const GradientMap& grads, double lr) {
  for (const auto& [name, g] : grads) {
    auto pit = params.find(name);
    if (pit == params.end()) {
      throw ConfigError("adam: gradient for unknown parameter '" + name + "'");
    }
    Tensor& p = pit->second;
    if (g.shape() != p.shape()) {
      throw ShapeError("adam: parameter '" + name + "' is " + shape_str(p.shape()) +
                       " but its gradient is " + shape_str(g.shape()));
    }
    Slot& s = slots_[name];
    if (!s.m.defined()) {
      s.m = Tensor::zeros(p.shape());
      s.v = Tensor::zeros(p.shape());
    }
    s.t += 1;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
    auto& pd = p.raw();
    auto& md = s.m.raw();
    auto& vd = s.v.raw();
    const auto& gd = g.data();
    for (size_t i = 0; i < pd.size(); ++i) {
      md[i] = cfg_.beta1 * md[i] + (1.0 - cfg_.beta1) * gd[i];
      vd[i] = cfg_.beta2 * vd[i] + (1.0 - cfg_.beta2) * gd[i] * gd[i];
      const double mhat = md[i] / bc1;
      const double vhat = vd[i] / bc2;
      pd[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

std::map<std::string, Tensor> Adam::export_state() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, slot] : slots_) {
    out.emplace("m/" + name, slot.m.clone());
    out.emplace("v/" + name, slot.v.clone());
    out.emplace("t/" + name, Tensor::scalar(static_cast<double>(slot.t)));
  }
  return out;
}

void Adam::import_state(const std::map<std::string, Tensor>& state) {
  slots_.clear();
  for (const auto& [key, tensor] : state) {
    if (key.size() < 3 || key[1] != '/') {
      throw IoError("adam state: malformed key '" + key + "'");
    }
    const std::string name = key.substr(2);
    Slot& s = slots_[name];
    switch (key[0]) {
      case 'm':
        s.m = tensor.clone();
        break;
      case 'v':
        s.v = tensor.clone();
        break;
      case 't':
        s.t = static_cast<int64_t>(tensor.item());
        break;
      default:
        throw IoError("adam state: malformed key '" + key + "'");
    }
  }
  for (const auto& [name, slot] : slots_) {
    if (!slot.m.defined() || !slot.v.defined()) {
      throw IoError("adam state: incomplete moments for '" + name + "'");
    }
  }
}

double global_grad_norm(const GradientMap& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (double x : g.data()) sq += x * x;
  }
  return std::sqrt(sq);
}

void clip_gradients(GradientMap& grads, double max_norm) {
  const double norm = global_grad_norm(grads);
  if (norm <= max_norm || norm == 0.0) return;
  const double factor = max_norm / norm;
  for (auto& [name, g] : grads) {
    for (double& x : g.raw()) x *= factor;
  }
}

bool grads_finite(const GradientMap& grads) {
  for (const auto& [name, g] : grads) {
    for (double x : g.data()) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

}  // namespace xling
