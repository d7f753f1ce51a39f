#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "xling/common.hpp"
#include "xling/rng.hpp"

namespace xling {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Dense f64 tensor. Value-semantic handle over shared storage; ops never
// mutate their inputs. raw() exists for initialization and optimizer code
// and must not be called on a tensor after it has been recorded on a tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  int64_t dim(int i) const;
  int64_t numel() const;
  bool requires_grad() const;
  void set_requires_grad(bool rg);

  const std::vector<double>& data() const;
  std::vector<double>& raw();
  double item() const;                                // scalar tensors only
  double at(std::initializer_list<int64_t> idx) const;

  Tensor clone() const;  // deep copy with fresh tape identity

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    uint64_t tape_id = 0;
    int64_t node_id = -1;
  };
  std::shared_ptr<Impl> impl_;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  friend class Tape;
};

// Integer array for token ids / targets; not differentiable.
struct IntArray {
  Shape shape;
  std::vector<int64_t> data;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

using ParamMap = std::map<std::string, Tensor>;
using GradientMap = std::map<std::string, Tensor>;

// Reverse-mode tape. Ops record themselves when the tape is recording and at
// least one input is tracked (requires_grad, or itself produced on this
// tape). Single-threaded by design: one live tape at a time per thread.
class Tape {
 public:
  Tape() : Tape(true) {}
  explicit Tape(bool recording);

  bool recording() const { return recording_; }
  size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse.
  void backward(const Tensor& loss);

  bool tracks(const Tensor& t) const;
  // Gradient of a tracked tensor after backward(); undefined Tensor if the
  // tensor never appeared on this tape or received no gradient.
  Tensor grad(const Tensor& t) const;

  // --- op implementation interface ---
  // A backward fn receives the output node's accumulated gradient and
  // scatters into input nodes via grad_buf().
  using BackwardFn = std::function<void(Tape&, const std::vector<double>&)>;
  int64_t ensure_leaf(const Tensor& t);
  void record(const char* op, Tensor& out, BackwardFn fn);
  // Accumulation buffer for a node, zero-initialized on first touch.
  double* grad_buf(int64_t node, int64_t numel);
  bool has_grad(int64_t node) const;
  const std::vector<double>& grad_of(int64_t node) const;

 private:
  struct Node {
    const char* op;
    BackwardFn backward;  // empty for leaves
    int64_t numel;
  };
  bool recording_ = true;
  uint64_t id_;
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool swept_ = false;
};

// Global toggle for post-op NaN/Inf scans (on by default).
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// ------------------------------ primitive ops ------------------------------
// Elementwise ops accept equal shapes, or a `b` whose shape is a trailing
// suffix of `a`'s (broadcast over the leading batch dims). Anything else is
// a ShapeError; explicit reshape is required.

Tensor add(Tape& t, const Tensor& a, const Tensor& b);
Tensor sub(Tape& t, const Tensor& a, const Tensor& b);
Tensor mul(Tape& t, const Tensor& a, const Tensor& b);
Tensor scale(Tape& t, const Tensor& a, double c);
Tensor shift(Tape& t, const Tensor& a, double c);

// 2D (m,k)x(k,n) or batched 3D with equal leading dim.
Tensor matmul(Tape& t, const Tensor& a, const Tensor& b);
// a (.., m, k) times b (.., n, k) transposed: result (.., m, n).
Tensor matmul_nt(Tape& t, const Tensor& a, const Tensor& b);

Tensor relu(Tape& t, const Tensor& a);
Tensor gelu(Tape& t, const Tensor& a);
Tensor tanh_act(Tape& t, const Tensor& a);
Tensor sigmoid(Tape& t, const Tensor& a);

Tensor softmax(Tape& t, const Tensor& a);  // over last dim
Tensor layer_norm(Tape& t, const Tensor& a, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// out shape = ids.shape + [table.dim(1)]
Tensor embedding(Tape& t, const Tensor& table, const IntArray& ids);

// Mean cross-entropy over rows whose target != ignore_index; logits (N, V),
// targets length N. Zero valid rows yield loss 0 with zero gradients.
Tensor cross_entropy(Tape& t, const Tensor& logits, const IntArray& targets,
                     int64_t ignore_index = -1);

Tensor reshape(Tape& t, const Tensor& a, Shape new_shape);
Tensor transpose(Tape& t, const Tensor& a, const std::vector<int>& perm);

Tensor sum(Tape& t, const Tensor& a);   // scalar
Tensor mean(Tape& t, const Tensor& a);  // scalar

// Gradient is passed through where lo < x < hi and zero outside.
Tensor clamp(Tape& t, const Tensor& a, double lo, double hi);

// Repeats each element `k` times along a 1-D tensor: [g] -> [g*k].
Tensor repeat_interleave(Tape& t, const Tensor& a, int64_t k);

// Inverted dropout driven by a counter-based stream; consumes numel(a)
// counter slots so a pass can be replayed by restoring the stream.
Tensor dropout(Tape& t, const Tensor& a, double p, CounterStream& stream);

// ------------------------------ gradients ------------------------------

// Runs backward on `loss` and extracts gradients for `params`. Parameters
// that never reached the tape are absent from the result (gradient zero).
// With strict=true an absent parameter raises Error instead.
GradientMap gradients(Tape& t, const Tensor& loss, const ParamMap& params, bool strict = false);

// Central-difference gradient oracle, (f(p+eps*e) - f(p-eps*e)) / (2*eps)
// per coordinate. Independent of the tape machinery. Evaluates f twice at
// the unperturbed point first and raises OracleError if the results differ
// (non-deterministic f).
GradientMap finite_difference_grad(const std::function<double(const ParamMap&)>& f,
                                   const ParamMap& params, double eps);

}  // namespace xling
