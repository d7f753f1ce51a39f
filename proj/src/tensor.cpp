#include "xling/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

#include "xling/kernels.hpp"

namespace xling {

namespace {

std::atomic<uint64_t> g_tape_counter{1};
bool g_finite_checks = true;

void check_finite(const std::vector<double>& v, const char* op) {
  if (!g_finite_checks) return;
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("op '") + op + "' produced a non-finite value");
    }
  }
}

// Leading repeat count when b's shape is a trailing suffix of a's. Equal
// shapes give 1, a scalar b gives numel(a); -1 when not a suffix.
int64_t suffix_lead(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return -1;
  const size_t off = a.size() - b.size();
  for (size_t i = 0; i < b.size(); ++i) {
    if (a[off + i] != b[i]) return -1;
  }
  int64_t lead = 1;
  for (size_t i = 0; i < off; ++i) {
    lead *= a[i];
  }
  return lead;
}

std::vector<int64_t> row_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i + 1)] * s[static_cast<size_t>(i + 1)];
  }
  return st;
}

std::vector<double> permute_data(const std::vector<double>& in, const Shape& in_shape,
                                 const std::vector<int>& perm) {
  const int nd = static_cast<int>(in_shape.size());
  Shape out_shape(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) {
    out_shape[static_cast<size_t>(i)] = in_shape[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  }
  const auto in_st = row_strides(in_shape);
  const auto out_st = row_strides(out_shape);
  std::vector<double> out(in.size());
  const int64_t n = static_cast<int64_t>(in.size());
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o;
    int64_t in_off = 0;
    for (int i = 0; i < nd; ++i) {
      const int64_t q = rem / out_st[static_cast<size_t>(i)];
      rem -= q * out_st[static_cast<size_t>(i)];
      in_off += q * in_st[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    }
    out[static_cast<size_t>(o)] = in[static_cast<size_t>(in_off)];
  }
  return out;
}

std::vector<int> inverse_perm(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) {
    inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
  }
  return inv;
}

// gb[j] += sign * sum over leading blocks of g.
void reduce_to_suffix(const std::vector<double>& g, int64_t lead, int64_t nb, double* gb,
                      double sign) {
  for (int64_t l = 0; l < lead; ++l) {
    const double* gp = g.data() + l * nb;
    for (int64_t j = 0; j < nb; ++j) {
      gb[j] += sign * gp[j];
    }
  }
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    os << s[i] << (i + 1 < s.size() ? ", " : "");
  }
  os << "]";
  return os.str();
}

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

// ------------------------------ Tensor ------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<Impl>();
  impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("from_data: shape " + shape_str(shape) + " wants " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& x : t.impl_->data) {
    x = rng.next_gaussian() * stddev;
  }
  return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }
int Tensor::ndim() const { return static_cast<int>(impl_->shape.size()); }
int64_t Tensor::dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
int64_t Tensor::numel() const { return static_cast<int64_t>(impl_->data.size()); }
bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool rg) { impl_->requires_grad = rg; }
const std::vector<double>& Tensor::data() const { return impl_->data; }
std::vector<double>& Tensor::raw() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor " + shape_str(impl_->shape) + " is not a scalar");
  }
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  const auto st = row_strides(impl_->shape);
  int64_t off = 0;
  size_t i = 0;
  for (int64_t v : idx) {
    off += v * st[i++];
  }
  return impl_->data[static_cast<size_t>(off)];
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<Impl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

// ------------------------------ Tape ------------------------------

Tape::Tape(bool recording)
    : recording_(recording), id_(g_tape_counter.fetch_add(1, std::memory_order_relaxed)) {}

bool Tape::tracks(const Tensor& t) const {
  if (!t.defined()) return false;
  if (t.impl_->requires_grad) return true;
  return t.impl_->tape_id == id_ && t.impl_->node_id >= 0;
}

int64_t Tape::ensure_leaf(const Tensor& t) {
  if (!t.defined()) return -1;
  auto* im = t.impl_.get();
  if (im->tape_id == id_ && im->node_id >= 0) return im->node_id;
  if (!im->requires_grad) return -1;
  im->tape_id = id_;
  im->node_id = static_cast<int64_t>(nodes_.size());
  nodes_.push_back(Node{"leaf", nullptr, shape_numel(im->shape)});
  grads_.emplace_back();
  return im->node_id;
}

void Tape::record(const char* op, Tensor& out, BackwardFn fn) {
  out.impl_->tape_id = id_;
  out.impl_->node_id = static_cast<int64_t>(nodes_.size());
  nodes_.push_back(Node{op, std::move(fn), out.numel()});
  grads_.emplace_back();
}

double* Tape::grad_buf(int64_t node, int64_t numel) {
  auto& g = grads_[static_cast<size_t>(node)];
  if (g.empty()) {
    g.assign(static_cast<size_t>(numel), 0.0);
  }
  return g.data();
}

bool Tape::has_grad(int64_t node) const {
  return node >= 0 && !grads_[static_cast<size_t>(node)].empty();
}

const std::vector<double>& Tape::grad_of(int64_t node) const {
  return grads_[static_cast<size_t>(node)];
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.impl_->tape_id != id_ || loss.impl_->node_id < 0) {
    throw Error("backward: loss was not recorded on this tape");
  }
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (swept_) {
    throw Error("backward: tape already swept");
  }
  swept_ = true;
  grad_buf(loss.impl_->node_id, 1)[0] = 1.0;
  for (int64_t k = static_cast<int64_t>(nodes_.size()) - 1; k >= 0; --k) {
    auto& node = nodes_[static_cast<size_t>(k)];
    const auto& g = grads_[static_cast<size_t>(k)];
    if (node.backward && !g.empty()) {
      node.backward(*this, g);
    }
  }
  if (g_finite_checks) {
    for (size_t k = 0; k < nodes_.size(); ++k) {
      for (double x : grads_[k]) {
        if (!std::isfinite(x)) {
          throw NumericError(std::string("backward of op '") + nodes_[k].op +
                             "' produced a non-finite gradient");
        }
      }
    }
  }
}

Tensor Tape::grad(const Tensor& t) const {
  if (!t.defined() || t.impl_->tape_id != id_ || t.impl_->node_id < 0) return Tensor();
  const auto& g = grads_[static_cast<size_t>(t.impl_->node_id)];
  if (g.empty()) return Tensor();
  return Tensor::from_data(t.shape(), g);
}

// ------------------------------ elementwise ------------------------------

namespace {

enum class EwKind { add, sub, mul };

Tensor ew_op(Tape& t, const Tensor& a, const Tensor& b, EwKind kind, const char* name) {
  const int64_t lead = suffix_lead(a.shape(), b.shape());
  if (lead < 0) {
    throw ShapeError(std::string(name) + ": shape " + shape_str(a.shape()) +
                     " is incompatible with " + shape_str(b.shape()));
  }
  const int64_t bn = b.numel();
  const int64_t an = a.numel();
  std::vector<double> out(static_cast<size_t>(an));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (int64_t l = 0; l < lead; ++l) {
    const double* ap = pa + l * bn;
    double* op = out.data() + l * bn;
    switch (kind) {
      case EwKind::add:
        for (int64_t j = 0; j < bn; ++j) op[j] = ap[j] + pb[j];
        break;
      case EwKind::sub:
        for (int64_t j = 0; j < bn; ++j) op[j] = ap[j] - pb[j];
        break;
      case EwKind::mul:
        for (int64_t j = 0; j < bn; ++j) op[j] = ap[j] * pb[j];
        break;
    }
  }
  check_finite(out, name);
  Tensor result = Tensor::from_data(a.shape(), std::move(out));
  if (t.recording() && (t.tracks(a) || t.tracks(b))) {
    const int64_t na = t.ensure_leaf(a);
    const int64_t nb = t.ensure_leaf(b);
    t.record(name, result,
             [na, nb, a, b, kind, lead, bn, an](Tape& tp, const std::vector<double>& g) {
               if (na >= 0) {
                 double* ga = tp.grad_buf(na, an);
                 switch (kind) {
                   case EwKind::add:
                   case EwKind::sub:
                     kern::axpy(1.0, g.data(), ga, an);
                     break;
                   case EwKind::mul: {
                     const double* pb2 = b.data().data();
                     for (int64_t l = 0; l < lead; ++l) {
                       for (int64_t j = 0; j < bn; ++j) {
                         ga[l * bn + j] += g[static_cast<size_t>(l * bn + j)] * pb2[j];
                       }
                     }
                     break;
                   }
                 }
               }
               if (nb >= 0) {
                 double* gb = tp.grad_buf(nb, bn);
                 switch (kind) {
                   case EwKind::add:
                     reduce_to_suffix(g, lead, bn, gb, 1.0);
                     break;
                   case EwKind::sub:
                     reduce_to_suffix(g, lead, bn, gb, -1.0);
                     break;
                   case EwKind::mul: {
                     const double* pa2 = a.data().data();
                     for (int64_t l = 0; l < lead; ++l) {
                       for (int64_t j = 0; j < bn; ++j) {
                         gb[j] += g[static_cast<size_t>(l * bn + j)] * pa2[l * bn + j];
                       }
                     }
                     break;
                   }
                 }
               }
             });
  }
  return result;
}

}  // namespace

Tensor add(Tape& t, const Tensor& a, const Tensor& b) { return ew_op(t, a, b, EwKind::add, "add"); }
Tensor sub(Tape& t, const Tensor& a, const Tensor& b) { return ew_op(t, a, b, EwKind::sub, "sub"); }
Tensor mul(Tape& t, const Tensor& a, const Tensor& b) { return ew_op(t, a, b, EwKind::mul, "mul"); }

Tensor scale(Tape& t, const Tensor& a, double c) {
  std::vector<double> out(static_cast<size_t>(a.numel()));
  kern::scale(a.data().data(), c, out.data(), a.numel());
  check_finite(out, "scale");
  Tensor result = Tensor::from_data(a.shape(), std::move(out));
  if (t.recording() && t.tracks(a)) {
    const int64_t na = t.ensure_leaf(a);
    const int64_t an = a.numel();
    t.record("scale", result, [na, an, c](Tape& tp, const std::vector<double>& g) {
      if (na >= 0) kern::axpy(c, g.data(), tp.grad_buf(na, an), an);
    });
  }
  return result;
}

Tensor shift(Tape& t, const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (double& x : out) x += c;
  check_finite(out, "shift");
  Tensor result = Tensor::from_data(a.shape(), std::move(out));
  if (t.recording() && t.tracks(a)) {
    const int64_t na = t.ensure_leaf(a);
    const int64_t an = a.numel();
    t.record("shift", result, [na, an](Tape& tp, const std::vector<double>& g) {
      if (na >= 0) kern::axpy(1.0, g.data(), tp.grad_buf(na, an), an);
    });
  }
  return result;
}

// ------------------------------ matmul ------------------------------

namespace {

struct MatDims {
  int64_t batch, m, k, n;
};

MatDims matmul_dims(const Tensor& a, const Tensor& b, bool b_transposed, const char* name) {
  const auto bad = [&] {
    return ShapeError(std::string(name) + ": shape " + shape_str(a.shape()) +
                      " is incompatible with " + shape_str(b.shape()));
  };
  if (a.ndim() == 2 && b.ndim() == 2) {
    const int64_t k = b_transposed ? b.dim(1) : b.dim(0);
    const int64_t n = b_transposed ? b.dim(0) : b.dim(1);
    if (a.dim(1) != k) throw bad();
    return {1, a.dim(0), k, n};
  }
  if (a.ndim() == 3 && b.ndim() == 3) {
    const int64_t k = b_transposed ? b.dim(2) : b.dim(1);
    const int64_t n = b_transposed ? b.dim(1) : b.dim(2);
    if (a.dim(0) != b.dim(0) || a.dim(2) != k) throw bad();
    return {a.dim(0), a.dim(1), k, n};
  }
  throw bad();
}

}  // namespace

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) {
  const MatDims d = matmul_dims(a, b, false, "matmul");
  Shape out_shape = a.ndim() == 2 ? Shape{d.m, d.n} : Shape{d.batch, d.m, d.n};
  std::vector<double> out(static_cast<size_t>(d.batch * d.m * d.n));
  for (int64_t i = 0; i < d.batch; ++i) {
    kern::matmul(a.data().data() + i * d.m * d.k, b.data().data() + i * d.k * d.n,
                 out.data() + i * d.m * d.n, d.m, d.k, d.n);
  }
  check_finite(out, "matmul");
  Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
  if (t.recording() && (t.tracks(a) || t.tracks(b))) {
    const int64_t na = t.ensure_leaf(a);
    const int64_t nb = t.ensure_leaf(b);
    t.record("matmul", result, [na, nb, a, b, d](Tape& tp, const std::vector<double>& g) {
      if (na >= 0) {
        double* ga = tp.grad_buf(na, d.batch * d.m * d.k);
        std::vector<double> s(static_cast<size_t>(d.m * d.k));
        for (int64_t i = 0; i < d.batch; ++i) {
          kern::matmul_nt(g.data() + i * d.m * d.n, b.data().data() + i * d.k * d.n, s.data(),
                          d.m, d.n, d.k);
          kern::axpy(1.0, s.data(), ga + i * d.m * d.k, d.m * d.k);
        }
      }
      if (nb >= 0) {
        double* gb = tp.grad_buf(nb, d.batch * d.k * d.n);
        std::vector<double> s(static_cast<size_t>(d.k * d.n));
        for (int64_t i = 0; i < d.batch; ++i) {
          kern::matmul_tn(a.data().data() + i * d.m * d.k, g.data() + i * d.m * d.n, s.data(),
                          d.k, d.m, d.n);
          kern::axpy(1.0, s.data(), gb + i * d.k * d.n, d.k * d.n);
        }
      }
    });
  }
  return result;
}

Tensor matmul_nt(Tape& t, const Tensor& a, const Tensor& b) {
  const MatDims d = matmul_dims(a, b, true, "matmul_nt");
  Shape out_shape = a.ndim() == 2 ? Shape{d.m, d.n} : Shape{d.batch, d.m, d.n};
  std::vector<double> out(static_cast<size_t>(d.batch * d.m * d.n));
  for (int64_t i = 0; i < d.batch; ++i) {
    kern::matmul_nt(a.data().data() + i * d.m * d.k, b.data().data() + i * d.n * d.k,
                    out.data() + i * d.m * d.n, d.m, d.k, d.n);
  }
  check_finite(out, "matmul_nt");
  Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
  if (t.recording() && (t.tracks(a) || t.tracks(b))) {
    const int64_t na = t.ensure_leaf(a);
    const int64_t nb = t.ensure_leaf(b);
    t.record("matmul_nt", result, [na, nb, a, b, d](Tape& tp, const std::vector<double>& g) {
      if (na >= 0) {
        double* ga = tp.grad_buf(na, d.batch * d.m * d.k);
        std::vector<double> s(static_cast<size_t>(d.m * d.k));
        for (int64_t i = 0; i < d.batch; ++i) {
          kern::matmul(g.data() + i * d.m * d.n, b.data().data() + i * d.n * d.k, s.data(), d.m,
                       d.n, d.k);
          kern::axpy(1.0, s.data(), ga + i * d.m * d.k, d.m * d.k);
        }
      }
      if (nb >= 0) {
        double* gb = tp.grad_buf(nb, d.batch * d.n * d.k);
        std::vector<double> s(static_cast<size_t>(d.n * d.k));
        for (int64_t i = 0; i < d.batch; ++i) {
          kern::matmul_tn(g.data() + i * d.m * d.n, a.data().data() + i * d.m * d.k, s.data(),
                          d.n, d.m, d.k);
          kern::axpy(1.0, s.data(), gb + i * d.n * d.k, d.n * d.k);
        }
      }
    });
  }
  return result;
}

// ------------------------------ unary ------------------------------

namespace {

Tensor unary_op(Tape& t, const Tensor& a, kern::Unary f, const char* name) {
  std::vector<double> y(static_cast<size_t>(a.numel()));
  kern::unary(f, a.data().data(), y.data(), a.numel());
  check_finite(y, name);
  Tensor result = Tensor::from_data(a.shape(), std::move(y));
  if (t.recording() && t.tracks(a)) {
    const int64_t na = t.ensure_leaf(a);
    t.record(name, result, [na, f, a, result](Tape& tp, const std::vector<double>& g) {
      if (na < 0) return;
      kern::unary_backward(f, a.data().data(), result.data().data(), g.data(),
                           tp.grad_buf(na, a.numel()), a.numel());
    });
  }
  return result;
}

}  // namespace

Tensor relu(Tape& t, const Tensor& a) { return unary_op(t, a, kern::Unary::relu, "relu"); }
Tensor gelu(Tape& t, const Tensor& a) { return unary_op(t, a, kern::Unary::gelu, "gelu"); }
Tensor tanh_act(Tape& t, const Tensor& a) { return unary_op(t, a, kern::Unary::tanh_fn, "tanh"); }
Tensor sigmoid(Tape& t, const Tensor& a) { return unary_op(t, a, kern::Unary::sigmoid, "sigmoid"); }

// ------------------------------ softmax / layer norm ------------------------------

Tensor softmax(Tape& t, const Tensor& a) {
  if (a.ndim() < 1) {
    throw ShapeError("softmax: needs at least one dim, got " + shape_str(a.shape()));
  }
  const int64_t cols = a.dim(a.ndim() - 1);
  const int64_t rows = a.numel() / cols;
  std::vector<double> y(static_cast<size_t>(a.numel()));
  kern::softmax_rows(a.data().data(), y.data(), rows, cols);
  check_finite(y, "softmax");
  Tensor result = Tensor::from_data(a.shape(), std::move(y));
  if (t.recording() && t.tracks(a)) {
    const int64_t na = t.ensure_leaf(a);
    t.record("softmax", result,
             [na, rows, cols, result, an = a.numel()](Tape& tp, const std::vector<double>& g) {
               if (na < 0) return;
               kern::softmax_rows_backward(result.data().data(), g.data(), tp.grad_buf(na, an),
                                           rows, cols);
             });
  }
  return result;
}

Tensor layer_norm(Tape& t, const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
  if (a.ndim() < 1) {
    throw ShapeError("layer_norm: needs at least one dim, got " + shape_str(a.shape()));
  }
  const int64_t cols = a.dim(a.ndim() - 1);
  const int64_t rows = a.numel() / cols;
  if (gamma.shape() != Shape{cols} || beta.shape() != Shape{cols}) {
    throw ShapeError("layer_norm: input " + shape_str(a.shape()) + " needs gamma/beta [" +
                     std::to_string(cols) + "], got " + shape_str(gamma.shape()) + " and " +
                     shape_str(beta.shape()));
  }
  std::vector<double> y(static_cast<size_t>(a.numel()));
  std::vector<double> xhat(static_cast<size_t>(a.numel()));
  std::vector<double> inv_std(static_cast<size_t>(rows));
  kern::layernorm_rows(a.data().data(), gamma.data().data(), beta.data().data(), y.data(),
                       xhat.data(), inv_std.data(), rows, cols, eps);
  check_finite(y, "layer_norm");
  Tensor result = Tensor::from_data(a.shape(), std::move(y));
  if (t.recording() && (t.tracks(a) || t.tracks(gamma) || t.tracks(beta))) {
    const int64_t na = t.ensure_leaf(a);
    const int64_t ng = t.ensure_leaf(gamma);
    const int64_t nb = t.ensure_leaf(beta);
    t.record(
        "layer_norm", result,
        [na, ng, nb, rows, cols, gamma, hx = std::move(xhat), is = std::move(inv_std)](
            Tape& tp, const std::vector<double>& g) {
          std::vector<double> sx, sg, sb;
          double* dx = na >= 0 ? tp.grad_buf(na, rows * cols)
                               : (sx.assign(static_cast<size_t>(rows * cols), 0.0), sx.data());
          double* dg = ng >= 0 ? tp.grad_buf(ng, cols)
                               : (sg.assign(static_cast<size_t>(cols), 0.0), sg.data());
          double* db = nb >= 0 ? tp.grad_buf(nb, cols)
                               : (sb.assign(static_cast<size_t>(cols), 0.0), sb.data());
          kern::layernorm_rows_backward(hx.data(), is.data(), gamma.data().data(), g.data(), dx,
                                        dg, db, rows, cols);
        });
  }
  return result;
}

// ------------------------------ embedding ------------------------------

Tensor embedding(Tape& t, const Tensor& table, const IntArray& ids) {
  if (table.ndim() != 2) {
    throw ShapeError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  }
  const int64_t vocab = table.dim(0);
  const int64_t dim = table.dim(1);
  const int64_t n = ids.numel();
  for (int64_t v : ids.data) {
    if (v < 0 || v >= vocab) {
      throw Error("embedding: id " + std::to_string(v) + " out of range [0, " +
                  std::to_string(vocab) + ")");
    }
  }
  Shape out_shape = ids.shape;
  out_shape.push_back(dim);
  std::vector<double> out(static_cast<size_t>(n * dim));
  for (int64_t i = 0; i < n; ++i) {
    std::memcpy(out.data() + i * dim,
                table.data().data() + ids.data[static_cast<size_t>(i)] * dim,
                static_cast<size_t>(dim) * sizeof(double));
  }
  check_finite(out, "embedding");
  Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
  if (t.recording() && t.tracks(table)) {
    const int64_t nt = t.ensure_leaf(table);
    t.record("embedding", result,
             [nt, dim, n, vocab, idv = ids.data](Tape& tp, const std::vector<double>& g) {
               if (nt < 0) return;
               double* gt = tp.grad_buf(nt, vocab * dim);
               for (int64_t i = 0; i < n; ++i) {
                 kern::serial::axpy(1.0, g.data() + i * dim,
                                    gt + idv[static_cast<size_t>(i)] * dim, dim);
               }
             });
  }
  return result;
}

// ------------------------------ cross entropy ------------------------------

Tensor cross_entropy(Tape& t, const Tensor& logits, const IntArray& targets,
                     int64_t ignore_index) {
  if (logits.ndim() != 2) {
    throw ShapeError("cross_entropy: logits must be 2-D, got " + shape_str(logits.shape()));
  }
  const int64_t n = logits.dim(0);
  const int64_t v = logits.dim(1);
  if (targets.numel() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(n) + " logit rows vs " +
                     std::to_string(targets.numel()) + " targets");
  }
  const double* x = logits.data().data();
  const bool tracked = t.recording() && t.tracks(logits);
  std::vector<double> probs;
  if (tracked) probs.assign(static_cast<size_t>(n * v), 0.0);
  int64_t n_valid = 0;
  double loss_sum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const int64_t tgt = targets.data[static_cast<size_t>(i)];
    if (tgt == ignore_index) continue;
    if (tgt < 0 || tgt >= v) {
      throw Error("cross_entropy: target " + std::to_string(tgt) + " out of range [0, " +
                  std::to_string(v) + ")");
    }
    ++n_valid;
    const double* xi = x + i * v;
    double mx = xi[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, xi[j]);
    double z = 0.0;
    for (int64_t j = 0; j < v; ++j) z += std::exp(xi[j] - mx);
    const double lse = mx + std::log(z);
    loss_sum += lse - xi[tgt];
    if (tracked) {
      double* pi = probs.data() + i * v;
      for (int64_t j = 0; j < v; ++j) pi[j] = std::exp(xi[j] - lse);
    }
  }
  const double loss = n_valid > 0 ? loss_sum / static_cast<double>(n_valid) : 0.0;
  if (g_finite_checks && !std::isfinite(loss)) {
    throw NumericError("op 'cross_entropy' produced a non-finite value");
  }
  Tensor result = Tensor::scalar(loss);
  if (tracked) {
    const int64_t nl = t.ensure_leaf(logits);
    t.record("cross_entropy", result,
             [nl, n, v, n_valid, ignore_index, p = std::move(probs), tgts = targets.data](
                 Tape& tp, const std::vector<double>& g) {
               if (nl < 0 || n_valid == 0) return;
               double* gl = tp.grad_buf(nl, n * v);
               const double w = g[0] / static_cast<double>(n_valid);
               for (int64_t i = 0; i < n; ++i) {
                 const int64_t tgt = tgts[static_cast<size_t>(i)];
                 if (tgt == ignore_index) continue;
                 const double* pi = p.data() + i * v;
                 double* gi = gl + i * v;
                 for (int64_t j = 0; j < v; ++j) gi[j] += w * pi[j];
                 gi[tgt] -= w;
               }
             });
  }
  return result;
}

// ------------------------------ shape ops ------------------------------

Tensor reshape(Tape& t, const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " cannot become " +
                     shape_str(new_shape));
  }
  Tensor result = Tensor::from_data(std::move(new_shape), a.data());
  if (t.recording() && t.tracks(a)) {
    const int64_t na = t.ensure_leaf(a);
    const int64_t an = a.numel();
    t.record("reshape", result, [na, an](Tape& tp, const std::vector<double>& g) {
      if (na >= 0) kern::axpy(1.0, g.data(), tp.grad_buf(na, an), an);
    });
  }
  return result;
}

Tensor transpose(Tape& t, const Tensor& a, const std::vector<int>& perm) {
  const int nd = a.ndim();
  bool valid = static_cast<int>(perm.size()) == nd;
  if (valid) {
    std::vector<int> sorted(perm);
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < nd; ++i) valid = valid && sorted[static_cast<size_t>(i)] == i;
  }
  if (!valid) {
    std::ostringstream os;
    os << "transpose: perm [";
    for (size_t i = 0; i < perm.size(); ++i) os << perm[i] << (i + 1 < perm.size() ? ", " : "");
    os << "] is not a permutation for shape " << shape_str(a.shape());
    throw ShapeError(os.str());
  }
  Shape out_shape(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) {
    out_shape[static_cast<size_t>(i)] = a.dim(perm[static_cast<size_t>(i)]);
  }
  Tensor result =
      Tensor::from_data(std::move(out_shape), permute_data(a.data(), a.shape(), perm));
  if (t.recording() && t.tracks(a)) {
    const int64_t na = t.ensure_leaf(a);
    t.record("transpose", result,
             [na, an = a.numel(), out_sh = result.shape(), inv = inverse_perm(perm)](
                 Tape& tp, const std::vector<double>& g) {
               if (na < 0) return;
               const std::vector<double> gp = permute_data(g, out_sh, inv);
               kern::axpy(1.0, gp.data(), tp.grad_buf(na, an), an);
             });
  }
  return result;
}

// ------------------------------ reductions ------------------------------

Tensor sum(Tape& t, const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  if (g_finite_checks && !std::isfinite(s)) {
    throw NumericError("op 'sum' produced a non-finite value");
  }
  Tensor result = Tensor::scalar(s);
  if (t.recording() && t.tracks(a)) {
    const int64_t na = t.ensure_leaf(a);
    const int64_t an = a.numel();
    t.record("sum", result, [na, an](Tape& tp, const std::vector<double>& g) {
      if (na < 0) return;
      double* ga = tp.grad_buf(na, an);
      for (int64_t i = 0; i < an; ++i) ga[i] += g[0];
    });
  }
  return result;
}

Tensor mean(Tape& t, const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  const double m = s / static_cast<double>(a.numel());
  if (g_finite_checks && !std::isfinite(m)) {
    throw NumericError("op 'mean' produced a non-finite value");
  }
  Tensor result = Tensor::scalar(m);
  if (t.recording() && t.tracks(a)) {
    const int64_t na = t.ensure_leaf(a);
    const int64_t an = a.numel();
    t.record("mean", result, [na, an](Tape& tp, const std::vector<double>& g) {
      if (na < 0) return;
      double* ga = tp.grad_buf(na, an);
      const double w = g[0] / static_cast<double>(an);
      for (int64_t i = 0; i < an; ++i) ga[i] += w;
    });
  }
  return result;
}

// ------------------------------ clamp / repeat / dropout ------------------------------

Tensor clamp(Tape& t, const Tensor& a, double lo, double hi) {
  if (!(lo < hi)) {
    throw ConfigError("clamp: lo " + std::to_string(lo) + " must be below hi " +
                      std::to_string(hi));
  }
  std::vector<double> out(a.data());
  for (double& x : out) x = std::min(std::max(x, lo), hi);
  check_finite(out, "clamp");
  Tensor result = Tensor::from_data(a.shape(), std::move(out));
  if (t.recording() && t.tracks(a)) {
    const int64_t na = t.ensure_leaf(a);
    t.record("clamp", result, [na, a, lo, hi](Tape& tp, const std::vector<double>& g) {
      if (na < 0) return;
      double* ga = tp.grad_buf(na, a.numel());
      const double* x = a.data().data();
      for (int64_t i = 0; i < a.numel(); ++i) {
        if (x[i] > lo && x[i] < hi) ga[i] += g[static_cast<size_t>(i)];
      }
    });
  }
  return result;
}

Tensor repeat_interleave(Tape& t, const Tensor& a, int64_t k) {
  if (a.ndim() != 1 || k <= 0) {
    throw ShapeError("repeat_interleave: needs a 1-D tensor and k > 0, got " +
                     shape_str(a.shape()) + " with k " + std::to_string(k));
  }
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n * k));
  for (int64_t i = 0; i < n; ++i) {
    const double v = a.data()[static_cast<size_t>(i)];
    for (int64_t j = 0; j < k; ++j) out[static_cast<size_t>(i * k + j)] = v;
  }
  Tensor result = Tensor::from_data({n * k}, std::move(out));
  if (t.recording() && t.tracks(a)) {
    const int64_t na = t.ensure_leaf(a);
    t.record("repeat_interleave", result, [na, n, k](Tape& tp, const std::vector<double>& g) {
      if (na < 0) return;
      double* ga = tp.grad_buf(na, n);
      for (int64_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < k; ++j) s += g[static_cast<size_t>(i * k + j)];
        ga[i] += s;
      }
    });
  }
  return result;
}

Tensor dropout(Tape& t, const Tensor& a, double p, CounterStream& stream) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout: p must be in [0, 1), got " + std::to_string(p));
  }
  if (p == 0.0) return a;
  const int64_t n = a.numel();
  const CounterStream saved = stream;  // mask element i = saved.at(i)
  stream.advance(static_cast<uint64_t>(n));
  const double keep = 1.0 - p;
  std::vector<double> out(static_cast<size_t>(n));
  const double* x = a.data().data();
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = saved.at(static_cast<uint64_t>(i)) >= p ? x[i] / keep : 0.0;
  }
  check_finite(out, "dropout");
  Tensor result = Tensor::from_data(a.shape(), std::move(out));
  if (t.recording() && t.tracks(a)) {
    const int64_t na = t.ensure_leaf(a);
    t.record("dropout", result, [na, n, p, keep, saved](Tape& tp, const std::vector<double>& g) {
      if (na < 0) return;
      double* ga = tp.grad_buf(na, n);
      for (int64_t i = 0; i < n; ++i) {
        if (saved.at(static_cast<uint64_t>(i)) >= p) ga[i] += g[static_cast<size_t>(i)] / keep;
      }
    });
  }
  return result;
}

// ------------------------------ gradients ------------------------------

GradientMap gradients(Tape& t, const Tensor& loss, const ParamMap& params, bool strict) {
  t.backward(loss);
  GradientMap out;
  for (const auto& [name, p] : params) {
    Tensor g = t.grad(p);
    if (g.defined()) {
      out.emplace(name, std::move(g));
    } else if (strict) {
      throw Error("gradients: parameter '" + name + "' received no gradient");
    }
  }
  return out;
}

GradientMap finite_difference_grad(const std::function<double(const ParamMap&)>& f,
                                   const ParamMap& params, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-2)) {
    throw ConfigError("finite_difference_grad: eps must lie in [1e-7, 1e-2], got " +
                      std::to_string(eps));
  }
  ParamMap work;
  for (const auto& [name, p] : params) {
    work.emplace(name, p.clone());
  }
  const double f0 = f(work);
  const double f1 = f(work);
  if (std::memcmp(&f0, &f1, sizeof(double)) != 0) {
    throw OracleError(
        "finite_difference_grad: objective is not deterministic; two evaluations at the same "
        "point differ");
  }
  GradientMap out;
  for (auto& [name, p] : work) {
    Tensor g = Tensor::zeros(p.shape());
    for (int64_t i = 0; i < p.numel(); ++i) {
      double& slot = p.raw()[static_cast<size_t>(i)];
      const double orig = slot;
      slot = orig + eps;
      const double fp = f(work);
      slot = orig - eps;
      const double fm = f(work);
      slot = orig;
      g.raw()[static_cast<size_t>(i)] = (fp - fm) / (2.0 * eps);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

}  // namespace xling
