#pragma once

// Dense row-major float64 tensors with a define-by-run tape for reverse-mode
// differentiation, plus the primitives the transformer needs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace transecg::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (std::size_t d : shape)
      if (d == 0) throw std::invalid_argument("tensor dims must be positive, got " + nn::to_string(shape));
    if (numel(shape) != data.size())
      throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                  " does not match shape " + nn::to_string(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }
  static Tensor scalar(double v) { return Tensor({}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(int axis) const { return node_->shape.at(normalize_axis(axis)); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double item() const {
    if (size() != 1) throw std::invalid_argument("item() on tensor of shape " + nn::to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  // Value copy detached from any graph.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  const detail::NodePtr& node() const { return node_; }

  std::size_t normalize_axis(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r)
      throw std::out_of_range("axis " + std::to_string(axis) + " out of range for shape " +
                              nn::to_string(shape()));
    return static_cast<std::size_t>(a);
  }

 private:
  detail::NodePtr node_;
};

// One recorded op: inputs precede the output in tape order.
struct TapeEntry {
  std::string_view op;
  std::vector<detail::NodePtr> inputs;
  detail::NodePtr output;
  std::function<void(const std::vector<detail::NodePtr>&, detail::Node&)> backward;
};

class Tape {
 public:
  static Tape& current() {
    thread_local Tape tape;
    return tape;
  }

  bool recording() const { return enabled_; }
  void set_recording(bool on) { enabled_ = on; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }
  void push(TapeEntry e) { entries_.push_back(std::move(e)); }
  const std::vector<TapeEntry>& entries() const { return entries_; }

 private:
  std::vector<TapeEntry> entries_;
  bool enabled_ = true;
};

// Disables recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape::current().recording()) { Tape::current().set_recording(false); }
  ~NoGradGuard() { Tape::current().set_recording(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

using BackwardFn = std::function<void(const std::vector<NodePtr>&, Node&)>;

inline Tensor make_result(std::string_view op, Shape shape, std::vector<double> data,
                          std::vector<NodePtr> inputs, BackwardFn backward) {
  auto out = std::make_shared<Node>();
  out->shape = std::move(shape);
  out->data = std::move(data);
  auto& tape = Tape::current();
  const bool needs = tape.recording() &&
                     std::any_of(inputs.begin(), inputs.end(),
                                 [](const NodePtr& n) { return n->requires_grad; });
  if (needs) {
    out->requires_grad = true;
    tape.push(TapeEntry{op, std::move(inputs), out, std::move(backward)});
  }
  return Tensor(out);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                                " vs " + to_string(b.shape()));
}

// b may equal a's shape or be a trailing suffix of it (leading batch dims).
inline std::size_t suffix_repeat(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin()))
    throw std::invalid_argument(std::string(op) + ": cannot broadcast " + to_string(sb) +
                                " onto " + to_string(sa));
  return a.size() / b.size();
}

}  // namespace detail

// Reverse accumulation over the tape, newest first, then clears it.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  auto& tape = Tape::current();
  if (tape.empty() || !loss.requires_grad())
    throw std::logic_error("backward: loss is not connected to any recorded op");
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  const auto& entries = tape.entries();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(it->inputs, *it->output);
  }
  tape.clear();
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t rep = detail::suffix_repeat(a, b, "add");
  const std::size_t m = b.size();
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t r = 0; r < rep; ++r)
    for (std::size_t i = 0; i < m; ++i) out[r * m + i] += b[i];
  return detail::make_result("add", a.shape(), std::move(out), {a.node(), b.node()},
                             [rep, m](const auto& in, detail::Node& o) {
                               if (in[0]->requires_grad) {
                                 in[0]->ensure_grad();
                                 for (std::size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i];
                               }
                               if (in[1]->requires_grad) {
                                 in[1]->ensure_grad();
                                 for (std::size_t r = 0; r < rep; ++r)
                                   for (std::size_t i = 0; i < m; ++i) in[1]->grad[i] += o.grad[r * m + i];
                               }
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a.node(), b.node()},
                             [](const auto& in, detail::Node& o) {
                               for (int k = 0; k < 2; ++k) {
                                 if (!in[k]->requires_grad) continue;
                                 const auto& other = in[1 - k]->data;
                                 in[k]->ensure_grad();
                                 for (std::size_t i = 0; i < o.grad.size(); ++i)
                                   in[k]->grad[i] += o.grad[i] * other[i];
                               }
                             });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::make_result("scale", a.shape(), std::move(out), {a.node()},
                             [s](const auto& in, detail::Node& o) {
                               in[0]->ensure_grad();
                               for (std::size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += s * o.grad[i];
                             });
}

// Exact (erf) GELU.
inline Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * a[i] * (1.0 + std::erf(a[i] / std::numbers::sqrt2));
  return detail::make_result("gelu", a.shape(), std::move(out), {a.node()},
                             [](const auto& in, detail::Node& o) {
                               in[0]->ensure_grad();
                               const auto& x = in[0]->data;
                               for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                 const double cdf = 0.5 * (1.0 + std::erf(x[i] / std::numbers::sqrt2));
                                 const double pdf = std::exp(-0.5 * x[i] * x[i]) * std::numbers::inv_sqrtpi /
                                                    std::numbers::sqrt2;
                                 in[0]->grad[i] += o.grad[i] * (cdf + x[i] * pdf);
                               }
                             });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result("sum", {}, {s}, {a.node()}, [](const auto& in, detail::Node& o) {
    in[0]->ensure_grad();
    for (double& g : in[0]->grad) g += o.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// ---------------------------------------------------------------------------
// Linear algebra

// [.., m, k] x [.., k, n]. b's batch dims must equal a's, or b is 2-D and
// shared across a's batch.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw std::invalid_argument("matmul: operands must be at least 2-D, got " + to_string(a.shape()) +
                                " and " + to_string(b.shape()));
  const std::size_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  const bool shared_b = batch_b.empty();
  if (k != k2 || (!shared_b && batch_a != batch_b))
    throw std::invalid_argument("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                                to_string(b.shape()));
  const std::size_t batch = numel(batch_a);
  Shape out_shape = batch_a;
  out_shape.push_back(m);
  out_shape.push_back(n);

  std::vector<double> out(batch * m * n, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const double* pa = A.data() + bi * m * k;
    const double* pb = B.data() + (shared_b ? 0 : bi * k * n);
    double* pc = out.data() + bi * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = pa[i * k + p];
        const double* brow = pb + p * n;
        double* crow = pc + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
  }
  return detail::make_result(
      "matmul", std::move(out_shape), std::move(out), {a.node(), b.node()},
      [batch, m, k, n, shared_b](const auto& in, detail::Node& o) {
        const auto& A = in[0]->data;
        const auto& B = in[1]->data;
        const auto& G = o.grad;
        if (in[0]->requires_grad) {
          in[0]->ensure_grad();
          auto& dA = in[0]->grad;
          for (std::size_t bi = 0; bi < batch; ++bi) {
            const double* pb = B.data() + (shared_b ? 0 : bi * k * n);
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                double acc = 0.0;
                const double* g = G.data() + bi * m * n + i * n;
                const double* brow = pb + p * n;
                for (std::size_t j = 0; j < n; ++j) acc += g[j] * brow[j];
                dA[bi * m * k + i * k + p] += acc;
              }
          }
        }
        if (in[1]->requires_grad) {
          in[1]->ensure_grad();
          auto& dB = in[1]->grad;
          for (std::size_t bi = 0; bi < batch; ++bi) {
            double* pdb = dB.data() + (shared_b ? 0 : bi * k * n);
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                const double av = A[bi * m * k + i * k + p];
                const double* g = G.data() + bi * m * n + i * n;
                double* drow = pdb + p * n;
                for (std::size_t j = 0; j < n; ++j) drow[j] += av * g[j];
              }
          }
        }
      });
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }
inline Tensor linear(const Tensor& x, const Tensor& w) { return matmul(x, w); }

// ---------------------------------------------------------------------------
// Normalization

namespace detail {
struct AxisSplit {
  std::size_t outer, len, inner;
};
inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}
}  // namespace detail

// Max-subtracted softmax along one axis.
inline Tensor softmax(const Tensor& x, int axis = -1) {
  const auto [outer, len, inner] = detail::split_axis(x.shape(), x.normalize_axis(axis));
  std::vector<double> out(x.size());
  const auto X = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = X[base];
      for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, X[base + i * inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double e = std::exp(X[base + i * inner] - mx);
        out[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= z;
    }
  return detail::make_result("softmax", x.shape(), std::move(out), {x.node()},
                             [outer, len, inner](const auto& in, detail::Node& o) {
                               in[0]->ensure_grad();
                               const auto& y = o.data;
                               for (std::size_t ou = 0; ou < outer; ++ou)
                                 for (std::size_t ii = 0; ii < inner; ++ii) {
                                   const std::size_t base = ou * len * inner + ii;
                                   double dot = 0.0;
                                   for (std::size_t i = 0; i < len; ++i)
                                     dot += o.grad[base + i * inner] * y[base + i * inner];
                                   for (std::size_t i = 0; i < len; ++i) {
                                     const std::size_t p = base + i * inner;
                                     in[0]->grad[p] += y[p] * (o.grad[p] - dot);
                                   }
                                 }
                             });
}

// Standardize over the last axis, then gamma * xhat + beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.dim(-1);
  if (d < 2) throw std::invalid_argument("layer_norm: last dim must be >= 2");
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
    throw std::invalid_argument("layer_norm: gamma/beta must have shape [" + std::to_string(d) + "]");
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size()), xhat(x.size()), inv_std(rows);
  const auto X = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = X.data() + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      xhat[r * d + i] = (row[i] - mu) * inv_std[r];
      out[r * d + i] = gamma[i] * xhat[r * d + i] + beta[i];
    }
  }
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](const auto& in, detail::Node& o) {
        const auto& g = in[1]->data;
        if (in[0]->requires_grad) {
          in[0]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
              const double dxh = o.grad[r * d + i] * g[i];
              m1 += dxh;
              m2 += dxh * xhat[r * d + i];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t i = 0; i < d; ++i) {
              const double dxh = o.grad[r * d + i] * g[i];
              in[0]->grad[r * d + i] += inv_std[r] * (dxh - m1 - xhat[r * d + i] * m2);
            }
          }
        }
        if (in[1]->requires_grad) {
          in[1]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) in[1]->grad[i] += o.grad[r * d + i] * xhat[r * d + i];
        }
        if (in[2]->requires_grad) {
          in[2]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) in[2]->grad[i] += o.grad[r * d + i];
        }
      });
}

// ---------------------------------------------------------------------------
// Structural

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw std::invalid_argument("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  return detail::make_result("reshape", std::move(shape),
                             std::vector<double>(x.data().begin(), x.data().end()), {x.node()},
                             [](const auto& in, detail::Node& o) {
                               in[0]->ensure_grad();
                               for (std::size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i];
                             });
}

// out.shape[i] = x.shape[perm[i]].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  if (perm.size() != r) throw std::invalid_argument("permute: rank mismatch");
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw std::invalid_argument("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.shape()[i];
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.shape()[perm[i]];
  // src[j] = input flat index of output element j
  std::vector<std::size_t> src(x.size());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t j = 0; j < src.size(); ++j) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[perm[i]];
    src[j] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> out(x.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = x[src[j]];
  return detail::make_result("permute", std::move(out_shape), std::move(out), {x.node()},
                             [src = std::move(src)](const auto& in, detail::Node& o) {
                               in[0]->ensure_grad();
                               for (std::size_t j = 0; j < o.grad.size(); ++j) in[0]->grad[src[j]] += o.grad[j];
                             });
}

inline Tensor transpose(const Tensor& x, int a = -2, int b = -1) {
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[x.normalize_axis(a)], perm[x.normalize_axis(b)]);
  return permute(x, perm);
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const std::size_t ax = parts[0].normalize_axis(axis);
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw std::invalid_argument("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != ax && s[i] != out_shape[i])
        throw std::invalid_argument("concat: shape mismatch " + to_string(parts[0].shape()) + " vs " +
                                    to_string(s));
    out_shape[ax] += s[ax];
  }
  const auto split = detail::split_axis(out_shape, ax);
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> lens;
  std::size_t acc = 0;
  std::vector<detail::NodePtr> nodes;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[ax];
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(o * len * split.inner), len * split.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * split.len + acc) * split.inner));
    offsets.push_back(acc);
    lens.push_back(len);
    acc += len;
    nodes.push_back(p.node());
  }
  return detail::make_result(
      "concat", std::move(out_shape), std::move(out), std::move(nodes),
      [split, offsets = std::move(offsets), lens = std::move(lens)](const auto& in, detail::Node& o) {
        for (std::size_t k = 0; k < in.size(); ++k) {
          if (!in[k]->requires_grad) continue;
          in[k]->ensure_grad();
          const std::size_t len = lens[k];
          for (std::size_t ou = 0; ou < split.outer; ++ou)
            for (std::size_t i = 0; i < len * split.inner; ++i)
              in[k]->grad[ou * len * split.inner + i] +=
                  o.grad[(ou * split.len + offsets[k]) * split.inner + i];
        }
      });
}

// Elements [begin, end) along axis.
inline Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = x.normalize_axis(axis);
  if (begin >= end || end > x.shape()[ax])
    throw std::invalid_argument("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                ") invalid for shape " + to_string(x.shape()));
  const auto split = detail::split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  const std::size_t len = end - begin;
  std::vector<double> out(numel(out_shape));
  for (std::size_t o = 0; o < split.outer; ++o)
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>((o * split.len + begin) * split.inner),
                len * split.inner, out.begin() + static_cast<std::ptrdiff_t>(o * len * split.inner));
  return detail::make_result("slice", std::move(out_shape), std::move(out), {x.node()},
                             [split, begin, len](const auto& in, detail::Node& o) {
                               in[0]->ensure_grad();
                               for (std::size_t ou = 0; ou < split.outer; ++ou)
                                 for (std::size_t i = 0; i < len * split.inner; ++i)
                                   in[0]->grad[(ou * split.len + begin) * split.inner + i] +=
                                       o.grad[ou * len * split.inner + i];
                             });
}

// Tiles x along a new leading axis of size n.
inline Tensor repeat_leading(const Tensor& x, std::size_t n) {
  if (n == 0) throw std::invalid_argument("repeat_leading: n must be positive");
  Shape out_shape{n};
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  std::vector<double> out;
  out.reserve(n * x.size());
  for (std::size_t r = 0; r < n; ++r) out.insert(out.end(), x.data().begin(), x.data().end());
  const std::size_t m = x.size();
  return detail::make_result("repeat_leading", std::move(out_shape), std::move(out), {x.node()},
                             [n, m](const auto& in, detail::Node& o) {
                               in[0]->ensure_grad();
                               for (std::size_t r = 0; r < n; ++r)
                                 for (std::size_t i = 0; i < m; ++i) in[0]->grad[i] += o.grad[r * m + i];
                             });
}

}  // namespace transecg::nn
