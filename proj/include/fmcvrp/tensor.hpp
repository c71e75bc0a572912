#pragma once

// Dense tensors with a reverse-mode tape. Values are stored row-major;
// every primitive treats its operands as matrices (rows = product of all
// leading dimensions, cols = last dimension). Matrix kernels go through Eigen.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmcvrp/rng.hpp"

namespace fmcvrp::tensor {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<Matrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const Matrix<T>>;

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <class T>
class Tensor {
 public:
  using value_type = T;
  // Aligned storage keeps Eigen's vectorized reductions in a fixed summation
  // order from run to run.
  using Storage = std::vector<T, Eigen::aligned_allocator<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(count(shape_), fill) {}
  Tensor(std::size_t rows, std::size_t cols, T fill = T{}) : Tensor(Shape{rows, cols}, fill) {}
  Tensor(Shape shape, const std::vector<T>& values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    if (data_.size() != count(shape_))
      throw std::invalid_argument("tensor: " + std::to_string(data_.size()) + " values for shape " + shape_str(shape_));
  }

  template <class Derived>
  static Tensor from_matrix(const Eigen::MatrixBase<Derived>& m) {
    Tensor t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
    t.mat() = m;
    return t;
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : data_.size() / cols(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  Storage& storage() noexcept { return data_; }
  const Storage& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  MatrixMap<T> mat() { return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())}; }
  ConstMatrixMap<T> mat() const {
    return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }
  T item() const {
    if (data_.size() != 1) throw std::invalid_argument("tensor: item() on shape " + shape_str(shape_));
    return data_[0];
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  static std::size_t count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  Shape shape_;
  Storage data_;
};

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (!grad.same_shape(value)) grad = Tensor<T>(value.shape());
    grad.fill(T{});
  }
};

template <class T>
class Tape;

/// Handle to a node on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  explicit Tape(bool grad_enabled = true, bool training = false, std::uint64_t dropout_seed = 0)
      : grad_enabled_(grad_enabled), training_(training), dropout_seed_(dropout_seed) {
    nodes_.reserve(1024);
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v) { return {this, push(std::move(v), false, nullptr, {})}; }

  Var<T> param(Parameter<T>& p) {
    return {this, push(p.value, grad_enabled_ && p.requires_grad, &p, {})};
  }

  /// Registers an operation result. `fn` runs during backward only when some
  /// parent needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, Backward fn) {
    bool needs = false;
    if (grad_enabled_)
      for (const auto& p : parents) needs = needs || nodes_[static_cast<std::size_t>(p.id)].needs_grad;
    return {this, push(std::move(value), needs, nullptr, needs ? std::move(fn) : Backward{})};
  }
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& parents, Backward fn) {
    bool needs = false;
    if (grad_enabled_)
      for (const auto& p : parents) needs = needs || nodes_[static_cast<std::size_t>(p.id)].needs_grad;
    return {this, push(std::move(value), needs, nullptr, needs ? std::move(fn) : Backward{})};
  }

  const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  /// Gradient buffer of node `id`, allocated as zeros on first use.
  Tensor<T>& grad(int id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  bool training() const noexcept { return training_; }
  std::uint64_t next_dropout_seed() { return derive_seed(dropout_seed_, {dropout_calls_++}); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse sweep from a scalar root; parameter gradients are accumulated
  /// into their Parameter::grad buffers.
  void backward(Var<T> root) {
    if (root.tape != this) throw std::invalid_argument("backward: root belongs to another tape");
    if (value(root.id).size() != 1)
      throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(value(root.id).shape()));
    if (swept_) throw std::logic_error("backward: tape already swept");
    swept_ = true;
    if (!needs_grad(root.id)) return;
    grad(root.id)[0] = T{1};
    for (int id = root.id; id >= 0; --id) {
      auto& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.fn) n.fn(*this, id);
      if (n.param) {
        auto& pg = n.param->grad;
        if (!pg.same_shape(n.param->value)) pg = Tensor<T>(n.param->value.shape());
        pg.mat() += n.grad.mat();
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    Parameter<T>* param = nullptr;
    Backward fn;
  };

  int push(Tensor<T> v, bool needs, Parameter<T>* p, Backward fn) {
    nodes_.push_back(Node{std::move(v), {}, needs, p, std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool training_;
  std::uint64_t dropout_seed_;
  std::uint64_t dropout_calls_ = 0;
  bool swept_ = false;
};

namespace detail {
template <class T>
[[noreturn]] void shape_error(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.cols() != B.rows()) detail::shape_error("matmul", A, B);
  Tensor<T> out(A.rows(), B.cols());
  out.mat().noalias() = A.mat() * B.mat();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(a.id)) t.grad(a.id).mat().noalias() += g.mat() * t.value(b.id).mat().transpose();
    if (t.needs_grad(b.id)) t.grad(b.id).mat().noalias() += t.value(a.id).mat().transpose() * g.mat();
  });
}

/// Elementwise sum; `b` may also be a single row broadcast over `a`'s rows.
template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  Tensor<T> out = A;
  const bool broadcast = !A.same_shape(B);
  if (broadcast) {
    if (B.rows() != 1 || B.cols() != A.cols()) detail::shape_error("add", A, B);
    out.mat().rowwise() += B.mat().row(0);
  } else {
    out.mat() += B.mat();
  }
  return a.tape->record(std::move(out), {a, b}, [a, b, broadcast](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(a.id)) t.grad(a.id).mat() += g.mat();
    if (t.needs_grad(b.id)) {
      if (broadcast)
        t.grad(b.id).mat().row(0) += g.mat().colwise().sum();
      else
        t.grad(b.id).mat() += g.mat();
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (!A.same_shape(B)) detail::shape_error("mul", A, B);
  Tensor<T> out(A.shape());
  out.mat() = A.mat().cwiseProduct(B.mat());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(a.id)) t.grad(a.id).mat() += g.mat().cwiseProduct(t.value(b.id).mat());
    if (t.needs_grad(b.id)) t.grad(b.id).mat() += g.mat().cwiseProduct(t.value(a.id).mat());
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  out.mat() *= s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape<T>& t, int self) {
    t.grad(a.id).mat() += s * t.grad(self).mat();
  });
}

template <class T>
Var<T> add_scalar(Var<T> a, T s) {
  Tensor<T> out = a.value();
  out.mat().array() += s;
  return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, int self) { t.grad(a.id).mat() += t.grad(self).mat(); });
}

template <class T>
Var<T> transpose(Var<T> a) {
  const auto& A = a.value();
  Tensor<T> out(A.cols(), A.rows());
  out.mat() = A.mat().transpose();
  return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, int self) {
    t.grad(a.id).mat() += t.grad(self).mat().transpose();
  });
}

/// Concatenation of matrices along rows (axis 0) or columns (axis 1).
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  const auto& first = parts.front().value();
  std::size_t rows = 0, cols = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    if (axis == 0) {
      if (v.cols() != first.cols()) detail::shape_error("concat", first, v);
      rows += v.rows();
      cols = v.cols();
    } else {
      if (v.rows() != first.rows()) detail::shape_error("concat", first, v);
      cols += v.cols();
      rows = v.rows();
    }
  }
  Tensor<T> out(rows, cols);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    offsets.push_back(off);
    const auto r = static_cast<Eigen::Index>(v.rows()), c = static_cast<Eigen::Index>(v.cols());
    if (axis == 0) {
      out.mat().block(static_cast<Eigen::Index>(off), 0, r, c) = v.mat();
      off += v.rows();
    } else {
      out.mat().block(0, static_cast<Eigen::Index>(off), r, c) = v.mat();
      off += v.cols();
    }
  }
  return parts.front().tape->record(std::move(out), parts, [parts, offsets, axis](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const int id = parts[i].id;
      if (!t.needs_grad(id)) continue;
      const auto& v = t.value(id);
      const auto r = static_cast<Eigen::Index>(v.rows()), c = static_cast<Eigen::Index>(v.cols());
      const auto o = static_cast<Eigen::Index>(offsets[i]);
      if (axis == 0)
        t.grad(id).mat() += g.mat().block(o, 0, r, c);
      else
        t.grad(id).mat() += g.mat().block(0, o, r, c);
    }
  });
}

/// Half-open range [begin, end) along rows (axis 0) or columns (axis 1).
template <class T>
Var<T> slice(Var<T> a, int axis, std::size_t begin, std::size_t end) {
  const auto& A = a.value();
  const std::size_t extent = axis == 0 ? A.rows() : A.cols();
  if (begin > end || end > extent)
    throw std::invalid_argument("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                ") outside shape " + shape_str(A.shape()));
  const auto b = static_cast<Eigen::Index>(begin), n = static_cast<Eigen::Index>(end - begin);
  Tensor<T> out = axis == 0 ? Tensor<T>(end - begin, A.cols()) : Tensor<T>(A.rows(), end - begin);
  if (axis == 0)
    out.mat() = A.mat().middleRows(b, n);
  else
    out.mat() = A.mat().middleCols(b, n);
  return a.tape->record(std::move(out), {a}, [a, axis, b, n](Tape<T>& t, int self) {
    if (axis == 0)
      t.grad(a.id).mat().middleRows(b, n) += t.grad(self).mat();
    else
      t.grad(a.id).mat().middleCols(b, n) += t.grad(self).mat();
  });
}

template <class T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  out.mat() = out.mat().cwiseMax(T{0});
  return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, int self) {
    const auto& x = t.value(a.id);
    t.grad(a.id).mat().array() += (x.mat().array() > T{0}).template cast<T>() * t.grad(self).mat().array();
  });
}

namespace detail {
// Stable softmax per row; -inf entries yield exactly 0.
template <class T, class In, class Out>
void softmax_rows(const In& in, Out& out) {
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    const T mx = in.row(r).maxCoeff();
    if (mx == -std::numeric_limits<T>::infinity()) throw std::invalid_argument("softmax: row fully masked");
    out.row(r).array() = (in.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
}
}  // namespace detail

template <class T>
Var<T> row_softmax(Var<T> a) {
  const auto& A = a.value();
  Tensor<T> out(A.shape());
  auto o = out.mat();
  detail::softmax_rows<T>(A.mat(), o);
  return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, int self) {
    const auto y = t.value(self).mat();
    const auto g = t.grad(self).mat();
    const auto dot = (g.cwiseProduct(y)).rowwise().sum();
    t.grad(a.id).mat() += y.cwiseProduct(g - dot.replicate(1, g.cols()));
  });
}

/// Row-wise normalisation to zero mean / unit variance, then gain and bias.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const auto& X = x.value();
  const std::size_t n = X.cols();
  if (gain.value().size() != n || bias.value().size() != n) detail::shape_error("layer_norm", X, gain.value());
  Tensor<T> xhat(X.shape());
  Tensor<T> inv_std(Shape{X.rows(), 1});
  auto xm = X.mat();
  auto hm = xhat.mat();
  for (Eigen::Index r = 0; r < xm.rows(); ++r) {
    const T mu = xm.row(r).mean();
    const T var = (xm.row(r).array() - mu).square().mean();
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    hm.row(r) = (xm.row(r).array() - mu) * is;
  }
  Tensor<T> out(X.shape());
  out.mat() = (hm.array().rowwise() * gain.value().mat().row(0).array()).rowwise() + bias.value().mat().row(0).array();
  return x.tape->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, int self) {
        const auto g = t.grad(self).mat();
        const auto h = xhat.mat();
        if (t.needs_grad(gain.id)) t.grad(gain.id).mat().row(0) += (g.cwiseProduct(h)).colwise().sum();
        if (t.needs_grad(bias.id)) t.grad(bias.id).mat().row(0) += g.colwise().sum();
        if (t.needs_grad(x.id)) {
          const T n = static_cast<T>(h.cols());
          Matrix<T> gh = g.array().rowwise() * t.value(gain.id).mat().row(0).array();
          auto dx = t.grad(x.id).mat();
          for (Eigen::Index r = 0; r < h.rows(); ++r) {
            const T s1 = gh.row(r).sum();
            const T s2 = gh.row(r).dot(h.row(r));
            dx.row(r).array() +=
                inv_std[static_cast<std::size_t>(r)] / n * (n * gh.row(r).array() - s1 - h.row(r).array() * s2);
          }
        }
      });
}

/// Inverted dropout with a Bernoulli mask drawn from the tape's seeded
/// stream; identity outside training mode.
template <class T>
Var<T> dropout(Var<T> a, double p) {
  if (!a.tape->training() || p <= 0.0) return a;
  Rng rng(a.tape->next_dropout_seed());
  std::bernoulli_distribution keep(1.0 - p);
  const T s = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> mask(a.value().shape());
  for (auto& m : mask.values()) m = keep(rng) ? s : T{0};
  Tensor<T> out(a.value().shape());
  out.mat() = a.value().mat().cwiseProduct(mask.mat());
  return a.tape->record(std::move(out), {a}, [a, mask = std::move(mask)](Tape<T>& t, int self) {
    t.grad(a.id).mat() += t.grad(self).mat().cwiseProduct(mask.mat());
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  Tensor<T> out = Tensor<T>::scalar(a.value().mat().sum());
  return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, int self) {
    t.grad(a.id).mat().array() += t.grad(self)[0];
  });
}

/// Mean over unmasked rows of -log softmax(logits + additive_mask)[target].
/// `additive_mask` may be empty; otherwise it has the logits' shape with
/// entries 0 or -inf.
template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& targets, const std::vector<char>& loss_mask,
                     const Tensor<T>& additive_mask = {}) {
  const auto& L = logits.value();
  const std::size_t n = L.rows(), V = L.cols();
  if (targets.size() != n || loss_mask.size() != n)
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                                shape_str(L.shape()));
  if (!additive_mask.empty() && (additive_mask.rows() != n || additive_mask.cols() != V))
    detail::shape_error("cross_entropy", L, additive_mask);
  const auto active = static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), char{1}));
  if (active == 0) throw std::invalid_argument("cross_entropy: every position is masked");

  Tensor<T> probs(Shape{n, V});
  T total{0};
  auto pm = probs.mat();
  for (std::size_t r = 0; r < n; ++r) {
    if (!loss_mask[r]) continue;
    const auto ri = static_cast<Eigen::Index>(r);
    const int tgt = targets[r];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= V)
      throw std::invalid_argument("cross_entropy: target " + std::to_string(tgt) + " outside vocabulary");
    Eigen::Matrix<T, 1, Eigen::Dynamic> row = L.mat().row(ri);
    if (!additive_mask.empty()) row += additive_mask.mat().row(ri);
    const T mx = row.maxCoeff();
    if (mx == -std::numeric_limits<T>::infinity()) throw std::invalid_argument("cross_entropy: row fully masked");
    const Eigen::Array<T, 1, Eigen::Dynamic> e = (row.array() - mx).exp();
    const T z = e.sum();
    pm.row(ri).array() = e / z;
    total += -(row[tgt] - mx - std::log(z));
  }
  const T inv = T{1} / static_cast<T>(active);
  Tensor<T> out = Tensor<T>::scalar(total * inv);
  return logits.tape->record(std::move(out), {logits},
                             [logits, targets, loss_mask, inv, probs = std::move(probs)](Tape<T>& t, int self) {
                               const T g = t.grad(self)[0] * inv;
                               auto dl = t.grad(logits.id).mat();
                               for (std::size_t r = 0; r < targets.size(); ++r) {
                                 if (!loss_mask[r]) continue;
                                 const auto ri = static_cast<Eigen::Index>(r);
                                 dl.row(ri) += g * probs.mat().row(ri);
                                 dl(ri, targets[r]) -= g;
                               }
                             });
}

// ---------------------------------------------------------------------------
// Fused multi-head scaled dot-product attention over a padded batch.

struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t q_len = 0;  // padded query rows per sample
  std::size_t k_len = 0;  // padded key rows per sample
  std::size_t heads = 1;
  bool causal = false;
  std::vector<std::size_t> k_valid;  // real keys per sample; empty = all k_len
};

/// Q is (batch*q_len) x d, K and V are (batch*k_len) x d. Keys at or beyond a
/// sample's k_valid and, when causal, keys after the query row are masked.
template <class T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, const AttentionLayout& layout) {
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& Vv = v.value();
  const std::size_t d = Q.cols();
  if (K.cols() != d || Vv.cols() != d || K.rows() != Vv.rows()) detail::shape_error("attention", K, Vv);
  if (Q.rows() != layout.batch * layout.q_len || K.rows() != layout.batch * layout.k_len)
    detail::shape_error("attention", Q, K);
  if (layout.heads == 0 || d % layout.heads != 0)
    throw std::invalid_argument("attention: width " + std::to_string(d) + " not divisible by head count");
  const std::size_t dk = d / layout.heads;
  const T sc = T{1} / std::sqrt(static_cast<T>(dk));
  const auto ql = static_cast<Eigen::Index>(layout.q_len), kl = static_cast<Eigen::Index>(layout.k_len);
  const auto dke = static_cast<Eigen::Index>(dk);

  Tensor<T> out(Q.rows(), d);
  // Attention weights per (sample, head), q_len x k_len each.
  std::vector<Matrix<T>> weights(layout.batch * layout.heads);
  Matrix<T> scores;
  for (std::size_t b = 0; b < layout.batch; ++b) {
    const auto valid = static_cast<Eigen::Index>(layout.k_valid.empty() ? layout.k_len : layout.k_valid[b]);
    const auto qo = static_cast<Eigen::Index>(b * layout.q_len), ko = static_cast<Eigen::Index>(b * layout.k_len);
    for (std::size_t h = 0; h < layout.heads; ++h) {
      const auto co = static_cast<Eigen::Index>(h * dk);
      scores.noalias() = sc * Q.mat().block(qo, co, ql, dke) * K.mat().block(ko, co, kl, dke).transpose();
      auto& P = weights[b * layout.heads + h];
      P.resize(ql, kl);
      for (Eigen::Index i = 0; i < ql; ++i) {
        const Eigen::Index lim = layout.causal ? std::min(valid, i + 1) : valid;
        if (lim <= 0) {
          P.row(i).setZero();
          continue;
        }
        const T mx = scores.row(i).head(lim).maxCoeff();
        P.row(i).head(lim).array() = (scores.row(i).head(lim).array() - mx).exp();
        P.row(i).head(lim) /= P.row(i).head(lim).sum();
        P.row(i).tail(kl - lim).setZero();
      }
      out.mat().block(qo, co, ql, dke).noalias() = P * Vv.mat().block(ko, co, kl, dke);
    }
  }
  return q.tape->record(
      std::move(out), {q, k, v},
      [q, k, v, layout, weights = std::move(weights), sc, dk](Tape<T>& t, int self) {
        const auto g = t.grad(self).mat();
        const bool gq = t.needs_grad(q.id), gk = t.needs_grad(k.id), gv = t.needs_grad(v.id);
        const auto Qm = t.value(q.id).mat();
        const auto Km = t.value(k.id).mat();
        const auto Vm = t.value(v.id).mat();
        const auto ql = static_cast<Eigen::Index>(layout.q_len), kl = static_cast<Eigen::Index>(layout.k_len);
        const auto dke = static_cast<Eigen::Index>(dk);
        Matrix<T> dP, dS;
        for (std::size_t b = 0; b < layout.batch; ++b) {
          const auto qo = static_cast<Eigen::Index>(b * layout.q_len), ko = static_cast<Eigen::Index>(b * layout.k_len);
          for (std::size_t h = 0; h < layout.heads; ++h) {
            const auto co = static_cast<Eigen::Index>(h * dk);
            const auto& P = weights[b * layout.heads + h];
            const auto gO = g.block(qo, co, ql, dke);
            if (gv) t.grad(v.id).mat().block(ko, co, kl, dke).noalias() += P.transpose() * gO;
            if (!gq && !gk) continue;
            dP.noalias() = gO * Vm.block(ko, co, kl, dke).transpose();
            const auto dot = (dP.cwiseProduct(P)).rowwise().sum();
            dS = P.cwiseProduct(dP - dot.replicate(1, kl)) * sc;
            if (gq) t.grad(q.id).mat().block(qo, co, ql, dke).noalias() += dS * Km.block(ko, co, kl, dke);
            if (gk) t.grad(k.id).mat().block(ko, co, kl, dke).noalias() += dS.transpose() * Qm.block(qo, co, ql, dke);
          }
        }
      });
}

}  // namespace fmcvrp::tensor
