#pragma once

// Minimal reverse-mode differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass. Nodes live in a deque,
// so references to values stay valid while the tape grows. Row-major
// convention: a sequence of n states of width d is an n x d matrix.

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rul/errors.hpp"

namespace rul::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const;
  int id() const { return id_; }

  const Matrix& value() const;
  double scalar() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }

  /// Leaf that receives a gradient (a model parameter).
  Var leaf(Matrix value) { return push(std::move(value), true, nullptr); }

  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
  }

  Var record(Matrix value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owner(in);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Matrix& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient sink for node `id`, zero-initialised on first use; nullptr when
  /// the node does not participate in differentiation.
  Matrix* grad_target(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return nullptr;
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return &n.grad;
  }

  template <class Expr>
  void accumulate(const Var& v, const Expr& g) {
    if (Matrix* t = grad_target(v.id())) *t += g;
  }

  /// Reverse sweep from a scalar root.
  void backward(const Var& root) {
    check_owner(root);
    if (root.rows() != 1 || root.cols() != 1) throw UsageError("backward: root must be a 1x1 scalar");
    for (Node& n : nodes_) n.grad.resize(0, 0);
    backward_done_ = true;
    if (!nodes_[root.id()].requires_grad) return;
    nodes_[root.id()].grad = Matrix::Constant(1, 1, 1.0);
    for (int i = root.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad.size() != 0) n.backward(*this, n.grad);
    }
  }

  bool backward_done() const { return backward_done_; }

  /// Gradient of the last backward root with respect to `v` (zero if `v` did
  /// not influence it).
  Matrix grad(const Var& v) const {
    check_owner(v);
    if (!backward_done_) throw UsageError("gradient requested before backward pass");
    const Node& n = nodes_[v.id()];
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool requires_grad = false;
  };

  Var push(Matrix value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), std::move(backward), requires_grad});
    return Var(this, static_cast<int>(nodes_.size() - 1));
  }

  void check_owner(const Var& v) const {
    if (v.tape_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size())
      throw UsageError("variable does not belong to this tape");
  }

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

inline Tape& Var::tape() const {
  if (!tape_) throw UsageError("use of an unbound variable");
  return *tape_;
}
inline const Matrix& Var::value() const { return tape().value(id_); }
inline double Var::scalar() const {
  const Matrix& m = value();
  if (m.size() != 1) throw UsageError("scalar(): variable is not 1x1");
  return m(0, 0);
}

namespace detail {
inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValidationError(std::string(op) + ": shape mismatch");
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  detail::same_shape(a, b, "add");
  const Var ca = a, cb = b;
  return a.tape().record(a.value() + b.value(), {a, b}, [ca, cb](Tape& t, const Matrix& g) {
    t.accumulate(ca, g);
    t.accumulate(cb, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_shape(a, b, "sub");
  const Var ca = a, cb = b;
  return a.tape().record(a.value() - b.value(), {a, b}, [ca, cb](Tape& t, const Matrix& g) {
    t.accumulate(ca, g);
    t.accumulate(cb, -g);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_shape(a, b, "mul");
  const Var ca = a, cb = b;
  return a.tape().record(a.value().cwiseProduct(b.value()), {a, b}, [ca, cb](Tape& t, const Matrix& g) {
    t.accumulate(ca, g.cwiseProduct(cb.value()));
    t.accumulate(cb, g.cwiseProduct(ca.value()));
  });
}

inline Var scale(const Var& a, double c) {
  const Var ca = a;
  return a.tape().record(a.value() * c, {a}, [ca, c](Tape& t, const Matrix& g) { t.accumulate(ca, g * c); });
}

inline Var add_constant(const Var& a, double c) {
  const Var ca = a;
  return a.tape().record((a.value().array() + c).matrix(), {a},
                         [ca](Tape& t, const Matrix& g) { t.accumulate(ca, g); });
}

inline Var tanh(const Var& a) {
  Matrix y = a.value().array().tanh().matrix();
  const Var ca = a;
  Matrix dy = (1.0 - y.array().square()).matrix();
  return a.tape().record(std::move(y), {a}, [ca, dy = std::move(dy)](Tape& t, const Matrix& g) {
    t.accumulate(ca, g.cwiseProduct(dy));
  });
}

inline Var sigmoid(const Var& a) {
  Matrix y = a.value().unaryExpr([](double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
  Matrix dy = y.cwiseProduct((1.0 - y.array()).matrix());
  const Var ca = a;
  return a.tape().record(std::move(y), {a}, [ca, dy = std::move(dy)](Tape& t, const Matrix& g) {
    t.accumulate(ca, g.cwiseProduct(dy));
  });
}

inline Var exp(const Var& a) {
  Matrix y = a.value().array().exp().matrix();
  const Var ca = a;
  Matrix keep = y;
  return a.tape().record(std::move(y), {a}, [ca, keep = std::move(keep)](Tape& t, const Matrix& g) {
    t.accumulate(ca, g.cwiseProduct(keep));
  });
}

/// log(max(a, floor)); the clamp blocks the gradient where it is active.
inline Var log_clamped(const Var& a, double floor = 1e-12) {
  const Matrix& x = a.value();
  Matrix y = x.unaryExpr([floor](double v) { return std::log(std::max(v, floor)); });
  Matrix dy = x.unaryExpr([floor](double v) { return v > floor ? 1.0 / v : 0.0; });
  const Var ca = a;
  return a.tape().record(std::move(y), {a}, [ca, dy = std::move(dy)](Tape& t, const Matrix& g) {
    t.accumulate(ca, g.cwiseProduct(dy));
  });
}

/// log(sigmoid(a)), computed without overflow.
inline Var log_sigmoid(const Var& a) {
  const Matrix& x = a.value();
  Matrix y = x.unaryExpr([](double v) { return v >= 0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v)); });
  Matrix dy = x.unaryExpr([](double v) {  // 1 - sigmoid(v)
    return v >= 0 ? std::exp(-v) / (1.0 + std::exp(-v)) : 1.0 / (1.0 + std::exp(v));
  });
  const Var ca = a;
  return a.tape().record(std::move(y), {a}, [ca, dy = std::move(dy)](Tape& t, const Matrix& g) {
    t.accumulate(ca, g.cwiseProduct(dy));
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ValidationError("matmul: inner dimension mismatch");
  const Var ca = a, cb = b;
  return a.tape().record(a.value() * b.value(), {a, b}, [ca, cb](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_target(ca.id())) ga->noalias() += g * cb.value().transpose();
    if (Matrix* gb = t.grad_target(cb.id())) gb->noalias() += ca.value().transpose() * g;
  });
}

/// a * b^T (rows of `a` against rows of `b`).
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ValidationError("matmul_nt: inner dimension mismatch");
  const Var ca = a, cb = b;
  return a.tape().record(a.value() * b.value().transpose(), {a, b}, [ca, cb](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_target(ca.id())) ga->noalias() += g * cb.value();
    if (Matrix* gb = t.grad_target(cb.id())) gb->noalias() += g.transpose() * ca.value();
  });
}

inline Var transpose(const Var& a) {
  const Var ca = a;
  return a.tape().record(a.value().transpose(), {a},
                         [ca](Tape& t, const Matrix& g) { t.accumulate(ca, g.transpose()); });
}

/// Adds a bias vector (m x 1 or 1 x m) to every row of an n x m matrix.
inline Var add_bias(const Var& a, const Var& bias) {
  const Matrix& b = bias.value();
  if (b.size() != a.cols() || (b.rows() != 1 && b.cols() != 1)) throw ValidationError("add_bias: width mismatch");
  Matrix y = a.value();
  const Eigen::RowVectorXd row = Eigen::Map<const Eigen::RowVectorXd>(b.data(), b.size());
  y.rowwise() += row;
  const Var ca = a, cb = bias;
  return a.tape().record(std::move(y), {a, bias}, [ca, cb](Tape& t, const Matrix& g) {
    t.accumulate(ca, g);
    if (Matrix* gb = t.grad_target(cb.id())) {
      const Eigen::RowVectorXd s = g.colwise().sum();
      Eigen::Map<Eigen::RowVectorXd>(gb->data(), gb->size()) += s;
    }
  });
}

/// Scales row i of `a` by c(i); c is n x 1.
inline Var scale_rows(const Var& c, const Var& a) {
  if (c.cols() != 1 || c.rows() != a.rows()) throw ValidationError("scale_rows: shape mismatch");
  const Var cc = c, ca = a;
  Matrix y = c.value().col(0).asDiagonal() * a.value();
  return a.tape().record(std::move(y), {c, a}, [cc, ca](Tape& t, const Matrix& g) {
    if (Matrix* gc = t.grad_target(cc.id())) *gc += g.cwiseProduct(ca.value()).rowwise().sum();
    if (Matrix* ga = t.grad_target(ca.id())) *ga += cc.value().col(0).asDiagonal() * g;
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Var sum(const Var& a) {
  const Var ca = a;
  return a.tape().record(Matrix::Constant(1, 1, a.value().sum()), {a}, [ca](Tape& t, const Matrix& g) {
    t.accumulate(ca, Matrix::Constant(ca.rows(), ca.cols(), g(0, 0)));
  });
}

inline Var mean_rows(const Var& a) {
  const auto n = static_cast<double>(a.rows());
  if (a.rows() == 0) throw ValidationError("mean_rows: empty input");
  const Var ca = a;
  return a.tape().record(a.value().colwise().mean(), {a}, [ca, n](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_target(ca.id())) ga->rowwise() += (g.row(0) / n);
  });
}

inline Var row_slice(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ValidationError("row_slice: out of range");
  const Var ca = a;
  return a.tape().record(a.value().middleRows(start, count), {a}, [ca, start, count](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_target(ca.id())) ga->middleRows(start, count) += g;
  });
}

inline Var element(const Var& a, Eigen::Index r, Eigen::Index c) {
  const Var ca = a;
  return a.tape().record(Matrix::Constant(1, 1, a.value()(r, c)), {a}, [ca, r, c](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_target(ca.id())) (*ga)(r, c) += g(0, 0);
  });
}

/// Column vector of a(t, cols[t]).
inline Var pick(const Var& a, std::vector<int> cols) {
  if (static_cast<Eigen::Index>(cols.size()) != a.rows()) throw ValidationError("pick: one column per row required");
  Matrix y(a.rows(), 1);
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    if (cols[r] < 0 || cols[r] >= a.cols()) throw ValidationError("pick: column out of range");
    y(r, 0) = a.value()(r, cols[r]);
  }
  const Var ca = a;
  return a.tape().record(std::move(y), {a}, [ca, cols = std::move(cols)](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_target(ca.id()))
      for (Eigen::Index r = 0; r < g.rows(); ++r) (*ga)(r, cols[r]) += g(r, 0);
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ValidationError("concat_rows: width mismatch");
    rows += p.rows();
  }
  Matrix y(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    y.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return parts[0].tape().record(std::move(y), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (const Var& p : parts) {
      t.accumulate(p, g.middleRows(off, p.rows()));
      off += p.rows();
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat_cols: no inputs");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ValidationError("concat_cols: height mismatch");
    cols += p.cols();
  }
  Matrix y(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    y.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts[0].tape().record(std::move(y), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (const Var& p : parts) {
      t.accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

/// Repeats a 1 x m row n times.
inline Var broadcast_rows(const Var& a, Eigen::Index n) {
  if (a.rows() != 1) throw ValidationError("broadcast_rows: expects a single row");
  const Var ca = a;
  return a.tape().record(a.value().replicate(n, 1), {a},
                         [ca](Tape& t, const Matrix& g) { t.accumulate(ca, g.colwise().sum()); });
}

/// Row-gather from a table (embedding lookup).
inline Var gather_rows(const Var& table, std::vector<int> idx) {
  Matrix y(static_cast<Eigen::Index>(idx.size()), table.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= table.rows()) throw ValidationError("gather_rows: index out of range");
    y.row(static_cast<Eigen::Index>(i)) = table.value().row(idx[i]);
  }
  const Var ct = table;
  return table.tape().record(std::move(y), {table}, [ct, idx = std::move(idx)](Tape& t, const Matrix& g) {
    if (Matrix* gt = t.grad_target(ct.id()))
      for (std::size_t i = 0; i < idx.size(); ++i) gt->row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

/// y(:, idx[j]) += a(:, j): folds per-position mass onto vocabulary columns.
inline Var scatter_cols(const Var& a, std::vector<int> idx, Eigen::Index width) {
  if (static_cast<Eigen::Index>(idx.size()) != a.cols()) throw ValidationError("scatter_cols: index count mismatch");
  Matrix y = Matrix::Zero(a.rows(), width);
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= width) throw ValidationError("scatter_cols: index out of range");
    y.col(idx[j]) += a.value().col(static_cast<Eigen::Index>(j));
  }
  const Var ca = a;
  return a.tape().record(std::move(y), {a}, [ca, idx = std::move(idx)](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_target(ca.id()))
      for (std::size_t j = 0; j < idx.size(); ++j) ga->col(static_cast<Eigen::Index>(j)) += g.col(idx[j]);
  });
}

// ---------------------------------------------------------------------------
// Softmax family (max-subtracted)

inline Matrix softmax_rows_value(const Matrix& x) {
  Matrix y = x;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

inline Var softmax_rows(const Var& a) {
  Matrix y = softmax_rows_value(a.value());
  Matrix keep = y;
  const Var ca = a;
  return a.tape().record(std::move(y), {a}, [ca, keep = std::move(keep)](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_target(ca.id())) {
      const Eigen::VectorXd dot = g.cwiseProduct(keep).rowwise().sum();
      *ga += keep.cwiseProduct(g - dot.replicate(1, g.cols()));
    }
  });
}

inline Var log_softmax_rows(const Var& a) {
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    y.row(r) = (x.row(r).array() - lse).matrix();
  }
  Matrix probs = y.array().exp().matrix();
  const Var ca = a;
  return a.tape().record(std::move(y), {a}, [ca, probs = std::move(probs)](Tape& t, const Matrix& g) {
    if (Matrix* ga = t.grad_target(ca.id())) {
      const Eigen::VectorXd s = g.rowwise().sum();
      *ga += g - probs.cwiseProduct(s.replicate(1, g.cols()));
    }
  });
}

// Convenience operators for the common cases.
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

}  // namespace rul::ad
