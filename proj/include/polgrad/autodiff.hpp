#pragma once

// Matrix-valued reverse-mode automatic differentiation.
//
// Every node holds an Eigen matrix. Backward rules are expressed with the same
// differentiable ops, so calling grad(..., create_graph = true) yields a
// gradient that can itself be differentiated (Hessian-vector products).
//
// Kink conventions: relu'(0) = 0; minimum/maximum route the gradient to the
// first argument on ties; clip passes the gradient through when
// lo <= x <= hi and blocks it otherwise.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "polgrad/error.hpp"

namespace polgrad::ad {

using Matrix = Eigen::MatrixXd;

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Enables or disables graph recording for the current thread within a scope.
class GradMode {
 public:
  explicit GradMode(bool enabled) : previous_(detail::grad_enabled) {
    detail::grad_enabled = enabled;
  }
  ~GradMode() { detail::grad_enabled = previous_; }
  GradMode(const GradMode&) = delete;
  GradMode& operator=(const GradMode&) = delete;

 private:
  bool previous_;
};

struct NoGrad : GradMode {
  NoGrad() : GradMode(false) {}
};

class Var;

struct Node {
  using Backward = std::function<std::vector<Var>(const Var& self, const Var& grad)>;

  Matrix value;
  std::vector<std::shared_ptr<Node>> parents;
  Backward backward;
  bool requires_grad = false;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  double scalar() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("scalar() on a non 1x1 value");
    return node_->value(0, 0);
  }

  Var parent(std::size_t i) const { return Var(node_->parents.at(i)); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Matrix m) {
  auto n = std::make_shared<Node>();
  n->value = std::move(m);
  return Var(std::move(n));
}

inline Var constant(double x) { return constant(Matrix::Constant(1, 1, x)); }

/// Leaf that gradients are taken with respect to.
inline Var variable(Matrix m) {
  auto n = std::make_shared<Node>();
  n->value = std::move(m);
  n->requires_grad = true;
  return Var(std::move(n));
}

// Declarations first: backward rules refer to each other.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var minimum(const Var& a, const Var& b);
Var maximum(const Var& a, const Var& b);
Var clip(const Var& x, const Matrix& lo, const Matrix& hi);
Var clip(const Var& x, double lo, double hi);
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_rows(const Var& a);
Var sum_cols(const Var& a);
Var broadcast_scalar(const Var& s, Eigen::Index rows, Eigen::Index cols);
Var broadcast_rows(const Var& v, Eigen::Index rows);
Var broadcast_cols(const Var& v, Eigen::Index cols);

namespace detail {

inline Var make(Matrix value, std::initializer_list<Var> parents, Node::Backward fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& p : parents) n->parents.push_back(p.node());
      n->backward = std::move(fn);
    }
  }
  return Var(std::move(n));
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

inline bool is_scalar(const Var& v) { return v.rows() == 1 && v.cols() == 1; }

// Broadcasts a 1x1 operand against a matrix one; other mismatches are errors.
inline std::pair<Var, Var> align(const Var& a, const Var& b, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return {a, b};
  if (is_scalar(a)) return {broadcast_scalar(a, b.rows(), b.cols()), b};
  if (is_scalar(b)) return {a, broadcast_scalar(b, a.rows(), a.cols())};
  require_same_shape(a, b, op);
  return {a, b};
}

inline bool needs(const Var& self, std::size_t i) {
  return self.node()->parents[i]->requires_grad;
}

}  // namespace detail

inline Var add(const Var& a0, const Var& b0) {
  auto [a, b] = detail::align(a0, b0, "add");
  return detail::make(a.value() + b.value(), {a, b},
                      [](const Var&, const Var& g) { return std::vector<Var>{g, g}; });
}

inline Var sub(const Var& a0, const Var& b0) {
  auto [a, b] = detail::align(a0, b0, "sub");
  return detail::make(a.value() - b.value(), {a, b},
                      [](const Var&, const Var& g) { return std::vector<Var>{g, neg(g)}; });
}

inline Var mul(const Var& a0, const Var& b0) {
  auto [a, b] = detail::align(a0, b0, "mul");
  return detail::make(a.value().cwiseProduct(b.value()), {a, b},
                      [](const Var& self, const Var& g) {
                        std::vector<Var> out(2);
                        if (detail::needs(self, 0)) out[0] = mul(g, self.parent(1));
                        if (detail::needs(self, 1)) out[1] = mul(g, self.parent(0));
                        return out;
                      });
}

inline Var div(const Var& a0, const Var& b0) {
  auto [a, b] = detail::align(a0, b0, "div");
  return detail::make(a.value().cwiseQuotient(b.value()), {a, b},
                      [](const Var& self, const Var& g) {
                        std::vector<Var> out(2);
                        const Var den = self.parent(1);
                        if (detail::needs(self, 0)) out[0] = div(g, den);
                        if (detail::needs(self, 1)) out[1] = neg(div(mul(g, self), den));
                        return out;
                      });
}

inline Var neg(const Var& a) {
  return detail::make(-a.value(), {a},
                      [](const Var&, const Var& g) { return std::vector<Var>{neg(g)}; });
}

inline Var scale(const Var& a, double c) {
  return detail::make(c * a.value(), {a},
                      [c](const Var&, const Var& g) { return std::vector<Var>{scale(g, c)}; });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::make((a.value().array() + c).matrix(), {a},
                      [](const Var&, const Var& g) { return std::vector<Var>{g}; });
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()));
  }
  return detail::make(a.value() * b.value(), {a, b}, [](const Var& self, const Var& g) {
    std::vector<Var> out(2);
    if (detail::needs(self, 0)) out[0] = matmul(g, transpose(self.parent(1)));
    if (detail::needs(self, 1)) out[1] = matmul(transpose(self.parent(0)), g);
    return out;
  });
}

inline Var transpose(const Var& a) {
  return detail::make(a.value().transpose(), {a}, [](const Var&, const Var& g) {
    return std::vector<Var>{transpose(g)};
  });
}

inline Var exp(const Var& a) {
  return detail::make(a.value().array().exp().matrix(), {a},
                      [](const Var& self, const Var& g) { return std::vector<Var>{mul(g, self)}; });
}

inline Var log(const Var& a) {
  return detail::make(a.value().array().log().matrix(), {a}, [](const Var& self, const Var& g) {
    return std::vector<Var>{div(g, self.parent(0))};
  });
}

inline Var square(const Var& a) {
  return detail::make(a.value().array().square().matrix(), {a},
                      [](const Var& self, const Var& g) {
                        return std::vector<Var>{scale(mul(g, self.parent(0)), 2.0)};
                      });
}

inline Var tanh(const Var& a) {
  return detail::make(a.value().array().tanh().matrix(), {a}, [](const Var& self, const Var& g) {
    return std::vector<Var>{mul(g, add_scalar(neg(square(self)), 1.0))};
  });
}

inline Var relu(const Var& a) {
  return detail::make(a.value().cwiseMax(0.0), {a}, [](const Var& self, const Var& g) {
    Matrix mask = (self.parent(0).value().array() > 0.0).cast<double>().matrix();
    return std::vector<Var>{mul(g, constant(std::move(mask)))};
  });
}

inline Var minimum(const Var& a0, const Var& b0) {
  auto [a, b] = detail::align(a0, b0, "minimum");
  return detail::make(a.value().cwiseMin(b.value()), {a, b}, [](const Var& self, const Var& g) {
    const Matrix first =
        (self.parent(0).value().array() <= self.parent(1).value().array()).cast<double>().matrix();
    std::vector<Var> out(2);
    if (detail::needs(self, 0)) out[0] = mul(g, constant(first));
    if (detail::needs(self, 1)) out[1] = mul(g, constant((1.0 - first.array()).matrix()));
    return out;
  });
}

inline Var maximum(const Var& a0, const Var& b0) {
  auto [a, b] = detail::align(a0, b0, "maximum");
  return detail::make(a.value().cwiseMax(b.value()), {a, b}, [](const Var& self, const Var& g) {
    const Matrix first =
        (self.parent(0).value().array() >= self.parent(1).value().array()).cast<double>().matrix();
    std::vector<Var> out(2);
    if (detail::needs(self, 0)) out[0] = mul(g, constant(first));
    if (detail::needs(self, 1)) out[1] = mul(g, constant((1.0 - first.array()).matrix()));
    return out;
  });
}

inline Var clip(const Var& x, const Matrix& lo, const Matrix& hi) {
  if (lo.rows() != x.rows() || lo.cols() != x.cols() || hi.rows() != x.rows() ||
      hi.cols() != x.cols()) {
    throw ShapeError("clip: bound shape mismatch");
  }
  Matrix value = x.value().cwiseMax(lo).cwiseMin(hi);
  Matrix pass = ((x.value().array() >= lo.array()) && (x.value().array() <= hi.array()))
                    .cast<double>()
                    .matrix();
  return detail::make(std::move(value), {x},
                      [pass = std::move(pass)](const Var&, const Var& g) {
                        return std::vector<Var>{mul(g, constant(pass))};
                      });
}

inline Var clip(const Var& x, double lo, double hi) {
  return clip(x, Matrix::Constant(x.rows(), x.cols(), lo),
              Matrix::Constant(x.rows(), x.cols(), hi));
}

inline Var sum(const Var& a) {
  const Eigen::Index r = a.rows(), c = a.cols();
  return detail::make(Matrix::Constant(1, 1, a.value().sum()), {a},
                      [r, c](const Var&, const Var& g) {
                        return std::vector<Var>{broadcast_scalar(g, r, c)};
                      });
}

inline Var mean(const Var& a) {
  if (a.value().size() == 0) throw ShapeError("mean of an empty matrix");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

inline Var broadcast_scalar(const Var& s, Eigen::Index rows, Eigen::Index cols) {
  if (!detail::is_scalar(s)) throw ShapeError("broadcast_scalar expects a 1x1 value");
  return detail::make(Matrix::Constant(rows, cols, s.value()(0, 0)), {s},
                      [](const Var&, const Var& g) { return std::vector<Var>{sum(g)}; });
}

/// Column sums: r x c -> 1 x c.
inline Var sum_rows(const Var& a) {
  const Eigen::Index r = a.rows();
  return detail::make(a.value().colwise().sum(), {a}, [r](const Var&, const Var& g) {
    return std::vector<Var>{broadcast_rows(g, r)};
  });
}

/// Row sums: r x c -> r x 1.
inline Var sum_cols(const Var& a) {
  const Eigen::Index c = a.cols();
  return detail::make(a.value().rowwise().sum(), {a}, [c](const Var&, const Var& g) {
    return std::vector<Var>{broadcast_cols(g, c)};
  });
}

/// Replicates a 1 x c row vector into rows x c.
inline Var broadcast_rows(const Var& v, Eigen::Index rows) {
  if (v.rows() != 1) throw ShapeError("broadcast_rows expects a row vector");
  return detail::make(v.value().replicate(rows, 1), {v},
                      [](const Var&, const Var& g) { return std::vector<Var>{sum_rows(g)}; });
}

/// Replicates an r x 1 column vector into r x cols.
inline Var broadcast_cols(const Var& v, Eigen::Index cols) {
  if (v.cols() != 1) throw ShapeError("broadcast_cols expects a column vector");
  return detail::make(v.value().replicate(1, cols), {v},
                      [](const Var&, const Var& g) { return std::vector<Var>{sum_cols(g)}; });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }
inline Var operator-(const Var& a, double c) { return add_scalar(a, -c); }

/// Gradients of the scalar `y` with respect to each of `wrt`. Inputs that `y`
/// does not depend on receive zero matrices. With `create_graph` the returned
/// gradients are themselves differentiable.
inline std::vector<Var> grad(const Var& y, const std::vector<Var>& wrt, bool create_graph = false) {
  if (!y.defined() || !detail::is_scalar(y)) {
    throw ContractError("grad: loss must be a 1x1 scalar");
  }
  GradMode mode(create_graph);

  // Post-order DFS over nodes that carry gradient.
  std::vector<std::shared_ptr<Node>> order;
  if (y.requires_grad()) {
    std::unordered_set<const Node*> visited;
    std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
    stack.emplace_back(y.node(), 0);
    visited.insert(y.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        const auto& p = node->parents[next++];
        if (p->requires_grad && visited.insert(p.get()).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<const Node*, Var> grads;
  if (y.requires_grad()) grads.emplace(y.node().get(), constant(1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto& node = *it;
    auto g = grads.find(node.get());
    if (g == grads.end() || node->parents.empty()) continue;
    const Var gout = g->second;
    std::vector<Var> pg = node->backward(Var(node), gout);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      const auto& p = node->parents[i];
      if (!p->requires_grad || !pg[i].defined()) continue;
      auto [slot, inserted] = grads.try_emplace(p.get(), pg[i]);
      if (!inserted) slot->second = add(slot->second, pg[i]);
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto g = grads.find(w.node().get());
    out.push_back(g != grads.end() ? g->second : constant(Matrix::Zero(w.rows(), w.cols())));
  }
  return out;
}

}  // namespace polgrad::ad
