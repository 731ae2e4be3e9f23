#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "polgrad/autodiff.hpp"
#include "polgrad/error.hpp"
#include "polgrad/random.hpp"

namespace polgrad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Flat parameter vector. Canonical layout is layer-major; within a layer the
/// weight matrix is stored row-major, followed by the bias.
using ParamVector = Eigen::VectorXd;

enum class Activation { tanh, relu, identity };
enum class InitScheme { default_uniform, orthogonal_scaled };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + s + "'");
}

/// Per-layer gains for orthogonal_scaled initialization.
struct InitGains {
  double hidden = std::numbers::sqrt2;
  double output = 1.0;
};

/// Feed-forward network: affine layers with `activation` between them and a
/// linear output layer.
class MLPNet {
 public:
  MLPNet() = default;

  MLPNet(std::vector<int> layer_sizes, Activation activation)
      : sizes_(std::move(layer_sizes)), activation_(activation) {
    if (sizes_.size() < 2) throw ConfigError("MLPNet needs at least two layer sizes");
    for (int s : sizes_) {
      if (s <= 0) throw ConfigError("MLPNet layer sizes must be positive");
    }
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      weights_.push_back(Matrix::Zero(sizes_[l + 1], sizes_[l]));
      biases_.push_back(Vector::Zero(sizes_[l + 1]));
    }
  }

  const std::vector<int>& layer_sizes() const { return sizes_; }
  Activation activation() const { return activation_; }
  std::size_t num_layers() const { return weights_.size(); }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }

  Matrix& weight(std::size_t l) { return weights_.at(l); }
  const Matrix& weight(std::size_t l) const { return weights_.at(l); }
  Vector& bias(std::size_t l) { return biases_.at(l); }
  const Vector& bias(std::size_t l) const { return biases_.at(l); }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      n += static_cast<std::size_t>(sizes_[l] + 1) * static_cast<std::size_t>(sizes_[l + 1]);
    }
    return n;
  }

  ParamVector flatten() const {
    ParamVector out(static_cast<Eigen::Index>(param_count()));
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      const Matrix& w = weights_[l];
      for (Eigen::Index i = 0; i < w.rows(); ++i) {
        for (Eigen::Index j = 0; j < w.cols(); ++j) out[k++] = w(i, j);
      }
      out.segment(k, biases_[l].size()) = biases_[l];
      k += biases_[l].size();
    }
    return out;
  }

  void unflatten(const ParamVector& v) {
    if (static_cast<std::size_t>(v.size()) != param_count()) {
      throw ShapeError("unflatten: expected " + std::to_string(param_count()) + " parameters, got " +
                       std::to_string(v.size()));
    }
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Matrix& w = weights_[l];
      for (Eigen::Index i = 0; i < w.rows(); ++i) {
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = v[k++];
      }
      biases_[l] = v.segment(k, biases_[l].size());
      k += biases_[l].size();
    }
  }

  /// Batched evaluation; columns of `input` are samples.
  Matrix forward_batch(const Matrix& input) const {
    if (input.rows() != input_dim()) {
      throw ShapeError("forward: input dimension " + std::to_string(input.rows()) +
                       ", expected " + std::to_string(input_dim()));
    }
    if (!input.allFinite()) throw NumericError("forward: non-finite input");
    Matrix h = input;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Matrix z = weights_[l] * h;
      z.colwise() += biases_[l];
      if (l + 1 < weights_.size()) apply_activation(z);
      h = std::move(z);
    }
    return h;
  }

  Vector forward(const Vector& input) const { return forward_batch(input); }

 private:
  void apply_activation(Matrix& z) const {
    switch (activation_) {
      case Activation::tanh: z = z.array().tanh().matrix(); break;
      case Activation::relu: z = z.cwiseMax(0.0); break;
      case Activation::identity: break;
    }
  }

  std::vector<int> sizes_;
  Activation activation_ = Activation::tanh;
  std::vector<Matrix> weights_;
  std::vector<Vector> biases_;
};

inline Vector forward(const MLPNet& net, const Vector& input) { return net.forward(input); }

/// Random matrix with orthonormal rows (rows <= cols) or columns, scaled by
/// `gain`. Built from the QR factorization of a Gaussian matrix with the sign
/// of diag(R) folded into Q so the result is unique per seed.
inline Matrix orthogonal_init(int rows, int cols, double gain, std::uint64_t seed) {
  if (rows < 1 || cols < 1) throw ConfigError("orthogonal_init: dimensions must be >= 1");
  if (!(gain > 0.0)) throw ConfigError("orthogonal_init: gain must be positive");
  const bool tall = rows >= cols;
  const int n = tall ? rows : cols;
  const int m = tall ? cols : rows;
  Rng rng(seed);
  Matrix a(n, m);
  for (int j = 0; j < m; ++j) {
    for (int i = 0; i < n; ++i) a(i, j) = rng.normal();
  }
  Eigen::HouseholderQR<Matrix> qr(a);
  Matrix q = qr.householderQ() * Matrix::Identity(n, m);
  const Matrix& r = qr.matrixQR();
  for (int j = 0; j < m; ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  q *= gain;
  if (tall) return q;
  return q.transpose();
}

inline MLPNet build_mlp(const std::vector<int>& layer_sizes, Activation activation,
                        InitScheme scheme, std::uint64_t seed, InitGains gains = {}) {
  MLPNet net(layer_sizes, activation);
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const int n_in = layer_sizes[l];
    const int n_out = layer_sizes[l + 1];
    const std::uint64_t layer_seed = derive_seed(seed, "layer" + std::to_string(l));
    if (scheme == InitScheme::orthogonal_scaled) {
      const bool last = l + 1 == net.num_layers();
      net.weight(l) = orthogonal_init(n_out, n_in, last ? gains.output : gains.hidden, layer_seed);
      net.bias(l).setZero();
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(n_in));
      Rng rng(layer_seed);
      for (int i = 0; i < n_out; ++i) {
        for (int j = 0; j < n_in; ++j) net.weight(l)(i, j) = rng.uniform(-bound, bound);
      }
      for (int i = 0; i < n_out; ++i) net.bias(l)[i] = rng.uniform(-bound, bound);
    }
  }
  return net;
}

/// Graph leaves for a network's parameters.
struct NetVars {
  std::vector<ad::Var> weights;
  std::vector<ad::Var> biases;

  /// Leaves in canonical order (W0, b0, W1, b1, ...).
  std::vector<ad::Var> all() const {
    std::vector<ad::Var> out;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.push_back(weights[l]);
      out.push_back(biases[l]);
    }
    return out;
  }
};

inline NetVars make_vars(const MLPNet& net, bool trainable = true) {
  NetVars v;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    v.weights.push_back(trainable ? ad::variable(net.weight(l)) : ad::constant(net.weight(l)));
    v.biases.push_back(trainable ? ad::variable(net.bias(l)) : ad::constant(Matrix(net.bias(l))));
  }
  return v;
}

/// Differentiable forward pass; columns of `input` are samples.
inline ad::Var forward(const MLPNet& net, const NetVars& vars, const ad::Var& input) {
  if (input.rows() != net.input_dim()) throw ShapeError("forward: input dimension mismatch");
  ad::Var h = input;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    ad::Var z = ad::matmul(vars.weights[l], h) + ad::broadcast_cols(vars.biases[l], h.cols());
    if (l + 1 < net.num_layers()) {
      switch (net.activation()) {
        case Activation::tanh: z = ad::tanh(z); break;
        case Activation::relu: z = ad::relu(z); break;
        case Activation::identity: break;
      }
    }
    h = z;
  }
  return h;
}

/// Flattens per-leaf gradients given in canonical (W, b) order.
inline ParamVector flatten_grads(const std::vector<ad::Var>& grads) {
  Eigen::Index n = 0;
  for (const auto& g : grads) n += g.value().size();
  ParamVector out(n);
  Eigen::Index k = 0;
  for (const auto& g : grads) {
    const Matrix& m = g.value();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) out[k++] = m(i, j);
    }
  }
  return out;
}

/// Exact reverse-mode gradient of a scalar loss built from the network's
/// parameter leaves.
inline ParamVector param_gradient(const MLPNet& net,
                                  const std::function<ad::Var(const NetVars&)>& loss) {
  NetVars vars = make_vars(net);
  ad::Var y = loss(vars);
  return flatten_grads(ad::grad(y, vars.all()));
}

}  // namespace polgrad
