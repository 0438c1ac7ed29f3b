// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef UDST_DIFFNET_HPP
#define UDST_DIFFNET_HPP

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

// A minimal reverse-mode differentiable-computation kernel: named parameter
// store, dynamic tape, the layers the tracker and policy need, Adam, and a
// finite-difference gradient checker. f64 throughout.

namespace udst {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, double fill = 0.0);

  std::size_t numel() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  static Tensor vec(std::size_t n, double fill = 0.0);
  static Tensor mat(std::size_t r, std::size_t c, double fill = 0.0);
  static Tensor scalar(double v);

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
};

using Grads = std::map<std::string, Tensor>;

/// Named parameter tensors plus optimizer state and a global step counter.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::vector<std::string> names() const;  // sorted
  std::size_t size() const { return tensors_.size(); }

  std::int64_t step = 0;

  /// Adam first/second moments, allocated on first update.
  std::map<std::string, Tensor> adam_m;
  std::map<std::string, Tensor> adam_v;

 private:
  std::map<std::string, Tensor> tensors_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
Tensor init_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                    std::uint64_t seed);

/// One forward pass of recorded operations. Backward may be run once.
class Tape {
 public:
  struct Var {
    std::uint32_t id = 0;
  };

  // Leaves.
  Var input(Tensor value);
  Var constant(double v) { return input(Tensor::scalar(v)); }
  Var param(const ParamStore& ps, const std::string& name);

  const Tensor& value(Var v) const;
  std::size_t num_nodes() const { return nodes_.size(); }

  // Elementwise; shapes must match.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var add_const(Var a, double c);
  Var neg(Var a) { return scale(a, -1.0); }

  // v - broadcast scalar s, and v * broadcast scalar s.
  Var sub_broadcast(Var v, Var s);
  Var mul_broadcast(Var v, Var s);

  // Linear algebra. matvec: [r,c] x [c] -> [r].
  Var matvec(Var w, Var x);
  Var matmul(Var a, Var b);     // [m,k] x [k,n] -> [m,n]
  Var matmul_nt(Var a, Var b);  // [m,k] x [n,k]^T -> [m,n]
  Var affine(Var w, Var x, Var b) { return add(matvec(w, x), b); }

  // Nonlinearities (elementwise).
  Var sigmoid(Var a);
  Var tanh_(Var a);
  Var relu(Var a);
  Var log_(Var a);    // floors argument at 1e-12
  Var exp_clamped(Var a, double clamp = 30.0);
  Var digamma_(Var a);
  Var lgamma_(Var a);

  Var softmax_vec(Var a);
  Var softmax_rows(Var a);

  // Reductions and glue.
  Var sum(Var a);                 // scalar
  Var dot(Var a, Var b);          // scalar
  Var mean_rows(Var m);           // [r,c] -> [c]
  Var row(Var m, std::size_t i);  // [r,c] -> [c]
  Var stack_rows(const std::vector<Var>& rows);
  Var concat(const std::vector<Var>& vecs);
  Var cols(Var m, std::size_t c0, std::size_t c1);  // column slice [c0,c1)
  Var concat_cols(const std::vector<Var>& mats);

  /// Embedding lookup: rows of table by token id -> [T, E].
  Var embed(Var table, const std::vector<int>& ids);

  /// Cosine similarity of two vectors; defined as 0 when either is zero.
  Var cosine(Var a, Var b);

  /// Same-padded 1-D convolution with filter size 3 over a [L, Din]
  /// sequence. w has shape [3, Dout, Din] flattened, b has shape [Dout].
  Var conv1d3(Var x, Var w, Var b);

  /// -sum target_k ln max(p_k, 1e-12); target is a constant distribution.
  Var cross_entropy_const(const std::vector<double>& target, Var probs);

  /// Reverse-mode gradients of a scalar loss for every parameter leaf.
  /// Throws std::logic_error on reuse.
  Grads backward(Var loss);

  /// Gradient of `wrt` (input leaf) after backward; empty if untouched.
  Tensor input_grad(Var wrt) const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    std::string param_name;  // non-empty for parameter leaves
    std::function<void(Tape&, const Tensor&)> backprop;  // may be null
  };

  Var push(Tensor value, bool needs_grad,
           std::function<void(Tape&, const Tensor&)> backprop);
  void accumulate(Var v, const Tensor& g);
  Node& node(Var v) { return nodes_[v.id]; }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Helper: one GRU cell step built from tape primitives.
///   z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br),
///   n = tanh(Wn x + r * (Un h) + bn), h' = (1 - z) * n + z * h.
struct GruParams {
  Tape::Var wz, uz, bz, wr, ur, br, wn, un, bn;
};
Tape::Var gru_cell(Tape& tape, const GruParams& p, Tape::Var x, Tape::Var h);

/// Registers GRU parameters [hidden x in], [hidden x hidden], [hidden]
/// under prefix.{wz,uz,bz,...} if absent; returns tape handles.
GruParams gru_params(Tape& tape, const ParamStore& ps,
                     const std::string& prefix);
void add_gru_params(ParamStore& ps, const std::string& prefix,
                    std::size_t in_dim, std::size_t hidden,
                    std::uint64_t seed);

/// Multi-head scaled dot-product attention: queries [Lq, D],
/// keys/values [Lk, D], D divisible by num_heads. Parameters
/// prefix.{wq,wk,wv,wo} of shape [D, D].
Tape::Var attention(Tape& tape, const ParamStore& ps,
                    const std::string& prefix, Tape::Var queries,
                    Tape::Var keys_values, std::size_t num_heads);
void add_attention_params(ParamStore& ps, const std::string& prefix,
                          std::size_t dim, std::uint64_t seed);

/// Standard Adam with bias correction; increments ps.step.
/// Throws std::invalid_argument naming the parameter on non-finite grads.
void adam_step(ParamStore& ps, const Grads& grads, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct FiniteDiffReport {
  struct Entry {
    std::string name;
    double max_rel_error = 0.0;
  };
  std::vector<Entry> entries;
  double worst = 0.0;
  bool pass = false;
};

/// Central finite differences (h = 1e-5) of `loss_fn` against `analytic`
/// for every parameter in `ps`. O(P) loss evaluations.
FiniteDiffReport finite_diff_check(
    const std::function<double(const ParamStore&)>& loss_fn, ParamStore& ps,
    const Grads& analytic, double tolerance, double h = 1e-5);

}  // namespace udst

#endif  // UDST_DIFFNET_HPP
