// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "asrcl/tensor.hpp"

namespace asrcl {

using Rng = std::mt19937_64;

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  /// Gradient after Tape::backward; zeros if the node did not receive one.
  const Tensor& grad() const;
  const std::vector<std::size_t>& shape() const { return value().shape; }
  double item() const { return value().item(); }

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Trace of executed differentiable operations. Nodes are appended in
/// execution order, so walking them backwards is a reverse topological order
/// and backward visits every recorded op exactly once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf that receives a gradient (readable through Var::grad).
  Var input(Tensor value);
  /// Leaf bound to a trainable parameter; backward adds into p.grad.
  Var param(Parameter& p);
  /// Parameter used read-only (inference); the value is not copied.
  Var param(const Parameter& p);

  /// Records an op. `parents` decide whether the result needs a gradient;
  /// `fn` runs during backward and reads this node's gradient via grad_of.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> parents, BackwardFn fn);

  /// Runs reverse mode from a scalar loss. Throws ShapeError for a
  /// non-scalar and std::logic_error if called twice on the same tape.
  void backward(const Var& loss);

  const Tensor& value_of(std::size_t id) const;
  const Tensor& grad_of(std::size_t id);
  /// Gradient buffer of a parent, zero-initialized on first touch.
  /// Returns nullptr when the parent needs no gradient.
  Tensor* accum(std::size_t id);
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor own;
    const Tensor* external = nullptr;
    Tensor grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
    const Tensor& value() const { return external ? *external : own; }
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

namespace ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// a[N x D] + b[D], broadcast over rows.
Var add_rowvec(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var sum(const Var& a);
Var mean(const Var& a);

/// a[M x K] * b[K x N].
Var matmul(const Var& a, const Var& b);
/// a[M x K] * b[N x K]^T.
Var matmul_nt(const Var& a, const Var& b);

/// Tanh-approximated GELU.
Var gelu(const Var& a);
/// Row-wise layer normalization with affine gamma/beta of length D.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Inverted dropout. Identity when p == 0.
Var dropout(const Var& x, double p, Rng& rng);

/// Rows of `table` selected by `ids`.
Var embedding(const Var& table, std::span<const int> ids);
Var gather_rows(const Var& x, std::span<const std::size_t> rows);
/// [a; b] stacked by rows.
Var concat_rows(const Var& a, const Var& b);

/// softmax(z / temperature) per row (a vector is a single row).
Var softmax(const Var& z, double temperature = 1.0);
Var log_softmax(const Var& z, double temperature = 1.0);
/// Row i normalized over columns k != i; the diagonal entry is set to 0 and
/// carries no gradient. Requires a square matrix with at least 2 rows.
Var log_softmax_offdiag(const Var& s);

/// u.v / (|u| |v|). Zero-norm input throws DegenerateInputError.
Var cosine_sim(const Var& u, const Var& v);
/// Rows scaled to unit L2 norm. Zero rows throw DegenerateInputError.
Var l2_normalize_rows(const Var& x);
/// Pairwise cosine similarity matrix of the rows of x.
Var cosine_matrix(const Var& x);

/// sum(weights .* x) with constant weights of the same shape.
Var weighted_sum(const Var& x, const Tensor& weights);

/// -log softmax(logits)[label]. For a matrix, the mean over rows.
Var cross_entropy(const Var& logits, std::span<const int> labels);
Var cross_entropy(const Var& logits, int label);

/// Multi-head self attention over a padded batch. q, k, v are
/// [batch*seq_len x D]; keys at positions >= lengths[b] are ignored.
Var attention(const Var& q, const Var& k, const Var& v, std::span<const std::size_t> lengths,
              std::size_t seq_len, std::size_t n_heads);

}  // namespace ops

/// Plain (non-recorded) softmax of a vector with temperature; max-subtracted.
std::vector<double> softmax_values(std::span<const double> z, double temperature = 1.0);

using GradFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares reverse-mode gradients of `fn` against central finite differences
/// at every entry of every input. Returns
///   max |analytic - fd| / max(1, |analytic|, |fd|).
double grad_check(const GradFn& fn, std::span<const Tensor> inputs, double step = 1e-5);

/// Same check over model parameters. `fn` must bind the parameters through
/// Tape::param(Parameter&). Parameter values are restored on return.
/// `max_entries_per_param` caps how many entries of each parameter are
/// probed (0 = all), walking a deterministic stride.
double grad_check_params(const std::function<Var(Tape&)>& fn, std::span<Parameter* const> params,
                         double step = 1e-5, std::size_t max_entries_per_param = 0);

}  // namespace asrcl
