// SPDX-License-Identifier: Apache-2.0
#include "asrcl/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>

#include "asrcl/errors.hpp"

namespace asrcl {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat as_mat(const Tensor& t) {
  return ConstMapMat(t.values.data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

MapMat as_mat(Tensor& t) {
  return MapMat(t.values.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  }
}

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(a.shape));
  }
}

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("operands recorded on different tapes");
}

double log_sum_exp(std::span<const double> z, double inv_t) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : z) m = std::max(m, v * inv_t);
  double s = 0.0;
  for (double v : z) s += std::exp(v * inv_t - m);
  return m + std::log(s);
}

void check_temperature(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) {
    throw ConfigError("temperature must be positive, got " + std::to_string(t));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const { return tape_->value_of(id_); }
const Tensor& Var::grad() const { return tape_->grad_of(id_); }

Var Tape::constant(Tensor value) {
  Node n;
  n.own = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::input(Tensor value) {
  Node n;
  n.own = std::move(value);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::param(const Parameter& p) {
  Node n;
  n.external = &p.value;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> parents, BackwardFn fn) {
  Node n;
  n.own = std::move(value);
  for (const auto& p : parents) {
    if (&p.tape() != this) throw std::logic_error("parent recorded on a different tape");
    n.needs_grad = n.needs_grad || nodes_[p.id()].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

const Tensor& Tape::value_of(std::size_t id) const { return nodes_.at(id).value(); }

const Tensor& Tape::grad_of(std::size_t id) {
  Node& n = nodes_.at(id);
  if (!n.grad.same_shape(n.value()) || n.grad.size() != n.value().size()) {
    n.grad = Tensor(n.value().shape, 0.0);
  }
  return n.grad;
}

Tensor* Tape::accum(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return nullptr;
  if (n.grad.size() != n.value().size()) n.grad = Tensor(n.value().shape, 0.0);
  return &n.grad;
}

void Tape::backward(const Var& loss) {
  if (&loss.tape() != this) throw std::logic_error("loss recorded on a different tape");
  if (backward_done_) throw std::logic_error("backward already ran on this tape");
  if (loss.value().size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  backward_done_ = true;
  Node& root = nodes_[loss.id()];
  if (!root.needs_grad) return;
  root.grad = Tensor(root.value().shape, 1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this);
    if (n.param != nullptr) {
      Tensor& g = n.param->grad;
      if (g.size() != n.grad.size()) g = Tensor(n.param->value.shape, 0.0);
      for (std::size_t k = 0; k < g.size(); ++k) g.values[k] += n.grad.values[k];
    }
  }
}

// ---------------------------------------------------------------------------
// ops

namespace ops {

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, self = a.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    for (auto id : {ia, ib}) {
      if (Tensor* d = t.accum(id))
        for (std::size_t i = 0; i < g.size(); ++i) d->values[i] += g.values[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] -= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, self = a.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* d = t.accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) d->values[i] += g.values[i];
    if (Tensor* d = t.accum(ib))
      for (std::size_t i = 0; i < g.size(); ++i) d->values[i] -= g.values[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, self = a.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    const auto& av = t.value_of(ia).values;
    const auto& bv = t.value_of(ib).values;
    if (Tensor* d = t.accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) d->values[i] += g.values[i] * bv[i];
    if (Tensor* d = t.accum(ib))
      for (std::size_t i = 0; i < g.size(); ++i) d->values[i] += g.values[i] * av[i];
  });
}

Var add_rowvec(const Var& a, const Var& b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "add_rowvec");
  if (bv.size() != av.cols()) {
    throw ShapeError("add_rowvec: bias of shape " + shape_str(bv.shape) + " for matrix " +
                     shape_str(av.shape));
  }
  Tensor out = av;
  const std::size_t n = av.rows(), d = av.cols();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out.values[r * d + c] += bv.values[c];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, n, d, self = a.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* da = t.accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) da->values[i] += g.values[i];
    if (Tensor* db = t.accum(ib))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) db->values[c] += g.values[r * d + c];
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values) v *= s;
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, s, self = a.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* d = t.accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) d->values[i] += s * g.values[i];
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values) v += s;
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, self = a.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* d = t.accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) d->values[i] += g.values[i];
  });
}

Var sum(const Var& a) {
  const auto& v = a.value().values;
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  const auto ia = a.id();
  return a.tape().record(Tensor::scalar(s), {a}, [ia, self = a.tape().size()](Tape& t) {
    const double g = t.grad_of(self).values[0];
    if (Tensor* d = t.accum(ia))
      for (double& x : d->values) x += g;
  });
}

Var mean(const Var& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  }
  Tensor out({av.rows(), bv.cols()});
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, self = a.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* da = t.accum(ia)) as_mat(*da).noalias() += as_mat(g) * as_mat(t.value_of(ib)).transpose();
    if (Tensor* db = t.accum(ib)) as_mat(*db).noalias() += as_mat(t.value_of(ia)).transpose() * as_mat(g);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul_nt");
  require_rank2(bv, "matmul_nt");
  if (av.cols() != bv.cols()) {
    throw ShapeError("matmul_nt: " + shape_str(av.shape) + " x " + shape_str(bv.shape) + "^T");
  }
  Tensor out({av.rows(), bv.rows()});
  as_mat(out).noalias() = as_mat(av) * as_mat(bv).transpose();
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, self = a.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* da = t.accum(ia)) as_mat(*da).noalias() += as_mat(g) * as_mat(t.value_of(ib));
    if (Tensor* db = t.accum(ib)) as_mat(*db).noalias() += as_mat(g).transpose() * as_mat(t.value_of(ia));
  });
}

Var gelu(const Var& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tensor out = a.value();
  for (double& x : out.values) {
    const double u = kC * (x + kA * x * x * x);
    x = 0.5 * x * (1.0 + std::tanh(u));
  }
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, self = a.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    const auto& xv = t.value_of(ia).values;
    Tensor* d = t.accum(ia);
    if (!d) return;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = xv[i];
      const double u = kC * (x + kA * x * x * x);
      const double th = std::tanh(u);
      const double du = kC * (1.0 + 3.0 * kA * x * x);
      d->values[i] += g.values[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x.value();
  require_rank2(xv, "layer_norm");
  const std::size_t n = xv.rows(), d = xv.cols();
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw ShapeError("layer_norm: affine parameters must have length " + std::to_string(d));
  }
  auto xhat = std::make_shared<std::vector<double>>(n * d);
  auto inv_std = std::make_shared<std::vector<double>>(n);
  Tensor out(xv.shape);
  const auto& gv = gamma.value().values;
  const auto& bv = beta.value().values;
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.values.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mu) * is;
      (*xhat)[r * d + c] = h;
      out.values[r * d + c] = gv[c] * h + bv[c];
    }
  }
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, n, d, xhat, inv_std, self = x.tape().size()](Tape& t) {
        const Tensor& g = t.grad_of(self);
        const auto& gam = t.value_of(ig).values;
        if (Tensor* dg = t.accum(ig))
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) dg->values[c] += g.values[r * d + c] * (*xhat)[r * d + c];
        if (Tensor* db = t.accum(ib))
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) db->values[c] += g.values[r * d + c];
        Tensor* dx = t.accum(ix);
        if (!dx) return;
        std::vector<double> dh(d);
        for (std::size_t r = 0; r < n; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            dh[c] = g.values[r * d + c] * gam[c];
            m1 += dh[c];
            m2 += dh[c] * (*xhat)[r * d + c];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (std::size_t c = 0; c < d; ++c) {
            dx->values[r * d + c] += (*inv_std)[r] * (dh[c] - m1 - (*xhat)[r * d + c] * m2);
          }
        }
      });
}

Var dropout(const Var& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
  if (p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = uniform01(rng) < p ? 0.0 : keep_scale;
    out.values[i] *= (*mask)[i];
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, mask, self = x.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* d = t.accum(ix))
      for (std::size_t i = 0; i < g.size(); ++i) d->values[i] += g.values[i] * (*mask)[i];
  });
}

Var embedding(const Var& table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  require_rank2(tv, "embedding");
  const std::size_t v = tv.rows(), d = tv.cols();
  Tensor out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v) {
      throw IndexError("embedding id " + std::to_string(ids[r]) + " outside table of " +
                       std::to_string(v) + " rows");
    }
    std::copy_n(tv.values.data() + static_cast<std::size_t>(ids[r]) * d, d, out.values.data() + r * d);
  }
  auto idv = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  const auto it = table.id();
  return table.tape().record(std::move(out), {table}, [it, idv, d, self = table.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    Tensor* dt = t.accum(it);
    if (!dt) return;
    for (std::size_t r = 0; r < idv->size(); ++r) {
      double* dst = dt->values.data() + static_cast<std::size_t>((*idv)[r]) * d;
      const double* src = g.values.data() + r * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

Var gather_rows(const Var& x, std::span<const std::size_t> rows) {
  const Tensor& xv = x.value();
  require_rank2(xv, "gather_rows");
  const std::size_t n = xv.rows(), d = xv.cols();
  Tensor out({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) {
      throw IndexError("row " + std::to_string(rows[r]) + " outside matrix of " + std::to_string(n) +
                       " rows");
    }
    std::copy_n(xv.values.data() + rows[r] * d, d, out.values.data() + r * d);
  }
  auto rv = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, rv, d, self = x.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    Tensor* dx = t.accum(ix);
    if (!dx) return;
    for (std::size_t r = 0; r < rv->size(); ++r)
      for (std::size_t c = 0; c < d; ++c) dx->values[(*rv)[r] * d + c] += g.values[r * d + c];
  });
}

Var concat_rows(const Var& a, const Var& b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "concat_rows");
  require_rank2(bv, "concat_rows");
  if (av.cols() != bv.cols()) throw ShapeError("concat_rows: column mismatch");
  Tensor out({av.rows() + bv.rows(), av.cols()});
  std::copy(av.values.begin(), av.values.end(), out.values.begin());
  std::copy(bv.values.begin(), bv.values.end(), out.values.begin() + static_cast<std::ptrdiff_t>(av.size()));
  const auto ia = a.id(), ib = b.id();
  const std::size_t split = av.size();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, split, self = a.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* da = t.accum(ia))
      for (std::size_t i = 0; i < split; ++i) da->values[i] += g.values[i];
    if (Tensor* db = t.accum(ib))
      for (std::size_t i = split; i < g.size(); ++i) db->values[i - split] += g.values[i];
  });
}

Var softmax(const Var& z, double temperature) {
  check_temperature(temperature);
  const Tensor& zv = z.value();
  const std::size_t n = zv.rows(), c = zv.cols();
  Tensor out(zv.shape);
  for (std::size_t r = 0; r < n; ++r) {
    auto p = softmax_values(zv.row(r), temperature);
    std::copy(p.begin(), p.end(), out.values.begin() + static_cast<std::ptrdiff_t>(r * c));
  }
  const auto iz = z.id();
  const double inv_t = 1.0 / temperature;
  return z.tape().record(std::move(out), {z}, [iz, n, c, inv_t, self = z.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value_of(self);
    Tensor* dz = t.accum(iz);
    if (!dz) return;
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += g.values[r * c + k] * y.values[r * c + k];
      for (std::size_t k = 0; k < c; ++k)
        dz->values[r * c + k] += inv_t * y.values[r * c + k] * (g.values[r * c + k] - dot);
    }
  });
}

Var log_softmax(const Var& z, double temperature) {
  check_temperature(temperature);
  const Tensor& zv = z.value();
  const std::size_t n = zv.rows(), c = zv.cols();
  const double inv_t = 1.0 / temperature;
  Tensor out(zv.shape);
  for (std::size_t r = 0; r < n; ++r) {
    const double lse = log_sum_exp(zv.row(r), inv_t);
    for (std::size_t k = 0; k < c; ++k) out.values[r * c + k] = zv.values[r * c + k] * inv_t - lse;
  }
  const auto iz = z.id();
  return z.tape().record(std::move(out), {z}, [iz, n, c, inv_t, self = z.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value_of(self);
    Tensor* dz = t.accum(iz);
    if (!dz) return;
    for (std::size_t r = 0; r < n; ++r) {
      double gs = 0.0;
      for (std::size_t k = 0; k < c; ++k) gs += g.values[r * c + k];
      for (std::size_t k = 0; k < c; ++k)
        dz->values[r * c + k] += inv_t * (g.values[r * c + k] - std::exp(y.values[r * c + k]) * gs);
    }
  });
}

Var log_softmax_offdiag(const Var& s) {
  const Tensor& sv = s.value();
  require_rank2(sv, "log_softmax_offdiag");
  const std::size_t n = sv.rows();
  if (sv.cols() != n) throw ShapeError("log_softmax_offdiag: matrix must be square");
  if (n < 2) throw DegenerateInputError("log_softmax_offdiag: need at least 2 rows");
  Tensor out(sv.shape);
  for (std::size_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) m = std::max(m, sv(i, k));
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) acc += std::exp(sv(i, k) - m);
    const double lse = m + std::log(acc);
    for (std::size_t k = 0; k < n; ++k) out(i, k) = k == i ? 0.0 : sv(i, k) - lse;
  }
  const auto is = s.id();
  return s.tape().record(std::move(out), {s}, [is, n, self = s.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value_of(self);
    Tensor* ds = t.accum(is);
    if (!ds) return;
    for (std::size_t i = 0; i < n; ++i) {
      double gs = 0.0;
      for (std::size_t k = 0; k < n; ++k)
        if (k != i) gs += g(i, k);
      for (std::size_t k = 0; k < n; ++k)
        if (k != i) (*ds)(i, k) += g(i, k) - std::exp(y(i, k)) * gs;
    }
  });
}

Var cosine_sim(const Var& u, const Var& v) {
  require_same_tape(u, v);
  const Tensor& uv = u.value();
  const Tensor& vv = v.value();
  if (uv.size() != vv.size()) throw ShapeError("cosine_sim: length mismatch");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < uv.size(); ++i) {
    dot += uv.values[i] * vv.values[i];
    nu += uv.values[i] * uv.values[i];
    nv += vv.values[i] * vv.values[i];
  }
  if (nu == 0.0 || nv == 0.0) throw DegenerateInputError("cosine_sim: zero-norm input");
  const double a = std::sqrt(nu), b = std::sqrt(nv);
  const double cs = dot / (a * b);
  const auto iu = u.id(), iv = v.id();
  return u.tape().record(Tensor::scalar(cs), {u, v}, [iu, iv, a, b, cs, self = u.tape().size()](Tape& t) {
    const double g = t.grad_of(self).values[0];
    const auto& x = t.value_of(iu).values;
    const auto& y = t.value_of(iv).values;
    if (Tensor* du = t.accum(iu))
      for (std::size_t i = 0; i < x.size(); ++i) du->values[i] += g * (y[i] / (a * b) - cs * x[i] / (a * a));
    if (Tensor* dv = t.accum(iv))
      for (std::size_t i = 0; i < x.size(); ++i) dv->values[i] += g * (x[i] / (a * b) - cs * y[i] / (b * b));
  });
}

Var l2_normalize_rows(const Var& x) {
  const Tensor& xv = x.value();
  require_rank2(xv, "l2_normalize_rows");
  const std::size_t n = xv.rows(), d = xv.cols();
  auto norms = std::make_shared<std::vector<double>>(n);
  Tensor out(xv.shape);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += xv(r, c) * xv(r, c);
    if (s == 0.0) {
      throw DegenerateInputError("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
    }
    (*norms)[r] = std::sqrt(s);
    for (std::size_t c = 0; c < d; ++c) out(r, c) = xv(r, c) / (*norms)[r];
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, n, d, norms, self = x.tape().size()](Tape& t) {
    const Tensor& g = t.grad_of(self);
    const Tensor& z = t.value_of(self);
    Tensor* dx = t.accum(ix);
    if (!dx) return;
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += z(r, c) * g(r, c);
      for (std::size_t c = 0; c < d; ++c) (*dx)(r, c) += (g(r, c) - z(r, c) * dot) / (*norms)[r];
    }
  });
}

Var cosine_matrix(const Var& x) {
  Var z = l2_normalize_rows(x);
  return matmul_nt(z, z);
}

Var weighted_sum(const Var& x, const Tensor& weights) {
  require_same_shape(x.value(), weights, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights.values[i] * x.value().values[i];
  auto w = std::make_shared<Tensor>(weights);
  const auto ix = x.id();
  return x.tape().record(Tensor::scalar(s), {x}, [ix, w, self = x.tape().size()](Tape& t) {
    const double g = t.grad_of(self).values[0];
    if (Tensor* dx = t.accum(ix))
      for (std::size_t i = 0; i < w->size(); ++i) dx->values[i] += g * w->values[i];
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  const std::size_t n = lv.rows(), c = lv.cols();
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  if (n == 0) throw ShapeError("cross_entropy: empty batch");
  auto probs = std::make_shared<std::vector<double>>(n * c);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[r]) + " outside [0, " +
                       std::to_string(c) + ")");
    }
    const double lse = log_sum_exp(lv.row(r), 1.0);
    total += lse - lv(r, static_cast<std::size_t>(labels[r]));
    for (std::size_t k = 0; k < c; ++k) (*probs)[r * c + k] = std::exp(lv(r, k) - lse);
  }
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  const auto il = logits.id();
  return logits.tape().record(
      Tensor::scalar(total / static_cast<double>(n)), {logits},
      [il, n, c, probs, lab, self = logits.tape().size()](Tape& t) {
        const double g = t.grad_of(self).values[0] / static_cast<double>(n);
        Tensor* d = t.accum(il);
        if (!d) return;
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t k = 0; k < c; ++k) d->values[r * c + k] += g * (*probs)[r * c + k];
          d->values[r * c + static_cast<std::size_t>((*lab)[r])] -= g;
        }
      });
}

Var cross_entropy(const Var& logits, int label) {
  if (logits.value().rank() > 1 && logits.value().rows() != 1) {
    throw ShapeError("cross_entropy with a single label needs a single row of logits");
  }
  const int labels[1] = {label};
  return cross_entropy(logits, std::span<const int>(labels, 1));
}

Var attention(const Var& q, const Var& k, const Var& v, std::span<const std::size_t> lengths,
              std::size_t seq_len, std::size_t n_heads) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  const Tensor& qv = q.value();
  require_rank2(qv, "attention");
  require_same_shape(qv, k.value(), "attention");
  require_same_shape(qv, v.value(), "attention");
  const std::size_t batch = lengths.size();
  const std::size_t d = qv.cols();
  if (qv.rows() != batch * seq_len) throw ShapeError("attention: rows != batch * seq_len");
  if (n_heads == 0 || d % n_heads != 0) throw ShapeError("attention: D not divisible by heads");
  for (auto len : lengths)
    if (len == 0 || len > seq_len) throw ShapeError("attention: sequence length out of range");
  const std::size_t dh = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& kv = k.value().values;
  const auto& vv = v.value().values;
  auto probs = std::make_shared<std::vector<double>>(batch * n_heads * seq_len * seq_len, 0.0);
  auto lens = std::make_shared<std::vector<std::size_t>>(lengths.begin(), lengths.end());
  Tensor out(qv.shape);
  std::vector<double> scores(seq_len);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = lengths[b];
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < seq_len; ++i) {
        const double* qi = qv.values.data() + (b * seq_len + i) * d + off;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          const double* kj = kv.data() + (b * seq_len + j) * d + off;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * sc;
          m = std::max(m, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          scores[j] = std::exp(scores[j] - m);
          z += scores[j];
        }
        double* pi = probs->data() + ((b * n_heads + h) * seq_len + i) * seq_len;
        double* oi = out.values.data() + (b * seq_len + i) * d + off;
        for (std::size_t j = 0; j < len; ++j) {
          pi[j] = scores[j] / z;
          const double* vj = vv.data() + (b * seq_len + j) * d + off;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pi[j] * vj[c];
        }
      }
    }
  }
  const auto iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      std::move(out), {q, k, v},
      [iq, ik, iv, probs, lens, seq_len, n_heads, d, dh, sc, self = q.tape().size()](Tape& t) {
        const Tensor& g = t.grad_of(self);
        const auto& qv = t.value_of(iq).values;
        const auto& kv = t.value_of(ik).values;
        const auto& vv = t.value_of(iv).values;
        Tensor* dq = t.accum(iq);
        Tensor* dk = t.accum(ik);
        Tensor* dv = t.accum(iv);
        std::vector<double> da(seq_len);
        for (std::size_t b = 0; b < lens->size(); ++b) {
          const std::size_t len = (*lens)[b];
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < seq_len; ++i) {
              const double* pi = probs->data() + ((b * n_heads + h) * seq_len + i) * seq_len;
              const double* gi = g.values.data() + (b * seq_len + i) * d + off;
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) {
                const double* vj = vv.data() + (b * seq_len + j) * d + off;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
                da[j] = s;
                dot += pi[j] * s;
                if (dv) {
                  double* dvj = dv->values.data() + (b * seq_len + j) * d + off;
                  for (std::size_t c = 0; c < dh; ++c) dvj[c] += pi[j] * gi[c];
                }
              }
              const double* qi = qv.data() + (b * seq_len + i) * d + off;
              double* dqi = dq ? dq->values.data() + (b * seq_len + i) * d + off : nullptr;
              for (std::size_t j = 0; j < len; ++j) {
                const double ds = pi[j] * (da[j] - dot) * sc;
                if (ds == 0.0) continue;
                const double* kj = kv.data() + (b * seq_len + j) * d + off;
                if (dqi)
                  for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                if (dk) {
                  double* dkj = dk->values.data() + (b * seq_len + j) * d + off;
                  for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace ops

std::vector<double> softmax_values(std::span<const double> z, double temperature) {
  check_temperature(temperature);
  const double inv_t = 1.0 / temperature;
  double m = -std::numeric_limits<double>::infinity();
  for (double v : z) m = std::max(m, v * inv_t);
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] * inv_t - m);
    s += p[i];
  }
  for (double& v : p) v /= s;
  return p;
}

// ---------------------------------------------------------------------------
// finite-difference checks

namespace {

double rel_error(double analytic, double fd) {
  return std::abs(analytic - fd) / std::max({1.0, std::abs(analytic), std::abs(fd)});
}

double eval_with_inputs(const GradFn& fn, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return fn(tape, vars).item();
}

}  // namespace

double grad_check(const GradFn& fn, std::span<const Tensor> inputs, double step) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(tape.input(t));
    Var loss = fn(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }
  std::vector<Tensor> work(inputs.begin(), inputs.end());
  double worst = 0.0;
  for (std::size_t a = 0; a < work.size(); ++a) {
    for (std::size_t i = 0; i < work[a].size(); ++i) {
      const double orig = work[a].values[i];
      work[a].values[i] = orig + step;
      const double fp = eval_with_inputs(fn, work);
      work[a].values[i] = orig - step;
      const double fm = eval_with_inputs(fn, work);
      work[a].values[i] = orig;
      worst = std::max(worst, rel_error(analytic[a].values[i], (fp - fm) / (2.0 * step)));
    }
  }
  return worst;
}

double grad_check_params(const std::function<Var(Tape&)>& fn, std::span<Parameter* const> params,
                         double step, std::size_t max_entries_per_param) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = fn(tape);
    tape.backward(loss);
  }
  std::vector<Tensor> analytic;
  for (Parameter* p : params) analytic.push_back(p->grad);
  auto eval = [&fn]() {
    Tape tape;
    return fn(tape).item();
  };
  double worst = 0.0;
  for (std::size_t a = 0; a < params.size(); ++a) {
    Tensor& value = params[a]->value;
    const std::size_t n = value.size();
    std::size_t stride = 1;
    if (max_entries_per_param > 0 && n > max_entries_per_param) {
      stride = (n + max_entries_per_param - 1) / max_entries_per_param;
    }
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = value.values[i];
      value.values[i] = orig + step;
      const double fp = eval();
      value.values[i] = orig - step;
      const double fm = eval();
      value.values[i] = orig;
      worst = std::max(worst, rel_error(analytic[a].values[i], (fp - fm) / (2.0 * step)));
    }
  }
  return worst;
}

}  // namespace asrcl
