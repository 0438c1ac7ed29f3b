// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#include "udst/diffnet.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "udst/uncmath.hpp"

namespace udst {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

bool all_finite(const Tensor& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> s, double fill) : shape(std::move(s)) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  data.assign(n, fill);
}

Tensor Tensor::vec(std::size_t n, double fill) { return Tensor({n}, fill); }
Tensor Tensor::mat(std::size_t r, std::size_t c, double fill) {
  return Tensor({r, c}, fill);
}
Tensor Tensor::scalar(double v) {
  Tensor t({1});
  t.data[0] = v;
  return t;
}

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  if (tensors_.count(name))
    throw std::invalid_argument("ParamStore: duplicate name " + name);
  return tensors_[name] = std::move(init);
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end())
    throw std::invalid_argument("ParamStore: unknown name " + name);
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end())
    throw std::invalid_argument("ParamStore: unknown name " + name);
  return it->second;
}

bool ParamStore::contains(const std::string& name) const {
  return tensors_.count(name) > 0;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [name, t] : tensors_) out.push_back(name);
  return out;
}

Tensor init_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                    std::uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.data) v = dist(rng);
  return t;
}

// ---------------------------------------------------------------------------
// Tape

Tape::Var Tape::push(Tensor value, bool needs_grad,
                     std::function<void(Tape&, const Tensor&)> backprop) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tape::Var Tape::input(Tensor value) { return push(std::move(value), false, nullptr); }

Tape::Var Tape::param(const ParamStore& ps, const std::string& name) {
  Var v = push(ps.at(name), true, nullptr);
  node(v).param_name = name;
  return v;
}

const Tensor& Tape::value(Var v) const { return nodes_[v.id].value; }

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = node(v);
  if (!n.needs_grad) return;
  if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
  for (std::size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
}

Tape::Var Tape::add(Var a, Var b) {
  check_same_shape(value(a), value(b), "add");
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] += value(b).data[i];
  bool ng = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Tape::Var Tape::sub(Var a, Var b) {
  check_same_shape(value(a), value(b), "sub");
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] -= value(b).data[i];
  bool ng = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    Tensor gn = g;
    for (double& v : gn.data) v = -v;
    t.accumulate(b, gn);
  });
}

Tape::Var Tape::mul(Var a, Var b) {
  check_same_shape(value(a), value(b), "mul");
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] *= value(b).data[i];
  bool ng = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
    Tensor ga = g, gb = g;
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      ga.data[i] *= t.value(b).data[i];
      gb.data[i] *= t.value(a).data[i];
    }
    t.accumulate(a, ga);
    t.accumulate(b, gb);
  });
}

Tape::Var Tape::scale(Var a, double c) {
  Tensor out = value(a);
  for (double& v : out.data) v *= c;
  return push(std::move(out), node(a).needs_grad,
              [a, c](Tape& t, const Tensor& g) {
                Tensor ga = g;
                for (double& v : ga.data) v *= c;
                t.accumulate(a, ga);
              });
}

Tape::Var Tape::add_const(Var a, double c) {
  Tensor out = value(a);
  for (double& v : out.data) v += c;
  return push(std::move(out), node(a).needs_grad,
              [a](Tape& t, const Tensor& g) { t.accumulate(a, g); });
}

Tape::Var Tape::sub_broadcast(Var v, Var s) {
  if (value(s).numel() != 1)
    throw std::invalid_argument("sub_broadcast: s must be scalar");
  Tensor out = value(v);
  const double sv = value(s).data[0];
  for (double& x : out.data) x -= sv;
  bool ng = node(v).needs_grad || node(s).needs_grad;
  return push(std::move(out), ng, [v, s](Tape& t, const Tensor& g) {
    t.accumulate(v, g);
    double total = 0.0;
    for (double x : g.data) total += x;
    t.accumulate(s, Tensor::scalar(-total));
  });
}

Tape::Var Tape::mul_broadcast(Var v, Var s) {
  if (value(s).numel() != 1)
    throw std::invalid_argument("mul_broadcast: s must be scalar");
  Tensor out = value(v);
  const double sv = value(s).data[0];
  for (double& x : out.data) x *= sv;
  bool ng = node(v).needs_grad || node(s).needs_grad;
  return push(std::move(out), ng, [v, s](Tape& t, const Tensor& g) {
    const double sv = t.value(s).data[0];
    Tensor gv = g;
    for (double& x : gv.data) x *= sv;
    t.accumulate(v, gv);
    double total = 0.0;
    for (std::size_t i = 0; i < g.data.size(); ++i)
      total += g.data[i] * t.value(v).data[i];
    t.accumulate(s, Tensor::scalar(total));
  });
}

Tape::Var Tape::matvec(Var w, Var x) {
  const Tensor& wm = value(w);
  const Tensor& xv = value(x);
  if (wm.shape.size() != 2 || xv.shape.size() != 1 || wm.cols() != xv.numel())
    throw std::invalid_argument("matvec: shape mismatch");
  const std::size_t r = wm.rows(), c = wm.cols();
  Tensor out = Tensor::vec(r);
  for (std::size_t i = 0; i < r; ++i) {
    double acc = 0.0;
    const double* wrow = wm.data.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) acc += wrow[j] * xv.data[j];
    out.data[i] = acc;
  }
  bool ng = node(w).needs_grad || node(x).needs_grad;
  return push(std::move(out), ng, [w, x, r, c](Tape& t, const Tensor& g) {
    if (t.node(w).needs_grad) {
      Tensor gw = Tensor::mat(r, c);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
          gw.data[i * c + j] = g.data[i] * t.value(x).data[j];
      t.accumulate(w, gw);
    }
    if (t.node(x).needs_grad) {
      Tensor gx = Tensor::vec(c);
      const Tensor& wm = t.value(w);
      for (std::size_t i = 0; i < r; ++i) {
        const double gi = g.data[i];
        const double* wrow = wm.data.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) gx.data[j] += gi * wrow[j];
      }
      t.accumulate(x, gx);
    }
  });
}

Tape::Var Tape::matmul(Var a, Var b) {
  const Tensor& am = value(a);
  const Tensor& bm = value(b);
  if (am.shape.size() != 2 || bm.shape.size() != 2 || am.cols() != bm.rows())
    throw std::invalid_argument("matmul: shape mismatch");
  const std::size_t m = am.rows(), k = am.cols(), n = bm.cols();
  Tensor out = Tensor::mat(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = am.data[i * k + p];
      for (std::size_t j = 0; j < n; ++j)
        out.data[i * n + j] += av * bm.data[p * n + j];
    }
  bool ng = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(out), ng, [a, b, m, k, n](Tape& t, const Tensor& g) {
    if (t.node(a).needs_grad) {
      Tensor ga = Tensor::mat(m, k);
      const Tensor& bm = t.value(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = g.data[i * n + j];
          for (std::size_t p = 0; p < k; ++p)
            ga.data[i * k + p] += gv * bm.data[p * n + j];
        }
      t.accumulate(a, ga);
    }
    if (t.node(b).needs_grad) {
      Tensor gb = Tensor::mat(k, n);
      const Tensor& am = t.value(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = am.data[i * k + p];
          for (std::size_t j = 0; j < n; ++j)
            gb.data[p * n + j] += av * g.data[i * n + j];
        }
      t.accumulate(b, gb);
    }
  });
}

Tape::Var Tape::matmul_nt(Var a, Var b) {
  const Tensor& am = value(a);
  const Tensor& bm = value(b);
  if (am.shape.size() != 2 || bm.shape.size() != 2 || am.cols() != bm.cols())
    throw std::invalid_argument("matmul_nt: shape mismatch");
  const std::size_t m = am.rows(), k = am.cols(), n = bm.rows();
  Tensor out = Tensor::mat(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p)
        acc += am.data[i * k + p] * bm.data[j * k + p];
      out.data[i * n + j] = acc;
    }
  bool ng = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(out), ng, [a, b, m, k, n](Tape& t, const Tensor& g) {
    if (t.node(a).needs_grad) {
      Tensor ga = Tensor::mat(m, k);
      const Tensor& bm = t.value(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = g.data[i * n + j];
          for (std::size_t p = 0; p < k; ++p)
            ga.data[i * k + p] += gv * bm.data[j * k + p];
        }
      t.accumulate(a, ga);
    }
    if (t.node(b).needs_grad) {
      Tensor gb = Tensor::mat(n, k);
      const Tensor& am = t.value(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = g.data[i * n + j];
          for (std::size_t p = 0; p < k; ++p)
            gb.data[j * k + p] += gv * am.data[i * k + p];
        }
      t.accumulate(b, gb);
    }
  });
}

Tape::Var Tape::sigmoid(Var a) {
  Tensor out = value(a);
  for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  Var o = push(std::move(out), node(a).needs_grad, nullptr);
  node(o).backprop = [a, o](Tape& t, const Tensor& g) {
    Tensor ga = g;
    const Tensor& y = t.value(o);
    for (std::size_t i = 0; i < ga.data.size(); ++i)
      ga.data[i] *= y.data[i] * (1.0 - y.data[i]);
    t.accumulate(a, ga);
  };
  return o;
}

Tape::Var Tape::tanh_(Var a) {
  Tensor out = value(a);
  for (double& v : out.data) v = std::tanh(v);
  Var o = push(std::move(out), node(a).needs_grad, nullptr);
  node(o).backprop = [a, o](Tape& t, const Tensor& g) {
    Tensor ga = g;
    const Tensor& y = t.value(o);
    for (std::size_t i = 0; i < ga.data.size(); ++i)
      ga.data[i] *= 1.0 - y.data[i] * y.data[i];
    t.accumulate(a, ga);
  };
  return o;
}

Tape::Var Tape::relu(Var a) {
  Tensor out = value(a);
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return push(std::move(out), node(a).needs_grad,
              [a](Tape& t, const Tensor& g) {
                Tensor ga = g;
                const Tensor& x = t.value(a);
                for (std::size_t i = 0; i < ga.data.size(); ++i)
                  if (x.data[i] <= 0.0) ga.data[i] = 0.0;
                t.accumulate(a, ga);
              });
}

Tape::Var Tape::log_(Var a) {
  Tensor out = value(a);
  for (double& v : out.data) v = std::log(std::max(v, kProbFloor));
  return push(std::move(out), node(a).needs_grad,
              [a](Tape& t, const Tensor& g) {
                Tensor ga = g;
                const Tensor& x = t.value(a);
                for (std::size_t i = 0; i < ga.data.size(); ++i)
                  ga.data[i] /= std::max(x.data[i], kProbFloor);
                t.accumulate(a, ga);
              });
}

Tape::Var Tape::exp_clamped(Var a, double clamp) {
  Tensor out = value(a);
  for (double& v : out.data) v = std::exp(std::clamp(v, -clamp, clamp));
  Var o = push(std::move(out), node(a).needs_grad, nullptr);
  node(o).backprop = [a, o, clamp](Tape& t, const Tensor& g) {
    Tensor ga = g;
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(o);
    for (std::size_t i = 0; i < ga.data.size(); ++i) {
      // Zero gradient outside the clamp range.
      if (x.data[i] < -clamp || x.data[i] > clamp)
        ga.data[i] = 0.0;
      else
        ga.data[i] *= y.data[i];
    }
    t.accumulate(a, ga);
  };
  return o;
}

Tape::Var Tape::digamma_(Var a) {
  Tensor out = value(a);
  for (double& v : out.data) v = digamma(v);
  return push(std::move(out), node(a).needs_grad,
              [a](Tape& t, const Tensor& g) {
                Tensor ga = g;
                const Tensor& x = t.value(a);
                for (std::size_t i = 0; i < ga.data.size(); ++i)
                  ga.data[i] *= trigamma(x.data[i]);
                t.accumulate(a, ga);
              });
}

Tape::Var Tape::lgamma_(Var a) {
  Tensor out = value(a);
  for (double& v : out.data) v = log_gamma(v);
  return push(std::move(out), node(a).needs_grad,
              [a](Tape& t, const Tensor& g) {
                Tensor ga = g;
                const Tensor& x = t.value(a);
                for (std::size_t i = 0; i < ga.data.size(); ++i)
                  ga.data[i] *= digamma(x.data[i]);
                t.accumulate(a, ga);
              });
}

namespace {
void softmax_inplace(double* p, std::size_t n) {
  double mx = p[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, p[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = std::exp(p[i] - mx);
    sum += p[i];
  }
  for (std::size_t i = 0; i < n; ++i) p[i] /= sum;
}

void softmax_backward_row(const double* y, const double* g, double* out,
                          std::size_t n) {
  double dot = 0.0;
  for (std::size_t i = 0; i < n; ++i) dot += y[i] * g[i];
  for (std::size_t i = 0; i < n; ++i) out[i] = y[i] * (g[i] - dot);
}
}  // namespace

Tape::Var Tape::softmax_vec(Var a) {
  Tensor out = value(a);
  softmax_inplace(out.data.data(), out.data.size());
  Var o = push(std::move(out), node(a).needs_grad, nullptr);
  node(o).backprop = [a, o](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(o);
    Tensor ga(y.shape);
    softmax_backward_row(y.data.data(), g.data.data(), ga.data.data(),
                         y.data.size());
    t.accumulate(a, ga);
  };
  return o;
}

Tape::Var Tape::softmax_rows(Var a) {
  Tensor out = value(a);
  const std::size_t r = out.rows(), c = out.cols();
  for (std::size_t i = 0; i < r; ++i) softmax_inplace(&out.data[i * c], c);
  Var o = push(std::move(out), node(a).needs_grad, nullptr);
  node(o).backprop = [a, o, r, c](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(o);
    Tensor ga(y.shape);
    for (std::size_t i = 0; i < r; ++i)
      softmax_backward_row(&y.data[i * c], &g.data[i * c], &ga.data[i * c], c);
    t.accumulate(a, ga);
  };
  return o;
}

Tape::Var Tape::sum(Var a) {
  double s = 0.0;
  for (double v : value(a).data) s += v;
  return push(Tensor::scalar(s), node(a).needs_grad,
              [a](Tape& t, const Tensor& g) {
                Tensor ga(t.value(a).shape, g.data[0]);
                t.accumulate(a, ga);
              });
}

Tape::Var Tape::dot(Var a, Var b) {
  check_same_shape(value(a), value(b), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < value(a).data.size(); ++i)
    s += value(a).data[i] * value(b).data[i];
  bool ng = node(a).needs_grad || node(b).needs_grad;
  return push(Tensor::scalar(s), ng, [a, b](Tape& t, const Tensor& g) {
    const double gv = g.data[0];
    if (t.node(a).needs_grad) {
      Tensor ga = t.value(b);
      for (double& v : ga.data) v *= gv;
      t.accumulate(a, ga);
    }
    if (t.node(b).needs_grad) {
      Tensor gb = t.value(a);
      for (double& v : gb.data) v *= gv;
      t.accumulate(b, gb);
    }
  });
}

Tape::Var Tape::mean_rows(Var m) {
  const Tensor& x = value(m);
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = Tensor::vec(c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j] += x.data[i * c + j];
  for (double& v : out.data) v /= static_cast<double>(r);
  return push(std::move(out), node(m).needs_grad,
              [m, r, c](Tape& t, const Tensor& g) {
                Tensor gm = Tensor::mat(r, c);
                const double inv_r = 1.0 / static_cast<double>(r);
                for (std::size_t i = 0; i < r; ++i)
                  for (std::size_t j = 0; j < c; ++j)
                    gm.data[i * c + j] = g.data[j] * inv_r;
                t.accumulate(m, gm);
              });
}

Tape::Var Tape::row(Var m, std::size_t i) {
  const Tensor& x = value(m);
  const std::size_t c = x.cols();
  if (i >= x.rows()) throw std::invalid_argument("row: index out of range");
  Tensor out = Tensor::vec(c);
  std::copy_n(x.data.begin() + i * c, c, out.data.begin());
  return push(std::move(out), node(m).needs_grad,
              [m, i, c](Tape& t, const Tensor& g) {
                Tensor gm(t.value(m).shape);
                std::copy_n(g.data.begin(), c, gm.data.begin() + i * c);
                t.accumulate(m, gm);
              });
}

Tape::Var Tape::stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: empty");
  const std::size_t c = value(rows[0]).numel();
  Tensor out = Tensor::mat(rows.size(), c);
  bool ng = false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (value(rows[i]).numel() != c)
      throw std::invalid_argument("stack_rows: length mismatch");
    std::copy_n(value(rows[i]).data.begin(), c, out.data.begin() + i * c);
    ng = ng || node(rows[i]).needs_grad;
  }
  return push(std::move(out), ng, [rows, c](Tape& t, const Tensor& g) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      Tensor gr = Tensor::vec(c);
      std::copy_n(g.data.begin() + i * c, c, gr.data.begin());
      t.accumulate(rows[i], gr);
    }
  });
}

Tape::Var Tape::concat(const std::vector<Var>& vecs) {
  if (vecs.empty()) throw std::invalid_argument("concat: empty");
  std::size_t n = 0;
  bool ng = false;
  for (Var v : vecs) {
    n += value(v).numel();
    ng = ng || node(v).needs_grad;
  }
  Tensor out = Tensor::vec(n);
  std::size_t off = 0;
  for (Var v : vecs) {
    std::copy(value(v).data.begin(), value(v).data.end(),
              out.data.begin() + off);
    off += value(v).numel();
  }
  return push(std::move(out), ng, [vecs](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (Var v : vecs) {
      const std::size_t n = t.value(v).numel();
      Tensor gv(t.value(v).shape);
      std::copy_n(g.data.begin() + off, n, gv.data.begin());
      t.accumulate(v, gv);
      off += n;
    }
  });
}

Tape::Var Tape::cols(Var m, std::size_t c0, std::size_t c1) {
  const Tensor& x = value(m);
  const std::size_t r = x.rows(), c = x.cols();
  if (c0 >= c1 || c1 > c) throw std::invalid_argument("cols: bad range");
  const std::size_t w = c1 - c0;
  Tensor out = Tensor::mat(r, w);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(x.data.begin() + i * c + c0, w, out.data.begin() + i * w);
  return push(std::move(out), node(m).needs_grad,
              [m, c0, r, c, w](Tape& t, const Tensor& g) {
                Tensor gm(t.value(m).shape);
                for (std::size_t i = 0; i < r; ++i)
                  std::copy_n(g.data.begin() + i * w, w,
                              gm.data.begin() + i * c + c0);
                t.accumulate(m, gm);
              });
}

Tape::Var Tape::concat_cols(const std::vector<Var>& mats) {
  if (mats.empty()) throw std::invalid_argument("concat_cols: empty");
  const std::size_t r = value(mats[0]).rows();
  std::size_t c = 0;
  bool ng = false;
  for (Var v : mats) {
    if (value(v).rows() != r)
      throw std::invalid_argument("concat_cols: row mismatch");
    c += value(v).cols();
    ng = ng || node(v).needs_grad;
  }
  Tensor out = Tensor::mat(r, c);
  std::size_t off = 0;
  for (Var v : mats) {
    const std::size_t w = value(v).cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(value(v).data.begin() + i * w, w,
                  out.data.begin() + i * c + off);
    off += w;
  }
  return push(std::move(out), ng, [mats, r, c](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (Var v : mats) {
      const std::size_t w = t.value(v).cols();
      Tensor gv(t.value(v).shape);
      for (std::size_t i = 0; i < r; ++i)
        std::copy_n(g.data.begin() + i * c + off, w, gv.data.begin() + i * w);
      t.accumulate(v, gv);
      off += w;
    }
  });
}

Tape::Var Tape::embed(Var table, const std::vector<int>& ids) {
  const Tensor& tab = value(table);
  const std::size_t e = tab.cols();
  Tensor out = Tensor::mat(ids.size(), e);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tab.rows())
      throw std::invalid_argument("embed: token id out of range");
    std::copy_n(tab.data.begin() + static_cast<std::size_t>(ids[i]) * e, e,
                out.data.begin() + i * e);
  }
  return push(std::move(out), node(table).needs_grad,
              [table, ids, e](Tape& t, const Tensor& g) {
                Tensor gt(t.value(table).shape);
                for (std::size_t i = 0; i < ids.size(); ++i)
                  for (std::size_t j = 0; j < e; ++j)
                    gt.data[static_cast<std::size_t>(ids[i]) * e + j] +=
                        g.data[i * e + j];
                t.accumulate(table, gt);
              });
}

Tape::Var Tape::cosine(Var a, Var b) {
  check_same_shape(value(a), value(b), "cosine");
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  double dot_ab = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::size_t i = 0; i < av.data.size(); ++i) {
    dot_ab += av.data[i] * bv.data[i];
    na2 += av.data[i] * av.data[i];
    nb2 += bv.data[i] * bv.data[i];
  }
  constexpr double kZeroNorm = 1e-30;
  bool ng = node(a).needs_grad || node(b).needs_grad;
  if (na2 < kZeroNorm || nb2 < kZeroNorm) {
    // Cosine with a zero vector is defined as 0 with zero gradient.
    return push(Tensor::scalar(0.0), ng, [](Tape&, const Tensor&) {});
  }
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  const double cos_ab = dot_ab / (na * nb);
  return push(Tensor::scalar(cos_ab), ng,
              [a, b, cos_ab, na, nb](Tape& t, const Tensor& g) {
                const double gv = g.data[0];
                const Tensor& av = t.value(a);
                const Tensor& bv = t.value(b);
                Tensor ga(av.shape), gb(bv.shape);
                for (std::size_t i = 0; i < av.data.size(); ++i) {
                  ga.data[i] = gv * (bv.data[i] / (na * nb) -
                                     cos_ab * av.data[i] / (na * na));
                  gb.data[i] = gv * (av.data[i] / (na * nb) -
                                     cos_ab * bv.data[i] / (nb * nb));
                }
                t.accumulate(a, ga);
                t.accumulate(b, gb);
              });
}

Tape::Var Tape::conv1d3(Var x, Var w, Var b) {
  const Tensor& xm = value(x);
  const Tensor& wm = value(w);
  const Tensor& bv = value(b);
  if (wm.shape.size() != 3 || wm.shape[0] != 3)
    throw std::invalid_argument("conv1d3: w must be [3, Dout, Din]");
  const std::size_t len = xm.rows(), din = xm.cols();
  const std::size_t dout = wm.shape[1];
  if (wm.shape[2] != din || bv.numel() != dout)
    throw std::invalid_argument("conv1d3: channel mismatch");
  Tensor out = Tensor::mat(len, dout);
  for (std::size_t t_pos = 0; t_pos < len; ++t_pos)
    for (std::size_t f = 0; f < 3; ++f) {
      const std::ptrdiff_t src =
          static_cast<std::ptrdiff_t>(t_pos) + static_cast<std::ptrdiff_t>(f) - 1;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
      const double* wslab = wm.data.data() + f * dout * din;
      const double* xrow = xm.data.data() + src * din;
      double* orow = out.data.data() + t_pos * dout;
      for (std::size_t o = 0; o < dout; ++o) {
        double acc = 0.0;
        const double* wrow = wslab + o * din;
        for (std::size_t i = 0; i < din; ++i) acc += wrow[i] * xrow[i];
        orow[o] += acc;
      }
    }
  for (std::size_t t_pos = 0; t_pos < len; ++t_pos)
    for (std::size_t o = 0; o < dout; ++o) out.data[t_pos * dout + o] += bv.data[o];

  bool ng = node(x).needs_grad || node(w).needs_grad || node(b).needs_grad;
  return push(std::move(out), ng,
              [x, w, b, len, din, dout](Tape& t, const Tensor& g) {
                const Tensor& xm = t.value(x);
                const Tensor& wm = t.value(w);
                Tensor gx(xm.shape), gw(wm.shape), gb = Tensor::vec(dout);
                for (std::size_t t_pos = 0; t_pos < len; ++t_pos) {
                  const double* grow = g.data.data() + t_pos * dout;
                  for (std::size_t o = 0; o < dout; ++o) gb.data[o] += grow[o];
                  for (std::size_t f = 0; f < 3; ++f) {
                    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t_pos) +
                                               static_cast<std::ptrdiff_t>(f) - 1;
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(len))
                      continue;
                    const double* xrow = xm.data.data() + src * din;
                    double* gxrow = gx.data.data() + src * din;
                    for (std::size_t o = 0; o < dout; ++o) {
                      const double gv = grow[o];
                      const double* wrow = wm.data.data() + (f * dout + o) * din;
                      double* gwrow = gw.data.data() + (f * dout + o) * din;
                      for (std::size_t i = 0; i < din; ++i) {
                        gwrow[i] += gv * xrow[i];
                        gxrow[i] += gv * wrow[i];
                      }
                    }
                  }
                }
                t.accumulate(x, gx);
                t.accumulate(w, gw);
                t.accumulate(b, gb);
              });
}

Tape::Var Tape::cross_entropy_const(const std::vector<double>& target,
                                    Var probs) {
  const Tensor& p = value(probs);
  if (p.numel() != target.size())
    throw std::invalid_argument("cross_entropy_const: dimension mismatch");
  double ce = 0.0;
  for (std::size_t k = 0; k < target.size(); ++k)
    ce -= target[k] * std::log(std::max(p.data[k], kProbFloor));
  return push(Tensor::scalar(ce), node(probs).needs_grad,
              [probs, target](Tape& t, const Tensor& g) {
                const Tensor& p = t.value(probs);
                Tensor gp(p.shape);
                for (std::size_t k = 0; k < target.size(); ++k)
                  gp.data[k] = -g.data[0] * target[k] /
                               std::max(p.data[k], kProbFloor);
                t.accumulate(probs, gp);
              });
}

Grads Tape::backward(Var loss) {
  if (consumed_) throw std::logic_error("Tape: backward called twice");
  consumed_ = true;
  if (value(loss).numel() != 1)
    throw std::invalid_argument("Tape: loss must be scalar");
  node(loss).grad = Tensor::scalar(1.0);
  node(loss).needs_grad = true;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.data.empty() || !n.backprop) continue;
    n.backprop(*this, n.grad);
  }
  Grads grads;
  for (Node& n : nodes_) {
    if (n.param_name.empty()) continue;
    auto it = grads.find(n.param_name);
    Tensor g = n.grad.data.empty() ? Tensor(n.value.shape) : n.grad;
    if (it == grads.end()) {
      grads.emplace(n.param_name, std::move(g));
    } else {
      for (std::size_t i = 0; i < g.data.size(); ++i)
        it->second.data[i] += g.data[i];
    }
  }
  return grads;
}

Tensor Tape::input_grad(Var wrt) const {
  const Node& n = nodes_[wrt.id];
  return n.grad.data.empty() ? Tensor(n.value.shape) : n.grad;
}

// ---------------------------------------------------------------------------
// Layer helpers

Tape::Var gru_cell(Tape& t, const GruParams& p, Tape::Var x, Tape::Var h) {
  Tape::Var z = t.sigmoid(t.add(t.affine(p.wz, x, p.bz), t.matvec(p.uz, h)));
  Tape::Var r = t.sigmoid(t.add(t.affine(p.wr, x, p.br), t.matvec(p.ur, h)));
  Tape::Var n =
      t.tanh_(t.add(t.affine(p.wn, x, p.bn), t.mul(r, t.matvec(p.un, h))));
  // h' = (1 - z) * n + z * h
  Tape::Var one_minus_z = t.add_const(t.neg(z), 1.0);
  return t.add(t.mul(one_minus_z, n), t.mul(z, h));
}

namespace {
const char* kGruSuffixes[9] = {"wz", "uz", "bz", "wr", "ur",
                               "br", "wn", "un", "bn"};
}

void add_gru_params(ParamStore& ps, const std::string& prefix,
                    std::size_t in_dim, std::size_t hidden,
                    std::uint64_t seed) {
  for (int i = 0; i < 9; ++i) {
    const std::string name = prefix + "." + kGruSuffixes[i];
    const char kind = kGruSuffixes[i][0];
    if (kind == 'w')
      ps.add(name, init_uniform({hidden, in_dim}, in_dim, seed + i));
    else if (kind == 'u')
      ps.add(name, init_uniform({hidden, hidden}, hidden, seed + i));
    else
      ps.add(name, Tensor::vec(hidden));
  }
}

GruParams gru_params(Tape& t, const ParamStore& ps, const std::string& prefix) {
  GruParams p;
  p.wz = t.param(ps, prefix + ".wz");
  p.uz = t.param(ps, prefix + ".uz");
  p.bz = t.param(ps, prefix + ".bz");
  p.wr = t.param(ps, prefix + ".wr");
  p.ur = t.param(ps, prefix + ".ur");
  p.br = t.param(ps, prefix + ".br");
  p.wn = t.param(ps, prefix + ".wn");
  p.un = t.param(ps, prefix + ".un");
  p.bn = t.param(ps, prefix + ".bn");
  return p;
}

void add_attention_params(ParamStore& ps, const std::string& prefix,
                          std::size_t dim, std::uint64_t seed) {
  ps.add(prefix + ".wq", init_uniform({dim, dim}, dim, seed));
  ps.add(prefix + ".wk", init_uniform({dim, dim}, dim, seed + 1));
  ps.add(prefix + ".wv", init_uniform({dim, dim}, dim, seed + 2));
  ps.add(prefix + ".wo", init_uniform({dim, dim}, dim, seed + 3));
}

Tape::Var attention(Tape& t, const ParamStore& ps, const std::string& prefix,
                    Tape::Var queries, Tape::Var keys_values,
                    std::size_t num_heads) {
  const std::size_t dim = t.value(queries).cols();
  if (num_heads == 0 || dim % num_heads != 0)
    throw std::invalid_argument("attention: dim must be divisible by heads");
  Tape::Var wq = t.param(ps, prefix + ".wq");
  Tape::Var wk = t.param(ps, prefix + ".wk");
  Tape::Var wv = t.param(ps, prefix + ".wv");
  Tape::Var wo = t.param(ps, prefix + ".wo");
  Tape::Var q = t.matmul_nt(queries, wq);
  Tape::Var k = t.matmul_nt(keys_values, wk);
  Tape::Var v = t.matmul_nt(keys_values, wv);
  const std::size_t hd = dim / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tape::Var> heads;
  heads.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    Tape::Var qh = t.cols(q, h * hd, (h + 1) * hd);
    Tape::Var kh = t.cols(k, h * hd, (h + 1) * hd);
    Tape::Var vh = t.cols(v, h * hd, (h + 1) * hd);
    Tape::Var scores = t.scale(t.matmul_nt(qh, kh), inv_sqrt);
    Tape::Var probs = t.softmax_rows(scores);
    heads.push_back(t.matmul(probs, vh));
  }
  return t.matmul_nt(t.concat_cols(heads), wo);
}

// ---------------------------------------------------------------------------
// Optimizer and gradient checking

void adam_step(ParamStore& ps, const Grads& grads, double lr, double beta1,
               double beta2, double eps) {
  for (const auto& [name, g] : grads) {
    if (!ps.contains(name))
      throw std::invalid_argument("adam_step: unknown parameter " + name);
    if (!all_finite(g))
      throw std::invalid_argument("adam_step: non-finite gradient for " + name);
  }
  ps.step += 1;
  const double t = static_cast<double>(ps.step);
  const double bc1 = 1.0 - std::pow(beta1, t);
  const double bc2 = 1.0 - std::pow(beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor& p = ps.at(name);
    Tensor& m = ps.adam_m.try_emplace(name, Tensor(p.shape)).first->second;
    Tensor& v = ps.adam_v.try_emplace(name, Tensor(p.shape)).first->second;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g.data[i];
      v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

FiniteDiffReport finite_diff_check(
    const std::function<double(const ParamStore&)>& loss_fn, ParamStore& ps,
    const Grads& analytic, double tolerance, double h) {
  FiniteDiffReport report;
  for (const std::string& name : ps.names()) {
    Tensor& p = ps.at(name);
    const Tensor* ga = nullptr;
    auto it = analytic.find(name);
    if (it != analytic.end()) ga = &it->second;
    double worst = 0.0;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const double orig = p.data[i];
      p.data[i] = orig + h;
      const double up = loss_fn(ps);
      p.data[i] = orig - h;
      const double down = loss_fn(ps);
      p.data[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic_v = ga ? ga->data[i] : 0.0;
      const double denom = std::max({std::abs(numeric), std::abs(analytic_v),
                                     1e-6});
      worst = std::max(worst, std::abs(numeric - analytic_v) / denom);
    }
    report.entries.push_back({name, worst});
    report.worst = std::max(report.worst, worst);
  }
  report.pass = report.worst <= tolerance;
  return report;
}

}  // namespace udst
