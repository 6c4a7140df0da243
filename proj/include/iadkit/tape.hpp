#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iadkit/grid.hpp"
#include "iadkit/rng.hpp"

namespace iadkit {

// ---------------------------------------------------------------------------
// Raw matmul kernels (accumulate into out). Shared by forward and backward.
// ---------------------------------------------------------------------------

// out[M,N] += a[M,K] * b[K,N]
inline void mm_nn_acc(const Grid& a, const Grid& b, Grid& out) {
  const int M = a.shape[0], K = a.shape[1], N = b.shape[1];
  for (int i = 0; i < M; ++i) {
    const double* ar = a.row(i);
    double* orow = out.row(i);
    for (int k = 0; k < K; ++k) {
      const double av = ar[k];
      if (av == 0.0) continue;
      const double* br = b.row(k);
      for (int j = 0; j < N; ++j) orow[j] += av * br[j];
    }
  }
}

// out[M,N] += a[M,K] * b[N,K]^T
inline void mm_nt_acc(const Grid& a, const Grid& b, Grid& out) {
  const int M = a.shape[0], K = a.shape[1], N = b.shape[0];
  for (int i = 0; i < M; ++i) {
    const double* ar = a.row(i);
    double* orow = out.row(i);
    for (int j = 0; j < N; ++j) {
      const double* br = b.row(j);
      double s = 0.0;
      for (int k = 0; k < K; ++k) s += ar[k] * br[k];
      orow[j] += s;
    }
  }
}

// out[K,N] += a[M,K]^T * b[M,N]
inline void mm_tn_acc(const Grid& a, const Grid& b, Grid& out) {
  const int M = a.shape[0], K = a.shape[1], N = b.shape[1];
  for (int i = 0; i < M; ++i) {
    const double* ar = a.row(i);
    const double* br = b.row(i);
    for (int k = 0; k < K; ++k) {
      const double av = ar[k];
      if (av == 0.0) continue;
      double* orow = out.row(k);
      for (int j = 0; j < N; ++j) orow[j] += av * br[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Named parameter registry. Iteration order is insertion order so training
// and checkpointing are deterministic.
// ---------------------------------------------------------------------------
struct ParamStore {
  std::vector<std::string> order;
  std::map<std::string, Grid> grids;

  Grid& add(const std::string& name, Grid g) {
    if (grids.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    order.push_back(name);
    return grids[name] = std::move(g);
  }

  bool has(const std::string& name) const { return grids.count(name) != 0; }

  Grid& at(const std::string& name) {
    auto it = grids.find(name);
    if (it == grids.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
    return it->second;
  }
  const Grid& at(const std::string& name) const {
    auto it = grids.find(name);
    if (it == grids.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
    return it->second;
  }

  size_t total_count() const {
    size_t n = 0;
    for (const auto& name : order) n += grids.at(name).numel();
    return n;
  }
};

using NodeId = int;

// ---------------------------------------------------------------------------
// Reverse-mode tape over a fixed primitive set. One tape per training step,
// single writer. Backward replays recorded ops in reverse and accumulates
// into node grads; parameter grads are read back by name.
// ---------------------------------------------------------------------------
class Tape {
 public:
  struct Node {
    Grid value;
    Grid grad;  // allocated on demand during backward
    bool requires_grad = false;
    std::function<void(Tape&)> back;  // pulls own grad, pushes into parents
  };

  NodeId constant(Grid g) { return push(std::move(g), false); }
  NodeId leaf(Grid g) { return push(std::move(g), true); }

  // One shared leaf per parameter name per tape, so gradients accumulate in
  // a single place.
  NodeId param(ParamStore& ps, const std::string& name) {
    auto it = param_nodes_.find(name);
    if (it != param_nodes_.end()) return it->second;
    NodeId id = leaf(ps.at(name));
    param_nodes_[name] = id;
    return id;
  }

  const Grid& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Grid& grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].grad; }

  // Gradient of the last backward() w.r.t. a bound parameter, or nullptr if
  // the parameter was never used (its gradient is exactly zero).
  const Grid* param_grad(const std::string& name) const {
    auto it = param_nodes_.find(name);
    if (it == param_nodes_.end()) return nullptr;
    const Node& n = nodes_[static_cast<size_t>(it->second)];
    return n.grad.empty() ? nullptr : &n.grad;
  }

  const std::map<std::string, NodeId>& bound_params() const { return param_nodes_; }

  size_t size() const { return nodes_.size(); }

  // -------------------------------------------------------------------------
  // Elementwise / broadcast primitives
  // -------------------------------------------------------------------------

  NodeId add(NodeId a, NodeId b) {
    const Grid &ga = value(a), &gb = value(b);
    require_same_shape(ga, gb, "add");
    Grid out = ga;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += gb.data[i];
    return binary(std::move(out), a, b, [](Tape& t, NodeId self, NodeId a2, NodeId b2) {
      const Grid& g = t.grad_of(self);
      t.accumulate(a2, g);
      t.accumulate(b2, g);
    });
  }

  NodeId sub(NodeId a, NodeId b) {
    const Grid &ga = value(a), &gb = value(b);
    require_same_shape(ga, gb, "sub");
    Grid out = ga;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= gb.data[i];
    return binary(std::move(out), a, b, [](Tape& t, NodeId self, NodeId a2, NodeId b2) {
      const Grid& g = t.grad_of(self);
      t.accumulate(a2, g);
      t.accumulate_scaled(b2, g, -1.0);
    });
  }

  NodeId mul(NodeId a, NodeId b) {
    const Grid &ga = value(a), &gb = value(b);
    require_same_shape(ga, gb, "mul");
    Grid out = ga;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= gb.data[i];
    return binary(std::move(out), a, b, [](Tape& t, NodeId self, NodeId a2, NodeId b2) {
      const Grid& g = t.grad_of(self);
      const Grid &va = t.value(a2), &vb = t.value(b2);
      if (t.wants_grad(a2)) {
        Grid& da = t.grad_slot(a2);
        for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * vb.data[i];
      }
      if (t.wants_grad(b2)) {
        Grid& db = t.grad_slot(b2);
        for (size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i] * va.data[i];
      }
    });
  }

  NodeId scale(NodeId a, double c) {
    Grid out = value(a);
    for (double& v : out.data) v *= c;
    return unary(std::move(out), a, [c](Tape& t, NodeId self, NodeId a2) {
      t.accumulate_scaled(a2, t.grad_of(self), c);
    });
  }

  NodeId add_const(NodeId a, double c) {
    Grid out = value(a);
    for (double& v : out.data) v += c;
    return unary(std::move(out), a, [](Tape& t, NodeId self, NodeId a2) {
      t.accumulate(a2, t.grad_of(self));
    });
  }

  NodeId neg(NodeId a) { return scale(a, -1.0); }

  // Broadcast a scalar node s over every element of a: a + s, a * s.
  NodeId badd(NodeId a, NodeId s) {
    require_scalar(s, "badd");
    Grid out = value(a);
    const double sv = value(s).data[0];
    for (double& v : out.data) v += sv;
    return binary(std::move(out), a, s, [](Tape& t, NodeId self, NodeId a2, NodeId s2) {
      const Grid& g = t.grad_of(self);
      t.accumulate(a2, g);
      if (t.wants_grad(s2)) {
        double acc = 0.0;
        for (double v : g.data) acc += v;
        t.grad_slot(s2).data[0] += acc;
      }
    });
  }

  NodeId bmul(NodeId a, NodeId s) {
    require_scalar(s, "bmul");
    Grid out = value(a);
    const double sv = value(s).data[0];
    for (double& v : out.data) v *= sv;
    return binary(std::move(out), a, s, [](Tape& t, NodeId self, NodeId a2, NodeId s2) {
      const Grid& g = t.grad_of(self);
      const double sv2 = t.value(s2).data[0];
      t.accumulate_scaled(a2, g, sv2);
      if (t.wants_grad(s2)) {
        const Grid& va = t.value(a2);
        double acc = 0.0;
        for (size_t i = 0; i < g.data.size(); ++i) acc += g.data[i] * va.data[i];
        t.grad_slot(s2).data[0] += acc;
      }
    });
  }

  NodeId recip(NodeId a) {
    Grid out = value(a);
    for (double& v : out.data) v = 1.0 / v;
    return unary(std::move(out), a, [](Tape& t, NodeId self, NodeId a2) {
      const Grid& g = t.grad_of(self);
      const Grid& y = t.value(self);
      Grid& da = t.grad_slot(a2);
      for (size_t i = 0; i < g.data.size(); ++i) da.data[i] -= g.data[i] * y.data[i] * y.data[i];
    });
  }

  NodeId log(NodeId a) {
    Grid out = value(a);
    for (double& v : out.data) {
      if (v <= 0.0) throw std::domain_error("Tape::log: non-positive input");
      v = std::log(v);
    }
    return unary(std::move(out), a, [](Tape& t, NodeId self, NodeId a2) {
      const Grid& g = t.grad_of(self);
      const Grid& x = t.value(a2);
      Grid& da = t.grad_slot(a2);
      for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] / x.data[i];
    });
  }

  // x^p for x >= 0. Derivative at x == 0 is taken as 0 (p >= 1 in all users).
  NodeId pow_const(NodeId a, double p) {
    Grid out = value(a);
    for (double& v : out.data) {
      if (v < 0.0) throw std::domain_error("Tape::pow_const: negative base");
      v = std::pow(v, p);
    }
    return unary(std::move(out), a, [p](Tape& t, NodeId self, NodeId a2) {
      const Grid& g = t.grad_of(self);
      const Grid& x = t.value(a2);
      Grid& da = t.grad_slot(a2);
      for (size_t i = 0; i < g.data.size(); ++i) {
        double xv = x.data[i];
        double d = (xv == 0.0) ? 0.0 : p * std::pow(xv, p - 1.0);
        da.data[i] += g.data[i] * d;
      }
    });
  }

  // Clamp to [lo, hi]; gradient passes through strictly inside the range.
  NodeId clamp(NodeId a, double lo, double hi) {
    Grid out = value(a);
    for (double& v : out.data) v = std::min(hi, std::max(lo, v));
    return unary(std::move(out), a, [lo, hi](Tape& t, NodeId self, NodeId a2) {
      const Grid& g = t.grad_of(self);
      const Grid& x = t.value(a2);
      Grid& da = t.grad_slot(a2);
      for (size_t i = 0; i < g.data.size(); ++i)
        if (x.data[i] > lo && x.data[i] < hi) da.data[i] += g.data[i];
    });
  }

  NodeId relu(NodeId a) {
    Grid out = value(a);
    for (double& v : out.data) v = std::max(0.0, v);
    return unary(std::move(out), a, [](Tape& t, NodeId self, NodeId a2) {
      const Grid& g = t.grad_of(self);
      const Grid& x = t.value(a2);
      Grid& da = t.grad_slot(a2);
      for (size_t i = 0; i < g.data.size(); ++i)
        if (x.data[i] > 0.0) da.data[i] += g.data[i];
    });
  }

  NodeId gelu(NodeId a) {
    static constexpr double kInvSqrt2 = 0.7071067811865475244;
    static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    Grid out = value(a);
    for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    return unary(std::move(out), a, [](Tape& t, NodeId self, NodeId a2) {
      const Grid& g = t.grad_of(self);
      const Grid& x = t.value(a2);
      Grid& da = t.grad_slot(a2);
      for (size_t i = 0; i < g.data.size(); ++i) {
        double xv = x.data[i];
        double cdf = 0.5 * (1.0 + std::erf(xv * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * xv * xv);
        da.data[i] += g.data[i] * (cdf + xv * pdf);
      }
    });
  }

  // -------------------------------------------------------------------------
  // Reductions
  // -------------------------------------------------------------------------

  NodeId sum(NodeId a) {
    double s = 0.0;
    for (double v : value(a).data) s += v;
    return unary(Grid::scalar(s), a, [](Tape& t, NodeId self, NodeId a2) {
      t.accumulate_fill(a2, t.grad_of(self).data[0]);
    });
  }

  NodeId mean(NodeId a) {
    const size_t n = value(a).numel();
    if (n == 0) throw std::invalid_argument("Tape::mean: empty input");
    double s = 0.0;
    for (double v : value(a).data) s += v;
    return unary(Grid::scalar(s / static_cast<double>(n)), a,
                 [n](Tape& t, NodeId self, NodeId a2) {
                   t.accumulate_fill(a2, t.grad_of(self).data[0] / static_cast<double>(n));
                 });
  }

  // Max/min over all elements; (sub)gradient routes to the first extremum.
  NodeId max_all(NodeId a) { return extremum(a, true); }
  NodeId min_all(NodeId a) { return extremum(a, false); }

  // -------------------------------------------------------------------------
  // 2-d structure primitives
  // -------------------------------------------------------------------------

  NodeId matmul(NodeId a, NodeId b) {
    const Grid &ga = value(a), &gb = value(b);
    ga.require_2d();
    gb.require_2d();
    if (ga.shape[1] != gb.shape[0]) throw std::invalid_argument("matmul: inner dim mismatch");
    Grid out({ga.shape[0], gb.shape[1]});
    mm_nn_acc(ga, gb, out);
    return binary(std::move(out), a, b, [](Tape& t, NodeId self, NodeId a2, NodeId b2) {
      const Grid& g = t.grad_of(self);
      if (t.wants_grad(a2)) mm_nt_acc(g, t.value(b2), t.grad_slot(a2));
      if (t.wants_grad(b2)) mm_tn_acc(t.value(a2), g, t.grad_slot(b2));
    });
  }

  // a[M,K] * b[N,K]^T -> [M,N]
  NodeId matmul_nt(NodeId a, NodeId b) {
    const Grid &ga = value(a), &gb = value(b);
    ga.require_2d();
    gb.require_2d();
    if (ga.shape[1] != gb.shape[1]) throw std::invalid_argument("matmul_nt: inner dim mismatch");
    Grid out({ga.shape[0], gb.shape[0]});
    mm_nt_acc(ga, gb, out);
    return binary(std::move(out), a, b, [](Tape& t, NodeId self, NodeId a2, NodeId b2) {
      const Grid& g = t.grad_of(self);
      if (t.wants_grad(a2)) mm_nn_acc(g, t.value(b2), t.grad_slot(a2));
      if (t.wants_grad(b2)) mm_tn_acc(g, t.value(a2), t.grad_slot(b2));
    });
  }

  // m[R,C] + b[C] broadcast over rows.
  NodeId bias_add(NodeId m, NodeId b) {
    const Grid &gm = value(m), &gb = value(b);
    gm.require_2d();
    if (gb.ndim() != 1 || gb.shape[0] != gm.shape[1])
      throw std::invalid_argument("bias_add: bias shape mismatch");
    Grid out = gm;
    for (int i = 0; i < gm.shape[0]; ++i) {
      double* r = out.row(i);
      for (int j = 0; j < gm.shape[1]; ++j) r[j] += gb.data[static_cast<size_t>(j)];
    }
    return binary(std::move(out), m, b, [](Tape& t, NodeId self, NodeId m2, NodeId b2) {
      const Grid& g = t.grad_of(self);
      t.accumulate(m2, g);
      if (t.wants_grad(b2)) {
        Grid& db = t.grad_slot(b2);
        for (int i = 0; i < g.shape[0]; ++i) {
          const double* r = g.row(i);
          for (int j = 0; j < g.shape[1]; ++j) db.data[static_cast<size_t>(j)] += r[j];
        }
      }
    });
  }

  NodeId rows_gather(NodeId a, std::vector<int> rows) {
    const Grid& ga = value(a);
    ga.require_2d();
    const int C = ga.shape[1];
    Grid out({static_cast<int>(rows.size()), C});
    for (size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0 || rows[i] >= ga.shape[0])
        throw std::out_of_range("rows_gather: row index out of range");
      std::copy_n(ga.row(rows[i]), C, out.row(static_cast<int>(i)));
    }
    auto idx = std::make_shared<std::vector<int>>(std::move(rows));
    return unary(std::move(out), a, [idx](Tape& t, NodeId self, NodeId a2) {
      const Grid& g = t.grad_of(self);
      Grid& da = t.grad_slot(a2);
      const int C2 = g.shape[1];
      for (size_t i = 0; i < idx->size(); ++i) {
        const double* src = g.row(static_cast<int>(i));
        double* dst = da.row((*idx)[i]);
        for (int j = 0; j < C2; ++j) dst[j] += src[j];
      }
    });
  }

  NodeId cols_gather(NodeId a, std::vector<int> cols) {
    const Grid& ga = value(a);
    ga.require_2d();
    const int R = ga.shape[0];
    Grid out({R, static_cast<int>(cols.size())});
    for (int i = 0; i < R; ++i) {
      const double* src = ga.row(i);
      double* dst = out.row(i);
      for (size_t j = 0; j < cols.size(); ++j) {
        if (cols[j] < 0 || cols[j] >= ga.shape[1])
          throw std::out_of_range("cols_gather: column index out of range");
        dst[j] = src[cols[j]];
      }
    }
    auto idx = std::make_shared<std::vector<int>>(std::move(cols));
    return unary(std::move(out), a, [idx](Tape& t, NodeId self, NodeId a2) {
      const Grid& g = t.grad_of(self);
      Grid& da = t.grad_slot(a2);
      for (int i = 0; i < g.shape[0]; ++i) {
        const double* src = g.row(i);
        double* dst = da.row(i);
        for (size_t j = 0; j < idx->size(); ++j) dst[(*idx)[j]] += src[j];
      }
    });
  }

  NodeId slice_rows(NodeId a, int start, int len) {
    std::vector<int> rows(static_cast<size_t>(len));
    for (int i = 0; i < len; ++i) rows[static_cast<size_t>(i)] = start + i;
    return rows_gather(a, std::move(rows));
  }

  NodeId slice_cols(NodeId a, int start, int len) {
    std::vector<int> cols(static_cast<size_t>(len));
    for (int i = 0; i < len; ++i) cols[static_cast<size_t>(i)] = start + i;
    return cols_gather(a, std::move(cols));
  }

  NodeId concat_rows(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    const int C = value(parts[0]).cols();
    int R = 0;
    for (NodeId p : parts) {
      if (value(p).cols() != C) throw std::invalid_argument("concat_rows: column mismatch");
      R += value(p).rows();
    }
    Grid out({R, C});
    int r = 0;
    for (NodeId p : parts) {
      const Grid& gp = value(p);
      std::copy(gp.data.begin(), gp.data.end(), out.row(r));
      r += gp.rows();
    }
    auto ps = std::make_shared<std::vector<NodeId>>(parts);
    NodeId id = push(std::move(out), any_requires(parts));
    nodes_[static_cast<size_t>(id)].back = [id, ps](Tape& t) {
      const Grid& g = t.grad_of(id);
      int row = 0;
      for (NodeId p : *ps) {
        const int pr = t.value(p).rows(), pc = t.value(p).cols();
        if (t.wants_grad(p)) {
          Grid& dp = t.grad_slot(p);
          for (int i = 0; i < pr; ++i) {
            const double* src = g.row(row + i);
            double* dst = dp.row(i);
            for (int j = 0; j < pc; ++j) dst[j] += src[j];
          }
        }
        row += pr;
      }
    };
    return id;
  }

  NodeId concat_cols(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    const int R = value(parts[0]).rows();
    int C = 0;
    for (NodeId p : parts) {
      if (value(p).rows() != R) throw std::invalid_argument("concat_cols: row mismatch");
      C += value(p).cols();
    }
    Grid out({R, C});
    int c = 0;
    for (NodeId p : parts) {
      const Grid& gp = value(p);
      for (int i = 0; i < R; ++i) std::copy_n(gp.row(i), gp.cols(), out.row(i) + c);
      c += gp.cols();
    }
    auto ps = std::make_shared<std::vector<NodeId>>(parts);
    NodeId id = push(std::move(out), any_requires(parts));
    nodes_[static_cast<size_t>(id)].back = [id, ps](Tape& t) {
      const Grid& g = t.grad_of(id);
      int col = 0;
      for (NodeId p : *ps) {
        const int pc = t.value(p).cols();
        if (t.wants_grad(p)) {
          Grid& dp = t.grad_slot(p);
          for (int i = 0; i < g.shape[0]; ++i) {
            const double* src = g.row(i) + col;
            double* dst = dp.row(i);
            for (int j = 0; j < pc; ++j) dst[j] += src[j];
          }
        }
        col += pc;
      }
    };
    return id;
  }

  NodeId reshape(NodeId a, std::vector<int> new_shape) {
    if (Grid::count(new_shape) != value(a).numel())
      throw std::invalid_argument("reshape: element count mismatch");
    Grid out(std::move(new_shape), value(a).data);
    return unary(std::move(out), a, [](Tape& t, NodeId self, NodeId a2) {
      const Grid& g = t.grad_of(self);
      Grid& da = t.grad_slot(a2);
      for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
    });
  }

  // Row-wise stable softmax over the last dimension of a 2-d grid.
  NodeId softmax_rows(NodeId a) {
    const Grid& ga = value(a);
    ga.require_2d();
    Grid out = ga;
    const int R = ga.shape[0], C = ga.shape[1];
    for (int i = 0; i < R; ++i) {
      double* r = out.row(i);
      double m = r[0];
      for (int j = 1; j < C; ++j) m = std::max(m, r[j]);
      double z = 0.0;
      for (int j = 0; j < C; ++j) {
        r[j] = std::exp(r[j] - m);
        z += r[j];
      }
      for (int j = 0; j < C; ++j) r[j] /= z;
    }
    return unary(std::move(out), a, [](Tape& t, NodeId self, NodeId a2) {
      const Grid& g = t.grad_of(self);
      const Grid& y = t.value(self);
      Grid& da = t.grad_slot(a2);
      const int R2 = y.shape[0], C2 = y.shape[1];
      for (int i = 0; i < R2; ++i) {
        const double *gr = g.row(i), *yr = y.row(i);
        double dot = 0.0;
        for (int j = 0; j < C2; ++j) dot += gr[j] * yr[j];
        double* dr = da.row(i);
        for (int j = 0; j < C2; ++j) dr[j] += yr[j] * (gr[j] - dot);
      }
    });
  }

  // Row-wise layer norm with affine parameters gamma, beta of length C.
  NodeId layer_norm_rows(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5) {
    const Grid& gx = value(x);
    gx.require_2d();
    const int R = gx.shape[0], C = gx.shape[1];
    const Grid &gg = value(gamma), &gb = value(beta);
    if (gg.ndim() != 1 || gg.shape[0] != C || gb.ndim() != 1 || gb.shape[0] != C)
      throw std::invalid_argument("layer_norm_rows: affine shape mismatch");
    Grid out({R, C});
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(R));
    auto xhat = std::make_shared<Grid>(Grid({R, C}));
    for (int i = 0; i < R; ++i) {
      const double* r = gx.row(i);
      double mu = 0.0;
      for (int j = 0; j < C; ++j) mu += r[j];
      mu /= C;
      double var = 0.0;
      for (int j = 0; j < C; ++j) var += (r[j] - mu) * (r[j] - mu);
      var /= C;
      double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[static_cast<size_t>(i)] = is;
      double* xh = xhat->row(i);
      double* o = out.row(i);
      for (int j = 0; j < C; ++j) {
        xh[j] = (r[j] - mu) * is;
        o[j] = xh[j] * gg.data[static_cast<size_t>(j)] + gb.data[static_cast<size_t>(j)];
      }
    }
    NodeId id = push(std::move(out),
                     wants_grad(x) || wants_grad(gamma) || wants_grad(beta));
    nodes_[static_cast<size_t>(id)].back = [id, x, gamma, beta, inv_std, xhat](Tape& t) {
      const Grid& g = t.grad_of(id);
      const int R2 = g.shape[0], C2 = g.shape[1];
      const Grid& gg2 = t.value(gamma);
      if (t.wants_grad(gamma)) {
        Grid& dg = t.grad_slot(gamma);
        for (int i = 0; i < R2; ++i) {
          const double *gr = g.row(i), *xh = xhat->row(i);
          for (int j = 0; j < C2; ++j) dg.data[static_cast<size_t>(j)] += gr[j] * xh[j];
        }
      }
      if (t.wants_grad(beta)) {
        Grid& db = t.grad_slot(beta);
        for (int i = 0; i < R2; ++i) {
          const double* gr = g.row(i);
          for (int j = 0; j < C2; ++j) db.data[static_cast<size_t>(j)] += gr[j];
        }
      }
      if (t.wants_grad(x)) {
        Grid& dx = t.grad_slot(x);
        for (int i = 0; i < R2; ++i) {
          const double *gr = g.row(i), *xh = xhat->row(i);
          const double is = (*inv_std)[static_cast<size_t>(i)];
          double sum_gy = 0.0, sum_gyx = 0.0;
          for (int j = 0; j < C2; ++j) {
            double gy = gr[j] * gg2.data[static_cast<size_t>(j)];
            sum_gy += gy;
            sum_gyx += gy * xh[j];
          }
          double* dr = dx.row(i);
          for (int j = 0; j < C2; ++j) {
            double gy = gr[j] * gg2.data[static_cast<size_t>(j)];
            dr[j] += is * (gy - sum_gy / C2 - xh[j] * sum_gyx / C2);
          }
        }
      }
    };
    return id;
  }

  // Mean negative log softmax probability of the target in each row.
  NodeId cross_entropy_rows(NodeId logits, std::vector<int> targets) {
    const Grid& gl = value(logits);
    gl.require_2d();
    const int R = gl.shape[0], C = gl.shape[1];
    if (static_cast<int>(targets.size()) != R)
      throw std::invalid_argument("cross_entropy_rows: target count mismatch");
    for (int tgt : targets)
      if (tgt < 0 || tgt >= C)
        throw std::out_of_range("cross_entropy_rows: target id out of vocabulary");
    auto probs = std::make_shared<Grid>(Grid({R, C}));
    double loss = 0.0;
    for (int i = 0; i < R; ++i) {
      const double* r = gl.row(i);
      double m = r[0];
      for (int j = 1; j < C; ++j) m = std::max(m, r[j]);
      double z = 0.0;
      double* pr = probs->row(i);
      for (int j = 0; j < C; ++j) {
        pr[j] = std::exp(r[j] - m);
        z += pr[j];
      }
      for (int j = 0; j < C; ++j) pr[j] /= z;
      loss -= std::log(pr[targets[static_cast<size_t>(i)]]);
    }
    loss /= R;
    auto tg = std::make_shared<std::vector<int>>(std::move(targets));
    return unary(Grid::scalar(loss), logits, [probs, tg](Tape& t, NodeId self, NodeId l2) {
      const double g = t.grad_of(self).data[0];
      Grid& dl = t.grad_slot(l2);
      const int R2 = probs->shape[0], C2 = probs->shape[1];
      const double inv_r = 1.0 / R2;
      for (int i = 0; i < R2; ++i) {
        const double* pr = probs->row(i);
        double* dr = dl.row(i);
        for (int j = 0; j < C2; ++j) dr[j] += g * inv_r * pr[j];
        dr[(*tg)[static_cast<size_t>(i)]] -= g * inv_r;
      }
    });
  }

  // -------------------------------------------------------------------------
  // Backward
  // -------------------------------------------------------------------------

  void backward(NodeId root) {
    Node& r = nodes_[static_cast<size_t>(root)];
    if (r.value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!r.value.all_finite()) throw std::runtime_error("backward: non-finite loss");
    grad_slot(root).data[0] = 1.0;
    for (int id = root; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.requires_grad || n.grad.empty() || !n.back) continue;
      n.back(*this);
    }
  }

  bool wants_grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  Grid& grad_slot(NodeId id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) n.grad = Grid(n.value.shape);
    return n.grad;
  }

 private:
  const Grid& grad_of(NodeId id) const { return nodes_[static_cast<size_t>(id)].grad; }

  void accumulate(NodeId id, const Grid& g) {
    if (!wants_grad(id)) return;
    Grid& d = grad_slot(id);
    for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
  }

  void accumulate_scaled(NodeId id, const Grid& g, double c) {
    if (!wants_grad(id)) return;
    Grid& d = grad_slot(id);
    for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += c * g.data[i];
  }

  void accumulate_fill(NodeId id, double v) {
    if (!wants_grad(id)) return;
    Grid& d = grad_slot(id);
    for (double& x : d.data) x += v;
  }

  NodeId extremum(NodeId a, bool take_max) {
    const Grid& ga = value(a);
    ga.require_nonempty();
    size_t best = 0;
    for (size_t i = 1; i < ga.data.size(); ++i) {
      if (take_max ? (ga.data[i] > ga.data[best]) : (ga.data[i] < ga.data[best])) best = i;
    }
    const double v = ga.data[best];
    return unary(Grid::scalar(v), a, [best](Tape& t, NodeId self, NodeId a2) {
      if (!t.wants_grad(a2)) return;
      t.grad_slot(a2).data[best] += t.grad_of(self).data[0];
    });
  }

  static void require_same_shape(const Grid& a, const Grid& b, const char* op) {
    if (!a.same_shape(b))
      throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                  " vs " + b.shape_str());
  }

  void require_scalar(NodeId s, const char* op) const {
    if (value(s).numel() != 1)
      throw std::invalid_argument(std::string(op) + ": expected scalar node");
  }

  bool any_requires(const std::vector<NodeId>& ids) const {
    for (NodeId id : ids)
      if (wants_grad(id)) return true;
    return false;
  }

  NodeId push(Grid g, bool requires) {
    nodes_.push_back(Node{std::move(g), Grid(), requires, nullptr});
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  template <class F>
  NodeId unary(Grid out, NodeId a, F&& fn) {
    NodeId id = push(std::move(out), wants_grad(a));
    if (nodes_[static_cast<size_t>(id)].requires_grad) {
      nodes_[static_cast<size_t>(id)].back = [id, a, fn = std::forward<F>(fn)](Tape& t) {
        fn(t, id, a);
      };
    }
    return id;
  }

  template <class F>
  NodeId binary(Grid out, NodeId a, NodeId b, F&& fn) {
    NodeId id = push(std::move(out), wants_grad(a) || wants_grad(b));
    if (nodes_[static_cast<size_t>(id)].requires_grad) {
      nodes_[static_cast<size_t>(id)].back = [id, a, b, fn = std::forward<F>(fn)](Tape& t) {
        fn(t, id, a, b);
      };
    }
    return id;
  }

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> param_nodes_;
};

// Mean of same-shaped nodes.
inline NodeId average_nodes(Tape& t, const std::vector<NodeId>& parts) {
  if (parts.empty()) throw std::invalid_argument("average_nodes: no parts");
  NodeId acc = parts[0];
  for (size_t i = 1; i < parts.size(); ++i) acc = t.add(acc, parts[i]);
  return t.scale(acc, 1.0 / static_cast<double>(parts.size()));
}

// ---------------------------------------------------------------------------
// Gradient verification against central finite differences.
//
// f builds a fresh graph on the given tape (binding parameters through
// Tape::param) and returns a scalar node. Relative error is
// |analytic - numeric| / max(1, |numeric|), maximised over the checked
// coordinates. coords_per_param < 0 checks every coordinate; otherwise a
// deterministic sample of that size per parameter.
// ---------------------------------------------------------------------------
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
};

template <class F>
GradCheckReport grad_check(ParamStore& params, const std::vector<std::string>& names, F&& f,
                           double h = 1e-5, int coords_per_param = -1,
                           uint64_t coord_seed = 0) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: h must be > 0");

  Tape tape;
  NodeId root = f(tape);
  tape.backward(root);

  std::map<std::string, Grid> analytic;
  for (const auto& name : names) {
    const Grid* g = tape.param_grad(name);
    analytic[name] = g ? *g : Grid(params.at(name).shape);  // unused -> exactly zero
  }

  auto eval = [&](const std::string& who) {
    Tape t2;
    NodeId r2 = f(t2);
    double v = t2.value(r2).data[0];
    if (!std::isfinite(v))
      throw std::runtime_error("grad_check: non-finite value while perturbing " + who);
    return v;
  };

  GradCheckReport rep;
  for (const auto& name : names) {
    Grid& theta = params.at(name);
    std::vector<size_t> coords;
    if (coords_per_param < 0 || static_cast<size_t>(coords_per_param) >= theta.numel()) {
      coords.resize(theta.numel());
      for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
      Rng rng(coord_seed, {0x67636bULL, static_cast<uint64_t>(theta.numel())});
      for (char c : name) rng = rng.derive(static_cast<uint64_t>(c));
      for (int k = 0; k < coords_per_param; ++k)
        coords.push_back(static_cast<size_t>(rng.below(theta.numel())));
    }
    for (size_t c : coords) {
      const double saved = theta.data[c];
      theta.data[c] = saved + h;
      const double fp = eval(name);
      theta.data[c] = saved - h;
      const double fm = eval(name);
      theta.data[c] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[name].data[c];
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = name;
      }
    }
  }
  return rep;
}

}  // namespace iadkit
