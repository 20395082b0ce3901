#pragma once

// Reverse-mode autodiff over TensorT. Eager define-by-run tape: every op
// computes its value immediately and, when tracking is on, records a closure
// that scatters gradient back to its parents. Node ids are creation-ordered,
// which is already a topological order for backward().
//
// The same graph code serves three callers: codec inference (float, tape
// off), training (float, tape on) and finite-difference validation (double).

#include <cmath>
#include <functional>
#include <limits>
#include <memory>

#include "lcm/tensor.hpp"

namespace lcm {

template <typename S>
class Graph {
 public:
  using Id = int32_t;

  explicit Graph(bool track = true) : track_(track) {}

  bool tracking() const { return track_; }

  // --- node access -------------------------------------------------------

  const TensorT<S>& val(Id id) const { return *nodes_[size_t(id)].value; }

  TensorT<S>& grad(Id id) {
    Node& n = nodes_[size_t(id)];
    if (!n.grad) throw InvariantError("graph: grad not allocated");
    return *n.grad;
  }

  // --- leaves -------------------------------------------------------------

  Id constant(TensorT<S> t) {
    Node n;
    n.owned_value = std::make_unique<TensorT<S>>(std::move(t));
    n.value = n.owned_value.get();
    n.needs_grad = false;
    return push(std::move(n));
  }

  // Parameter with external storage. `grad_out` may be null (inference);
  // gradients accumulate into it across backward() calls and across graphs.
  Id param(const TensorT<S>* value, TensorT<S>* grad_out) {
    Node n;
    n.value = value;
    n.external_grad = grad_out;
    n.needs_grad = track_ && grad_out != nullptr;
    return push(std::move(n));
  }

  // --- elementwise --------------------------------------------------------

  Id add(Id a, Id b) {
    check_same(a, b, "add");
    TensorT<S> out = val(a);
    const auto& bv = val(b).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv[i];
    return unary_or_binary(std::move(out), a, b, [](Graph& g, Id self, Id a2, Id b2) {
      const auto& gv = g.grad(self).v;
      if (g.wants(a2)) {
        auto& da = g.acc(a2).v;
        for (size_t i = 0; i < gv.size(); ++i) da[i] += gv[i];
      }
      if (g.wants(b2)) {
        auto& db = g.acc(b2).v;
        for (size_t i = 0; i < gv.size(); ++i) db[i] += gv[i];
      }
    });
  }

  Id sub(Id a, Id b) {
    check_same(a, b, "sub");
    TensorT<S> out = val(a);
    const auto& bv = val(b).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= bv[i];
    return unary_or_binary(std::move(out), a, b, [](Graph& g, Id self, Id a2, Id b2) {
      const auto& gv = g.grad(self).v;
      if (g.wants(a2)) {
        auto& da = g.acc(a2).v;
        for (size_t i = 0; i < gv.size(); ++i) da[i] += gv[i];
      }
      if (g.wants(b2)) {
        auto& db = g.acc(b2).v;
        for (size_t i = 0; i < gv.size(); ++i) db[i] -= gv[i];
      }
    });
  }

  Id mul(Id a, Id b) {
    check_same(a, b, "mul");
    TensorT<S> out = val(a);
    const auto& bv = val(b).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv[i];
    return unary_or_binary(std::move(out), a, b, [](Graph& g, Id self, Id a2, Id b2) {
      const auto& gv = g.grad(self).v;
      const auto& av = g.val(a2).v;
      const auto& bv2 = g.val(b2).v;
      if (g.wants(a2)) {
        auto& da = g.acc(a2).v;
        for (size_t i = 0; i < gv.size(); ++i) da[i] += gv[i] * bv2[i];
      }
      if (g.wants(b2)) {
        auto& db = g.acc(b2).v;
        for (size_t i = 0; i < gv.size(); ++i) db[i] += gv[i] * av[i];
      }
    });
  }

  Id scale(Id a, S c) {
    TensorT<S> out = val(a);
    for (auto& x : out.v) x *= c;
    return unary(std::move(out), a, [c](Graph& g, Id self, Id a2) {
      const auto& gv = g.grad(self).v;
      auto& da = g.acc(a2).v;
      for (size_t i = 0; i < gv.size(); ++i) da[i] += gv[i] * c;
    });
  }

  Id add_scalar(Id a, S c) {
    TensorT<S> out = val(a);
    for (auto& x : out.v) x += c;
    return unary(std::move(out), a, [](Graph& g, Id self, Id a2) {
      const auto& gv = g.grad(self).v;
      auto& da = g.acc(a2).v;
      for (size_t i = 0; i < gv.size(); ++i) da[i] += gv[i];
    });
  }

  Id relu(Id a) {
    TensorT<S> out = val(a);
    for (auto& x : out.v) x = x > S(0) ? x : S(0);
    return unary(std::move(out), a, [](Graph& g, Id self, Id a2) {
      const auto& gv = g.grad(self).v;
      const auto& av = g.val(a2).v;
      auto& da = g.acc(a2).v;
      for (size_t i = 0; i < gv.size(); ++i) da[i] += av[i] > S(0) ? gv[i] : S(0);
    });
  }

  Id exp(Id a) {
    TensorT<S> out = val(a);
    for (auto& x : out.v) x = std::exp(x);
    return unary(std::move(out), a, [](Graph& g, Id self, Id a2) {
      const auto& gv = g.grad(self).v;
      const auto& yv = g.val(self).v;
      auto& da = g.acc(a2).v;
      for (size_t i = 0; i < gv.size(); ++i) da[i] += gv[i] * yv[i];
    });
  }

  Id log(Id a) {
    TensorT<S> out = val(a);
    for (auto& x : out.v) x = std::log(x);
    return unary(std::move(out), a, [](Graph& g, Id self, Id a2) {
      const auto& gv = g.grad(self).v;
      const auto& av = g.val(a2).v;
      auto& da = g.acc(a2).v;
      for (size_t i = 0; i < gv.size(); ++i) da[i] += gv[i] / av[i];
    });
  }

  Id sigmoid(Id a) {
    TensorT<S> out = val(a);
    for (auto& x : out.v) x = stable_sigmoid(x);
    return unary(std::move(out), a, [](Graph& g, Id self, Id a2) {
      const auto& gv = g.grad(self).v;
      const auto& yv = g.val(self).v;
      auto& da = g.acc(a2).v;
      for (size_t i = 0; i < gv.size(); ++i) da[i] += gv[i] * yv[i] * (S(1) - yv[i]);
    });
  }

  Id tanh(Id a) {
    TensorT<S> out = val(a);
    for (auto& x : out.v) x = std::tanh(x);
    return unary(std::move(out), a, [](Graph& g, Id self, Id a2) {
      const auto& gv = g.grad(self).v;
      const auto& yv = g.val(self).v;
      auto& da = g.acc(a2).v;
      for (size_t i = 0; i < gv.size(); ++i) da[i] += gv[i] * (S(1) - yv[i] * yv[i]);
    });
  }

  Id softplus(Id a) {
    TensorT<S> out = val(a);
    for (auto& x : out.v) x = stable_softplus(x);
    return unary(std::move(out), a, [](Graph& g, Id self, Id a2) {
      const auto& gv = g.grad(self).v;
      const auto& av = g.val(a2).v;
      auto& da = g.acc(a2).v;
      for (size_t i = 0; i < gv.size(); ++i) da[i] += gv[i] * stable_sigmoid(av[i]);
    });
  }

  Id square(Id a) {
    TensorT<S> out = val(a);
    for (auto& x : out.v) x = x * x;
    return unary(std::move(out), a, [](Graph& g, Id self, Id a2) {
      const auto& gv = g.grad(self).v;
      const auto& av = g.val(a2).v;
      auto& da = g.acc(a2).v;
      for (size_t i = 0; i < gv.size(); ++i) da[i] += gv[i] * S(2) * av[i];
    });
  }

  Id reciprocal(Id a) {
    TensorT<S> out = val(a);
    for (auto& x : out.v) x = S(1) / x;
    return unary(std::move(out), a, [](Graph& g, Id self, Id a2) {
      const auto& gv = g.grad(self).v;
      const auto& yv = g.val(self).v;
      auto& da = g.acc(a2).v;
      for (size_t i = 0; i < gv.size(); ++i) da[i] -= gv[i] * yv[i] * yv[i];
    });
  }

  // Standard normal CDF.
  Id ncdf(Id a) {
    TensorT<S> out = val(a);
    for (auto& x : out.v) x = S(0.5) * std::erfc(-x * S(0.7071067811865476));
    return unary(std::move(out), a, [](Graph& g, Id self, Id a2) {
      const auto& gv = g.grad(self).v;
      const auto& av = g.val(a2).v;
      auto& da = g.acc(a2).v;
      const S inv_sqrt2pi = S(0.3989422804014327);
      for (size_t i = 0; i < gv.size(); ++i)
        da[i] += gv[i] * inv_sqrt2pi * std::exp(S(-0.5) * av[i] * av[i]);
    });
  }

  // max(a, floor). Gradient passes when the input is above the floor, or when
  // the incoming gradient would push the value up; that keeps probability
  // floors from permanently killing learning signal.
  Id clamp_min(Id a, S floor) {
    TensorT<S> out = val(a);
    for (auto& x : out.v) x = x < floor ? floor : x;
    return unary(std::move(out), a, [floor](Graph& g, Id self, Id a2) {
      const auto& gv = g.grad(self).v;
      const auto& av = g.val(a2).v;
      auto& da = g.acc(a2).v;
      for (size_t i = 0; i < gv.size(); ++i)
        if (av[i] >= floor || gv[i] < S(0)) da[i] += gv[i];
    });
  }

  // Forward: round half to even. Backward: identity (straight-through).
  Id ste_round(Id a) {
    TensorT<S> out = val(a);
    for (auto& x : out.v) x = round_even(x);
    return unary(std::move(out), a, [](Graph& g, Id self, Id a2) {
      const auto& gv = g.grad(self).v;
      auto& da = g.acc(a2).v;
      for (size_t i = 0; i < gv.size(); ++i) da[i] += gv[i];
    });
  }

  Id stopgrad(Id a) { return constant(val(a)); }

  // --- matrix ops ---------------------------------------------------------

  // (m x k) @ (k x n) -> (m x n)
  Id matmul(Id a, Id b) {
    const auto& A = val(a);
    const auto& B = val(b);
    if (A.cols() != B.rows()) throw InvariantError("matmul: inner dim mismatch " + A.shape_str() + B.shape_str());
    int m = A.rows(), k = A.cols(), n = B.cols();
    TensorT<S> out = TensorT<S>::zeros2(m, n);
    gemm_nn(A.v.data(), B.v.data(), out.v.data(), m, k, n);
    return unary_or_binary(std::move(out), a, b, [](Graph& g, Id self, Id a2, Id b2) {
      const auto& G = g.grad(self);
      const auto& A2 = g.val(a2);
      const auto& B2 = g.val(b2);
      int m2 = A2.rows(), k2 = A2.cols(), n2 = B2.cols();
      if (g.wants(a2)) gemm_nt_acc(G.v.data(), B2.v.data(), g.acc(a2).v.data(), m2, n2, k2);
      if (g.wants(b2)) gemm_tn_acc(A2.v.data(), G.v.data(), g.acc(b2).v.data(), k2, m2, n2);
    });
  }

  // (m x k) @ (n x k)^T -> (m x n)
  Id matmul_nt(Id a, Id b) {
    const auto& A = val(a);
    const auto& B = val(b);
    if (A.cols() != B.cols()) throw InvariantError("matmul_nt: inner dim mismatch");
    int m = A.rows(), k = A.cols(), n = B.rows();
    TensorT<S> out = TensorT<S>::zeros2(m, n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        S s = 0;
        const S* ra = &A.v[size_t(i) * k];
        const S* rb = &B.v[size_t(j) * k];
        for (int t = 0; t < k; ++t) s += ra[t] * rb[t];
        out.at(i, j) = s;
      }
    return unary_or_binary(std::move(out), a, b, [](Graph& g, Id self, Id a2, Id b2) {
      const auto& G = g.grad(self);
      const auto& A2 = g.val(a2);
      const auto& B2 = g.val(b2);
      int m2 = A2.rows(), k2 = A2.cols(), n2 = B2.rows();
      // dA += G @ B ; dB += G^T @ A
      if (g.wants(a2)) gemm_nn_acc(G.v.data(), B2.v.data(), g.acc(a2).v.data(), m2, n2, k2);
      if (g.wants(b2)) gemm_tn_acc(G.v.data(), A2.v.data(), g.acc(b2).v.data(), n2, m2, k2);
    });
  }

  // a: (m x k), r: rank-1 [k] broadcast-added to every row.
  Id add_rowvec(Id a, Id r) {
    const auto& A = val(a);
    const auto& R = val(r);
    if (int(R.numel()) != A.cols()) throw InvariantError("add_rowvec: width mismatch");
    TensorT<S> out = A;
    int m = A.rows(), k = A.cols();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < k; ++j) out.at(i, j) += R.v[size_t(j)];
    return unary_or_binary(std::move(out), a, r, [](Graph& g, Id self, Id a2, Id r2) {
      const auto& G = g.grad(self);
      int m2 = G.rows(), k2 = G.cols();
      if (g.wants(a2)) {
        auto& da = g.acc(a2).v;
        for (size_t i = 0; i < G.v.size(); ++i) da[i] += G.v[i];
      }
      if (g.wants(r2)) {
        auto& dr = g.acc(r2).v;
        for (int i = 0; i < m2; ++i)
          for (int j = 0; j < k2; ++j) dr[size_t(j)] += G.at(i, j);
      }
    });
  }

  // a: (m x k), r: rank-1 [k] broadcast-multiplied into every row.
  Id mul_rowvec(Id a, Id r) {
    const auto& A = val(a);
    const auto& R = val(r);
    if (int(R.numel()) != A.cols()) throw InvariantError("mul_rowvec: width mismatch");
    TensorT<S> out = A;
    int m = A.rows(), k = A.cols();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < k; ++j) out.at(i, j) *= R.v[size_t(j)];
    return unary_or_binary(std::move(out), a, r, [](Graph& g, Id self, Id a2, Id r2) {
      const auto& G = g.grad(self);
      const auto& A2 = g.val(a2);
      const auto& R2 = g.val(r2);
      int m2 = G.rows(), k2 = G.cols();
      if (g.wants(a2)) {
        auto& da = g.acc(a2);
        for (int i = 0; i < m2; ++i)
          for (int j = 0; j < k2; ++j) da.at(i, j) += G.at(i, j) * R2.v[size_t(j)];
      }
      if (g.wants(r2)) {
        auto& dr = g.acc(r2).v;
        for (int i = 0; i < m2; ++i)
          for (int j = 0; j < k2; ++j) dr[size_t(j)] += G.at(i, j) * A2.at(i, j);
      }
    });
  }

  // a: (m x k), c: (m x 1) broadcast-multiplied into every column.
  Id mul_colvec(Id a, Id c) {
    const auto& A = val(a);
    const auto& C = val(c);
    if (int(C.numel()) != A.rows()) throw InvariantError("mul_colvec: height mismatch");
    TensorT<S> out = A;
    int m = A.rows(), k = A.cols();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < k; ++j) out.at(i, j) *= C.v[size_t(i)];
    return unary_or_binary(std::move(out), a, c, [](Graph& g, Id self, Id a2, Id c2) {
      const auto& G = g.grad(self);
      const auto& A2 = g.val(a2);
      const auto& C2 = g.val(c2);
      int m2 = G.rows(), k2 = G.cols();
      if (g.wants(a2)) {
        auto& da = g.acc(a2);
        for (int i = 0; i < m2; ++i)
          for (int j = 0; j < k2; ++j) da.at(i, j) += G.at(i, j) * C2.v[size_t(i)];
      }
      if (g.wants(c2)) {
        auto& dc = g.acc(c2).v;
        for (int i = 0; i < m2; ++i)
          for (int j = 0; j < k2; ++j) dc[size_t(i)] += G.at(i, j) * A2.at(i, j);
      }
    });
  }

  // Repeat a rank-1 [k] row m times -> (m x k).
  Id broadcast_rows(Id r, int m) {
    const auto& R = val(r);
    int k = int(R.numel());
    TensorT<S> out = TensorT<S>::zeros2(m, k);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < k; ++j) out.at(i, j) = R.v[size_t(j)];
    return unary(std::move(out), r, [](Graph& g, Id self, Id r2) {
      const auto& G = g.grad(self);
      auto& dr = g.acc(r2).v;
      for (int i = 0; i < G.rows(); ++i)
        for (int j = 0; j < G.cols(); ++j) dr[size_t(j)] += G.at(i, j);
    });
  }

  // --- shape ops ----------------------------------------------------------

  Id reshape2(Id a, int m, int k) {
    const auto& A = val(a);
    if (size_t(m) * size_t(k) != A.numel()) throw InvariantError("reshape2: numel mismatch");
    TensorT<S> out = TensorT<S>::zeros2(m, k);
    out.v = A.v;
    return unary(std::move(out), a, [](Graph& g, Id self, Id a2) {
      const auto& gv = g.grad(self).v;
      auto& da = g.acc(a2).v;
      for (size_t i = 0; i < gv.size(); ++i) da[i] += gv[i];
    });
  }

  Id reshape1(Id a) {
    const auto& A = val(a);
    TensorT<S> out = TensorT<S>::zeros1(int(A.numel()));
    out.v = A.v;
    return unary(std::move(out), a, [](Graph& g, Id self, Id a2) {
      const auto& gv = g.grad(self).v;
      auto& da = g.acc(a2).v;
      for (size_t i = 0; i < gv.size(); ++i) da[i] += gv[i];
    });
  }

  Id concat_cols(Id a, Id b) {
    const auto& A = val(a);
    const auto& B = val(b);
    if (A.rows() != B.rows()) throw InvariantError("concat_cols: row mismatch");
    int m = A.rows(), p = A.cols(), q = B.cols();
    TensorT<S> out = TensorT<S>::zeros2(m, p + q);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < p; ++j) out.at(i, j) = A.at(i, j);
      for (int j = 0; j < q; ++j) out.at(i, p + j) = B.at(i, j);
    }
    return unary_or_binary(std::move(out), a, b, [p, q](Graph& g, Id self, Id a2, Id b2) {
      const auto& G = g.grad(self);
      int m2 = G.rows();
      if (g.wants(a2)) {
        auto& da = g.acc(a2);
        for (int i = 0; i < m2; ++i)
          for (int j = 0; j < p; ++j) da.at(i, j) += G.at(i, j);
      }
      if (g.wants(b2)) {
        auto& db = g.acc(b2);
        for (int i = 0; i < m2; ++i)
          for (int j = 0; j < q; ++j) db.at(i, j) += G.at(i, p + j);
      }
    });
  }

  Id slice_cols(Id a, int c0, int len) {
    const auto& A = val(a);
    if (c0 < 0 || c0 + len > A.cols()) throw InvariantError("slice_cols: out of range");
    int m = A.rows();
    TensorT<S> out = TensorT<S>::zeros2(m, len);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < len; ++j) out.at(i, j) = A.at(i, c0 + j);
    return unary(std::move(out), a, [c0, len](Graph& g, Id self, Id a2) {
      const auto& G = g.grad(self);
      auto& da = g.acc(a2);
      for (int i = 0; i < G.rows(); ++i)
        for (int j = 0; j < len; ++j) da.at(i, c0 + j) += G.at(i, j);
    });
  }

  // Rows of `a` selected by `idx` (may repeat). Backward scatter-adds.
  Id gather_rows(Id a, std::vector<int> idx) {
    const auto& A = val(a);
    int k = A.cols();
    TensorT<S> out = TensorT<S>::zeros2(int(idx.size()), k);
    for (size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= A.rows()) throw InvariantError("gather_rows: index out of range");
      for (int j = 0; j < k; ++j) out.at(int(i), j) = A.at(idx[i], j);
    }
    auto idx_shared = std::make_shared<std::vector<int>>(std::move(idx));
    return unary(std::move(out), a, [idx_shared](Graph& g, Id self, Id a2) {
      const auto& G = g.grad(self);
      auto& da = g.acc(a2);
      for (size_t i = 0; i < idx_shared->size(); ++i)
        for (int j = 0; j < G.cols(); ++j) da.at((*idx_shared)[i], j) += G.at(int(i), j);
    });
  }

  // View (m x G*p) as (m, G, p) and repeat the p-wide group `times` times:
  // output (m x G*times*p), layout [g][t][p].
  Id repeat_group_cols(Id a, int group, int times) {
    const auto& A = val(a);
    if (A.cols() % group != 0) throw InvariantError("repeat_group_cols: group width");
    int m = A.rows(), G = A.cols() / group;
    TensorT<S> out = TensorT<S>::zeros2(m, G * times * group);
    for (int i = 0; i < m; ++i)
      for (int g2 = 0; g2 < G; ++g2)
        for (int t = 0; t < times; ++t)
          for (int p = 0; p < group; ++p)
            out.at(i, (g2 * times + t) * group + p) = A.at(i, g2 * group + p);
    return unary(std::move(out), a, [group, times](Graph& g, Id self, Id a2) {
      const auto& G2 = g.grad(self);
      auto& da = g.acc(a2);
      int m2 = da.rows(), ng = da.cols() / group;
      for (int i = 0; i < m2; ++i)
        for (int g3 = 0; g3 < ng; ++g3)
          for (int t = 0; t < times; ++t)
            for (int p = 0; p < group; ++p)
              da.at(i, g3 * group + p) += G2.at(i, (g3 * times + t) * group + p);
    });
  }

  // --- reductions ---------------------------------------------------------

  Id rowsum(Id a) {
    const auto& A = val(a);
    int m = A.rows(), k = A.cols();
    TensorT<S> out = TensorT<S>::zeros2(m, 1);
    for (int i = 0; i < m; ++i) {
      S s = 0;
      for (int j = 0; j < k; ++j) s += A.at(i, j);
      out.at(i, 0) = s;
    }
    return unary(std::move(out), a, [](Graph& g, Id self, Id a2) {
      const auto& G = g.grad(self);
      auto& da = g.acc(a2);
      for (int i = 0; i < da.rows(); ++i)
        for (int j = 0; j < da.cols(); ++j) da.at(i, j) += G.at(i, 0);
    });
  }

  Id rowmax(Id a) {
    const auto& A = val(a);
    int m = A.rows(), k = A.cols();
    TensorT<S> out = TensorT<S>::zeros2(m, 1);
    auto arg = std::make_shared<std::vector<int>>(size_t(m));
    for (int i = 0; i < m; ++i) {
      int best = 0;
      for (int j = 1; j < k; ++j)
        if (A.at(i, j) > A.at(i, best)) best = j;
      (*arg)[size_t(i)] = best;
      out.at(i, 0) = A.at(i, best);
    }
    return unary(std::move(out), a, [arg](Graph& g, Id self, Id a2) {
      const auto& G = g.grad(self);
      auto& da = g.acc(a2);
      for (int i = 0; i < da.rows(); ++i) da.at(i, (*arg)[size_t(i)]) += G.at(i, 0);
    });
  }

  // Max over groups of `group` consecutive rows (m % group == 0).
  Id group_rowmax(Id a, int group) {
    const auto& A = val(a);
    if (A.rows() % group != 0) throw InvariantError("group_rowmax: group size");
    int ng = A.rows() / group, k = A.cols();
    TensorT<S> out = TensorT<S>::zeros2(ng, k);
    auto arg = std::make_shared<std::vector<int>>(size_t(ng) * size_t(k));
    for (int gi = 0; gi < ng; ++gi)
      for (int j = 0; j < k; ++j) {
        int best = gi * group;
        for (int r = 1; r < group; ++r)
          if (A.at(gi * group + r, j) > A.at(best, j)) best = gi * group + r;
        (*arg)[size_t(gi) * k + j] = best;
        out.at(gi, j) = A.at(best, j);
      }
    return unary(std::move(out), a, [arg](Graph& g, Id self, Id a2) {
      const auto& G = g.grad(self);
      auto& da = g.acc(a2);
      for (int gi = 0; gi < G.rows(); ++gi)
        for (int j = 0; j < G.cols(); ++j)
          da.at((*arg)[size_t(gi) * G.cols() + j], j) += G.at(gi, j);
    });
  }

  Id sum_all(Id a) {
    const auto& A = val(a);
    TensorT<S> out = TensorT<S>::zeros2(1, 1);
    S s = 0;
    for (S x : A.v) s += x;
    out.v[0] = s;
    return unary(std::move(out), a, [](Graph& g, Id self, Id a2) {
      S gv = g.grad(self).v[0];
      auto& da = g.acc(a2).v;
      for (auto& x : da) x += gv;
    });
  }

  Id mean_all(Id a) {
    size_t n = val(a).numel();
    return scale(sum_all(a), S(1) / S(n));
  }

  // --- fused layers -------------------------------------------------------

  // Row-wise softmax with optional additive mask (same shape constant).
  Id softmax_rows(Id a, Id mask = -1) {
    Id inp = a;
    if (mask >= 0) inp = add(a, mask);
    const auto& A = val(inp);
    int m = A.rows(), k = A.cols();
    TensorT<S> out = TensorT<S>::zeros2(m, k);
    for (int i = 0; i < m; ++i) {
      S mx = -std::numeric_limits<S>::infinity();
      for (int j = 0; j < k; ++j) mx = std::max(mx, A.at(i, j));
      S z = 0;
      for (int j = 0; j < k; ++j) {
        S e = std::exp(A.at(i, j) - mx);
        out.at(i, j) = e;
        z += e;
      }
      for (int j = 0; j < k; ++j) out.at(i, j) /= z;
    }
    return unary(std::move(out), inp, [](Graph& g, Id self, Id a2) {
      const auto& G = g.grad(self);
      const auto& Y = g.val(self);
      auto& da = g.acc(a2);
      for (int i = 0; i < G.rows(); ++i) {
        S dot = 0;
        for (int j = 0; j < G.cols(); ++j) dot += G.at(i, j) * Y.at(i, j);
        for (int j = 0; j < G.cols(); ++j) da.at(i, j) += Y.at(i, j) * (G.at(i, j) - dot);
      }
    });
  }

  // Layer norm across channels (axis 1), learned gamma/beta (rank-1 [k]).
  Id layer_norm(Id x, Id gamma, Id beta, S eps = S(1e-5)) {
    const auto& X = val(x);
    const auto& Ga = val(gamma);
    const auto& Be = val(beta);
    int m = X.rows(), k = X.cols();
    if (int(Ga.numel()) != k || int(Be.numel()) != k) throw InvariantError("layer_norm: affine width");
    bool rec = track_ && (needs(x) || needs(gamma) || needs(beta));
    TensorT<S> out = TensorT<S>::zeros2(m, k);
    // xhat/istd are only needed for backward; skip them on inference graphs.
    auto xhat = rec ? std::make_shared<TensorT<S>>(TensorT<S>::zeros2(m, k)) : nullptr;
    auto istd = rec ? std::make_shared<std::vector<S>>(size_t(m)) : nullptr;
    for (int i = 0; i < m; ++i) {
      S mu = 0;
      for (int j = 0; j < k; ++j) mu += X.at(i, j);
      mu /= S(k);
      S var = 0;
      for (int j = 0; j < k; ++j) {
        S d = X.at(i, j) - mu;
        var += d * d;
      }
      var /= S(k);
      S is = S(1) / std::sqrt(var + eps);
      if (rec) (*istd)[size_t(i)] = is;
      for (int j = 0; j < k; ++j) {
        S xh = (X.at(i, j) - mu) * is;
        if (rec) xhat->at(i, j) = xh;
        out.at(i, j) = xh * Ga.v[size_t(j)] + Be.v[size_t(j)];
      }
    }
    Node n;
    n.owned_value = std::make_unique<TensorT<S>>(std::move(out));
    n.value = n.owned_value.get();
    n.needs_grad = rec;
    Id self = push(std::move(n));
    if (n_track(self)) {
      nodes_[size_t(self)].backward = [x, gamma, beta, xhat, istd](Graph& g, Id self2) {
        const auto& G = g.grad(self2);
        const auto& Ga2 = g.val(gamma);
        int m2 = G.rows(), k2 = G.cols();
        if (g.wants(gamma)) {
          auto& dg = g.acc(gamma).v;
          for (int i = 0; i < m2; ++i)
            for (int j = 0; j < k2; ++j) dg[size_t(j)] += G.at(i, j) * xhat->at(i, j);
        }
        if (g.wants(beta)) {
          auto& db = g.acc(beta).v;
          for (int i = 0; i < m2; ++i)
            for (int j = 0; j < k2; ++j) db[size_t(j)] += G.at(i, j);
        }
        if (g.wants(x)) {
          auto& dx = g.acc(x);
          for (int i = 0; i < m2; ++i) {
            S mean_dxhat = 0, mean_dxhat_xhat = 0;
            for (int j = 0; j < k2; ++j) {
              S dxh = G.at(i, j) * Ga2.v[size_t(j)];
              mean_dxhat += dxh;
              mean_dxhat_xhat += dxh * xhat->at(i, j);
            }
            mean_dxhat /= S(k2);
            mean_dxhat_xhat /= S(k2);
            for (int j = 0; j < k2; ++j) {
              S dxh = G.at(i, j) * Ga2.v[size_t(j)];
              dx.at(i, j) += (dxh - mean_dxhat - xhat->at(i, j) * mean_dxhat_xhat) * (*istd)[size_t(i)];
            }
          }
        }
      };
      nodes_[size_t(self)].parents = {x, gamma, beta};
    }
    return self;
  }

  // --- backward -----------------------------------------------------------

  void backward(Id root) {
    if (!track_) throw InvariantError("backward: tracking disabled");
    if (val(root).numel() != 1) throw InvariantError("backward: root must be scalar");
    acc(root).v[0] = S(1);
    for (Id id = root; id >= 0; --id) {
      Node& n = nodes_[size_t(id)];
      if (!n.needs_grad || !n.grad || !n.backward) continue;
      n.backward(*this, id);
    }
    // Flush parameter grads to their external accumulators.
    for (auto& n : nodes_) {
      if (n.external_grad && n.grad) {
        if (!n.external_grad->same_shape(*n.grad)) *n.external_grad = TensorT<S>::shaped(n.grad->rank, n.grad->dim[0], n.grad->dim[1], n.grad->dim[2]);
        for (size_t i = 0; i < n.grad->v.size(); ++i) n.external_grad->v[i] += n.grad->v[i];
      }
    }
  }

  // Throws if the node holds any non-finite value; used as a layer-boundary
  // guard so a NaN is reported where it appears, not three networks later.
  void check_finite(Id id, const char* label) const {
    if (!all_finite(val(id))) throw InvariantError(std::string("non-finite values after ") + label);
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::unique_ptr<TensorT<S>> owned_value;
    const TensorT<S>* value = nullptr;
    std::unique_ptr<TensorT<S>> grad;           // lazily allocated
    TensorT<S>* external_grad = nullptr;        // for parameters
    std::function<void(Graph&, Id)> backward;
    std::vector<Id> parents;
    bool needs_grad = false;
  };

  bool track_;
  std::vector<Node> nodes_;

  Id push(Node n) {
    nodes_.push_back(std::move(n));
    return Id(nodes_.size() - 1);
  }

  bool needs(Id id) const { return nodes_[size_t(id)].needs_grad; }
  bool n_track(Id id) const { return track_ && nodes_[size_t(id)].needs_grad; }

  bool wants(Id id) { return nodes_[size_t(id)].needs_grad; }

  // Gradient accumulator, allocated to the value's shape on first touch.
  TensorT<S>& acc(Id id) {
    Node& n = nodes_[size_t(id)];
    if (!n.grad) {
      const TensorT<S>& v = *n.value;
      n.grad = std::make_unique<TensorT<S>>(TensorT<S>::shaped(v.rank, v.dim[0], v.dim[1], v.dim[2]));
    }
    return *n.grad;
  }

  void check_same(Id a, Id b, const char* op) const {
    if (!val(a).same_shape(val(b)))
      throw InvariantError(std::string(op) + ": shape mismatch " + val(a).shape_str() + " vs " + val(b).shape_str());
  }

  template <typename F>
  Id unary(TensorT<S> out, Id a, F bw) {
    Node n;
    n.owned_value = std::make_unique<TensorT<S>>(std::move(out));
    n.value = n.owned_value.get();
    n.needs_grad = track_ && needs(a);
    Id self = push(std::move(n));
    if (nodes_[size_t(self)].needs_grad) {
      nodes_[size_t(self)].backward = [a, bw](Graph& g, Id self2) {
        if (g.wants(a)) bw(g, self2, a);
      };
      nodes_[size_t(self)].parents = {a};
    }
    return self;
  }

  template <typename F>
  Id unary_or_binary(TensorT<S> out, Id a, Id b, F bw) {
    Node n;
    n.owned_value = std::make_unique<TensorT<S>>(std::move(out));
    n.value = n.owned_value.get();
    n.needs_grad = track_ && (needs(a) || needs(b));
    Id self = push(std::move(n));
    if (nodes_[size_t(self)].needs_grad) {
      nodes_[size_t(self)].backward = [a, b, bw](Graph& g, Id self2) { bw(g, self2, a, b); };
      nodes_[size_t(self)].parents = {a, b};
    }
    return self;
  }

  static S stable_sigmoid(S x) {
    if (x >= S(0)) {
      S e = std::exp(-x);
      return S(1) / (S(1) + e);
    }
    S e = std::exp(x);
    return e / (S(1) + e);
  }

  static S stable_softplus(S x) {
    // log(1 + e^x), safe for large |x|.
    if (x > S(30)) return x;
    if (x < S(-30)) return std::exp(x);
    return std::log1p(std::exp(x));
  }

  // C += A(m x k) @ B(k x n); plain triple loop in ikj order so the inner
  // loop runs down contiguous rows and autovectorizes.
  static void gemm_nn(const S* A, const S* B, S* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i)
      for (int t = 0; t < k; ++t) {
        S a = A[size_t(i) * k + t];
        if (a == S(0)) continue;
        const S* rb = &B[size_t(t) * n];
        S* rc = &C[size_t(i) * n];
        for (int j = 0; j < n; ++j) rc[j] += a * rb[j];
      }
  }
  static void gemm_nn_acc(const S* A, const S* B, S* C, int m, int k, int n) { gemm_nn(A, B, C, m, k, n); }

  // C += A(m x n) @ B(k x n)^T, i.e. C[i][j] += dot(A row i, B row j).
  static void gemm_nt_acc(const S* A, const S* B, S* C, int m, int n, int k) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < k; ++j) {
        S s = 0;
        const S* ra = &A[size_t(i) * n];
        const S* rb = &B[size_t(j) * n];
        for (int t = 0; t < n; ++t) s += ra[t] * rb[t];
        C[size_t(i) * k + j] += s;
      }
  }

  // C += A(k x m)^T @ B(k x n) -> (m x n).
  static void gemm_tn_acc(const S* A, const S* B, S* C, int m, int k, int n) {
    for (int t = 0; t < k; ++t) {
      const S* ra = &A[size_t(t) * m];
      const S* rb = &B[size_t(t) * n];
      for (int i = 0; i < m; ++i) {
        S a = ra[i];
        if (a == S(0)) continue;
        S* rc = &C[size_t(i) * n];
        for (int j = 0; j < n; ++j) rc[j] += a * rb[j];
      }
    }
  }
};

}  // namespace lcm
