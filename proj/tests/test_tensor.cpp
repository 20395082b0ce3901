#include <cmath>
#include <vector>

#include "doctest.h"
#include "lcm/graph.hpp"
#include "lcm/layers.hpp"

using namespace lcm;

namespace {

TensorT<double> filled(int r, int c, std::initializer_list<double> vals) {
  TensorT<double> t = TensorT<double>::zeros2(r, c);
  size_t i = 0;
  for (double v : vals) t.v[i++] = v;
  REQUIRE(i == t.v.size());
  return t;
}

TensorT<double> rand2(Rng& rng, int r, int c, double scale = 0.5) {
  TensorT<double> t = TensorT<double>::zeros2(r, c);
  for (auto& x : t.v) x = rng.normal() * scale;
  return t;
}

TensorT<double> rand1(Rng& rng, int n, double scale = 0.5) {
  TensorT<double> t = TensorT<double>::zeros1(n);
  for (auto& x : t.v) x = rng.normal() * scale;
  return t;
}

void add_linear(WeightMap<double>& wm, Rng& rng, const std::string& prefix, int in, int out) {
  wm.tensors.emplace(prefix + ".w", rand2(rng, in, out, 1.0 / std::sqrt(double(in))));
  wm.tensors.emplace(prefix + ".b", rand1(rng, out, 0.1));
}

void add_mlp2(WeightMap<double>& wm, Rng& rng, const std::string& prefix, int in, int hidden, int out) {
  add_linear(wm, rng, prefix + ".l0", in, hidden);
  add_linear(wm, rng, prefix + ".l1", hidden, out);
}

void add_ln(WeightMap<double>& wm, Rng& rng, const std::string& prefix, int c) {
  TensorT<double> g = rand1(rng, c, 0.1);
  for (auto& x : g.v) x += 1.0;
  wm.tensors.emplace(prefix + ".g", g);
  wm.tensors.emplace(prefix + ".b", rand1(rng, c, 0.1));
}

void add_attention(WeightMap<double>& wm, Rng& rng, const std::string& prefix, int c) {
  for (const char* nm : {".q", ".k", ".v", ".o"}) add_linear(wm, rng, prefix + nm, c, c);
}

}  // namespace

TEST_CASE("tensor shape helpers") {
  Tensor t = Tensor::zeros2(3, 4);
  CHECK(t.rank == 2);
  CHECK(t.rows() == 3);
  CHECK(t.cols() == 4);
  CHECK(t.numel() == 12);
  t.at(2, 3) = 5.f;
  CHECK(t.v[11] == 5.f);
  CHECK(t.shape_str() == "(3,4)");

  Tensor r1 = Tensor::zeros1(7);
  CHECK(r1.rank == 1);
  CHECK(r1.cols() == 1);

  Tensor o = Tensor::zeros2(3, 4);
  CHECK(t.same_shape(o));
  CHECK(!t.same_shape(r1));

  TensorT<double> d = t.cast<double>();
  CHECK(d.at(2, 3) == 5.0);
  CHECK(all_finite(d));
  d.at1(0) = std::nan("");
  CHECK(!all_finite(d));
}

TEST_CASE("elementwise op values") {
  Graph<double> g(false);
  auto a = g.constant(filled(1, 4, {-1.0, 0.0, 0.5, 2.0}));
  auto b = g.constant(filled(1, 4, {3.0, -2.0, 0.5, 1.0}));

  CHECK(g.val(g.add(a, b)).v == std::vector<double>{2.0, -2.0, 1.0, 3.0});
  CHECK(g.val(g.sub(a, b)).v == std::vector<double>{-4.0, 2.0, 0.0, 1.0});
  CHECK(g.val(g.mul(a, b)).v == std::vector<double>{-3.0, 0.0, 0.25, 2.0});
  CHECK(g.val(g.scale(a, -2.0)).v == std::vector<double>{2.0, 0.0, -1.0, -4.0});
  CHECK(g.val(g.add_scalar(a, 1.5)).v == std::vector<double>{0.5, 1.5, 2.0, 3.5});
  CHECK(g.val(g.relu(a)).v == std::vector<double>{0.0, 0.0, 0.5, 2.0});
  CHECK(g.val(g.square(a)).v == std::vector<double>{1.0, 0.0, 0.25, 4.0});

  const auto& ex = g.val(g.exp(a)).v;
  for (int i = 0; i < 4; ++i) CHECK(ex[size_t(i)] == doctest::Approx(std::exp(g.val(a).v[size_t(i)])));
  const auto& sg = g.val(g.sigmoid(a)).v;
  for (int i = 0; i < 4; ++i) CHECK(sg[size_t(i)] == doctest::Approx(1.0 / (1.0 + std::exp(-g.val(a).v[size_t(i)]))));
  const auto& th = g.val(g.tanh(a)).v;
  for (int i = 0; i < 4; ++i) CHECK(th[size_t(i)] == doctest::Approx(std::tanh(g.val(a).v[size_t(i)])));
  const auto& sp = g.val(g.softplus(a)).v;
  for (int i = 0; i < 4; ++i) CHECK(sp[size_t(i)] == doctest::Approx(std::log1p(std::exp(g.val(a).v[size_t(i)]))));
  const auto& nc = g.val(g.ncdf(a)).v;
  for (int i = 0; i < 4; ++i)
    CHECK(nc[size_t(i)] == doctest::Approx(0.5 * std::erfc(-g.val(a).v[size_t(i)] / std::sqrt(2.0))));

  auto pos = g.constant(filled(1, 3, {0.25, 4.0, 2.0}));
  CHECK(g.val(g.log(pos)).v[0] == doctest::Approx(std::log(0.25)));
  CHECK(g.val(g.reciprocal(pos)).v == std::vector<double>{4.0, 0.25, 0.5});
  CHECK(g.val(g.clamp_min(a, 0.25)).v == std::vector<double>{0.25, 0.25, 0.5, 2.0});

  // ties round to even
  auto ties = g.constant(filled(1, 6, {0.5, 1.5, 2.5, -0.5, -1.5, 0.7}));
  CHECK(g.val(g.ste_round(ties)).v == std::vector<double>{0.0, 2.0, 2.0, 0.0, -2.0, 1.0});
}

TEST_CASE("matmul value oracles") {
  Graph<double> g(false);
  auto a = g.constant(filled(2, 3, {1, 2, 3, 4, 5, 6}));
  auto b = g.constant(filled(3, 2, {7, 8, 9, 10, 11, 12}));
  CHECK(g.val(g.matmul(a, b)).v == std::vector<double>{58, 64, 139, 154});

  // matmul_nt(a, c) == matmul(a, c^T)
  auto c = g.constant(filled(2, 3, {7, 9, 11, 8, 10, 12}));
  CHECK(g.val(g.matmul_nt(a, c)).v == std::vector<double>{58, 64, 139, 154});

  auto bad = g.constant(filled(2, 2, {1, 2, 3, 4}));
  CHECK_THROWS_AS((void)g.matmul(a, bad), InvariantError);
}

TEST_CASE("broadcast and shape op values") {
  Graph<double> g(false);
  auto a = g.constant(filled(2, 3, {1, 2, 3, 4, 5, 6}));
  auto r = g.constant([] {
    TensorT<double> t = TensorT<double>::zeros1(3);
    t.v = {10, 20, 30};
    return t;
  }());
  auto col = g.constant(filled(2, 1, {2, -1}));

  CHECK(g.val(g.add_rowvec(a, r)).v == std::vector<double>{11, 22, 33, 14, 25, 36});
  CHECK(g.val(g.mul_rowvec(a, r)).v == std::vector<double>{10, 40, 90, 40, 100, 180});
  CHECK(g.val(g.mul_colvec(a, col)).v == std::vector<double>{2, 4, 6, -4, -5, -6});
  CHECK(g.val(g.broadcast_rows(r, 2)).v == std::vector<double>{10, 20, 30, 10, 20, 30});

  CHECK(g.val(g.reshape2(a, 3, 2)).rows() == 3);
  CHECK(g.val(g.reshape2(a, 3, 2)).v == g.val(a).v);
  CHECK(g.val(g.reshape1(a)).rank == 1);
  CHECK(g.val(g.concat_cols(a, col)).v == std::vector<double>{1, 2, 3, 2, 4, 5, 6, -1});
  CHECK(g.val(g.slice_cols(a, 1, 2)).v == std::vector<double>{2, 3, 5, 6});
  CHECK(g.val(g.gather_rows(a, {1, 0, 1})).v == std::vector<double>{4, 5, 6, 1, 2, 3, 4, 5, 6});
  CHECK_THROWS_AS((void)g.gather_rows(a, {2}), InvariantError);

  // (1 x 2*2) viewed as two groups of 2, each repeated twice
  auto grp = g.constant(filled(1, 4, {1, 2, 3, 4}));
  CHECK(g.val(g.repeat_group_cols(grp, 2, 2)).v == std::vector<double>{1, 2, 1, 2, 3, 4, 3, 4});
}

TEST_CASE("reduction values") {
  Graph<double> g(false);
  auto a = g.constant(filled(2, 3, {1, -2, 3, 4, 9, 6}));
  CHECK(g.val(g.rowsum(a)).v == std::vector<double>{2, 19});
  CHECK(g.val(g.rowmax(a)).v == std::vector<double>{3, 9});
  CHECK(g.val(g.sum_all(a)).v[0] == 21.0);
  CHECK(g.val(g.mean_all(a)).v[0] == doctest::Approx(3.5));

  auto b = g.constant(filled(4, 2, {1, 8, 3, 2, 5, 0, 2, 9}));
  CHECK(g.val(g.group_rowmax(b, 2)).v == std::vector<double>{3, 8, 5, 9});
}

TEST_CASE("softmax rows with mask") {
  Graph<double> g(false);
  auto a = g.constant(filled(1, 3, {0.0, std::log(2.0), std::log(3.0)}));
  const auto& p = g.val(g.softmax_rows(a)).v;
  CHECK(p[0] == doctest::Approx(1.0 / 6.0));
  CHECK(p[1] == doctest::Approx(2.0 / 6.0));
  CHECK(p[2] == doctest::Approx(3.0 / 6.0));

  auto mask = g.constant(filled(1, 3, {0.0, -1e30, 0.0}));
  const auto& pm = g.val(g.softmax_rows(a, mask)).v;
  CHECK(pm[1] == doctest::Approx(0.0));
  CHECK(pm[0] + pm[2] == doctest::Approx(1.0));
  CHECK(pm[2] == doctest::Approx(0.75));
}

TEST_CASE("layer_norm normalizes per row") {
  Graph<double> g(false);
  Rng rng(11);
  auto x = g.constant(rand2(rng, 4, 8, 2.0));
  auto gamma = g.constant([] {
    TensorT<double> t = TensorT<double>::zeros1(8);
    for (auto& v : t.v) v = 1.0;
    return t;
  }());
  auto beta = g.constant(TensorT<double>::zeros1(8));
  const auto& y = g.val(g.layer_norm(x, gamma, beta));
  for (int i = 0; i < 4; ++i) {
    double mu = 0, var = 0;
    for (int j = 0; j < 8; ++j) mu += y.at(i, j);
    mu /= 8;
    for (int j = 0; j < 8; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
    var /= 8;
    CHECK(mu == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // 1e-5 eps in the norm
  }
}

TEST_CASE("straight-through round and clamp gradient gates") {
  // ste_round: forward rounds, backward passes gradient unchanged.
  {
    WeightMap<double> wm;
    wm.training = true;
    wm.tensors.emplace("x", filled(1, 1, {0.7}));
    Graph<double> g(true);
    auto x = wparam(g, wm, "x");
    auto loss = g.sum_all(g.square(g.ste_round(x)));
    g.backward(loss);
    CHECK(g.val(loss).v[0] == 1.0);
    CHECK(wm.grads.at("x").v[0] == 2.0);  // d(round(x)^2)/dround * 1
  }
  // clamp_min blocks push-down gradients below the floor but passes push-up.
  {
    WeightMap<double> wm;
    wm.training = true;
    wm.tensors.emplace("x", filled(1, 1, {-1.0}));
    Graph<double> g(true);
    auto x = wparam(g, wm, "x");
    g.backward(g.sum_all(g.clamp_min(x, 0.0)));
    CHECK(wm.grads.at("x").v[0] == 0.0);  // upstream +1 would push further down
    Graph<double> g2(true);
    auto x2 = wparam(g2, wm, "x");
    g2.backward(g2.sum_all(g2.scale(g2.clamp_min(x2, 0.0), -1.0)));
    CHECK(wm.grads.at("x").v[0] == -1.0);  // upstream -1 pulls x up: passes
  }
}

TEST_CASE("backward preconditions and accumulation") {
  Graph<double> g(true);
  auto a = g.constant(filled(1, 2, {1, 2}));
  CHECK_THROWS_AS(g.backward(a), InvariantError);  // non-scalar root

  Graph<double> off(false);
  auto b = off.constant(filled(1, 1, {1}));
  CHECK_THROWS_AS(off.backward(b), InvariantError);  // tracking disabled

  // Gradients accumulate across backward() calls on separate graphs.
  WeightMap<double> wm;
  wm.training = true;
  wm.tensors.emplace("x", filled(1, 1, {3.0}));
  for (int rep = 0; rep < 2; ++rep) {
    Graph<double> gg(true);
    auto x = wparam(gg, wm, "x");
    gg.backward(gg.sum_all(gg.square(x)));
  }
  CHECK(wm.grads.at("x").v[0] == 12.0);  // 2 * (2 * 3)
}

TEST_CASE("reverse-mode gradients match finite differences across core ops") {
  WeightMap<double> wm;
  Rng rng(42);
  wm.tensors.emplace("a", rand2(rng, 3, 4));
  wm.tensors.emplace("b", rand2(rng, 4, 3));
  wm.tensors.emplace("r", rand1(rng, 3));
  wm.tensors.emplace("c", rand2(rng, 3, 1));
  auto build = [](Graph<double>& g, WeightMap<double>& w) {
    auto a = wparam(g, w, "a");
    auto b = wparam(g, w, "b");
    auto r = wparam(g, w, "r");
    auto c = wparam(g, w, "c");
    auto m = g.matmul(a, b);                       // 3x3
    auto s = g.softmax_rows(g.tanh(m));            // 3x3
    auto t = g.add_rowvec(g.mul_colvec(s, c), r);  // 3x3
    auto u = g.concat_cols(g.slice_cols(t, 0, 2), g.gather_rows(t, {2, 0, 1}));
    auto w2 = g.mul(u, g.sigmoid(u));
    auto nt = g.matmul_nt(w2, w2);  // 3x3
    auto e = g.exp(g.scale(nt, 0.1));
    auto lg = g.log(g.add_scalar(g.square(e), 1.0));
    return g.sum_all(g.add(g.rowsum(lg), g.rowmax(lg)));
  };
  GradCheckReport rep = grad_check(wm, build, 12, 1e-5, 3);
  CAPTURE(rep.worst);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("linear and mlp2 gradients") {
  WeightMap<double> wm;
  Rng rng(7);
  add_linear(wm, rng, "lin", 5, 3);
  add_mlp2(wm, rng, "mlp", 5, 8, 4);
  wm.tensors.emplace("x", rand2(rng, 6, 5));
  auto build = [](Graph<double>& g, WeightMap<double>& w) {
    auto x = wparam(g, w, "x");
    auto y = linear(g, x, w, "lin");
    auto z = mlp2(g, x, w, "mlp");
    return g.sum_all(g.add(g.square(g.rowsum(y)), g.square(g.rowsum(z))));
  };
  GradCheckReport rep = grad_check(wm, build, 12, 1e-5, 5);
  CAPTURE(rep.worst);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("layer_norm gradients") {
  WeightMap<double> wm;
  Rng rng(13);
  add_ln(wm, rng, "ln", 6);
  wm.tensors.emplace("x", rand2(rng, 4, 6, 1.5));
  auto build = [](Graph<double>& g, WeightMap<double>& w) {
    auto x = wparam(g, w, "x");
    auto y = layer_norm_w(g, x, w, "ln");
    return g.sum_all(g.square(y));
  };
  GradCheckReport rep = grad_check(wm, build, 12, 1e-5, 5);
  CAPTURE(rep.worst);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("attention core and block gradients") {
  const int n = 5, C = 8;
  WeightMap<double> wm;
  Rng rng(23);
  add_attention(wm, rng, "attn", C);
  wm.tensors.emplace("x", rand2(rng, n, C));
  wm.tensors.emplace("pe", rand2(rng, n, C));
  {
    auto build = [](Graph<double>& g, WeightMap<double>& w) {
      auto x = wparam(g, w, "x");
      auto pe = wparam(g, w, "pe");
      auto y = attention_core(g, x, pe, w, "attn", 2);
      return g.sum_all(g.square(y));
    };
    GradCheckReport rep = grad_check(wm, build, 10, 1e-5, 9);
    CAPTURE(rep.worst);
    CHECK(rep.max_rel_err < 1e-4);
  }
  // masked attention: row i attends only to even rows
  {
    auto build = [n](Graph<double>& g, WeightMap<double>& w) {
      auto x = wparam(g, w, "x");
      auto pe = wparam(g, w, "pe");
      TensorT<double> m = TensorT<double>::zeros2(n, n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) m.at(i, j) = (j % 2 == 0) ? 0.0 : -1e30;
      auto y = attention_core(g, x, pe, w, "attn", 2, g.constant(m));
      return g.sum_all(g.square(y));
    };
    GradCheckReport rep = grad_check(wm, build, 10, 1e-5, 11);
    CAPTURE(rep.worst);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("attention block gradients, both backbones") {
  const int n = 4, C = 8;
  for (bool attn : {true, false}) {
    CAPTURE(attn);
    WeightMap<double> wm;
    Rng rng(31);
    add_ln(wm, rng, "blk.ln1", C);
    add_ln(wm, rng, "blk.ln2", C);
    add_attention(wm, rng, "blk.attn", C);
    add_mlp2(wm, rng, "blk.mix", C, 2 * C, C);
    add_mlp2(wm, rng, "blk.ffn", C, 2 * C, C);
    wm.tensors.emplace("x", rand2(rng, n, C));
    wm.tensors.emplace("pe", rand2(rng, n, C));
    auto build = [attn](Graph<double>& g, WeightMap<double>& w) {
      auto x = wparam(g, w, "x");
      auto pe = wparam(g, w, "pe");
      auto y = attention_block(g, x, pe, w, "blk", 2, attn);
      return g.sum_all(g.square(y));
    };
    GradCheckReport rep = grad_check(wm, build, 8, 1e-5, 17);
    CAPTURE(rep.worst);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("positional encoding gradients") {
  const int n = 6;
  WeightMap<double> wm;
  Rng rng(41);
  add_linear(wm, rng, "pe.edge0", 6, 8);
  add_linear(wm, rng, "pe.edge1", 16, 8);
  add_linear(wm, rng, "pe.edge2", 16, 8);
  add_linear(wm, rng, "pe.proj", 16, 5);
  add_mlp2(wm, rng, "pe.pos", 3, 8, 5);
  wm.tensors.emplace("x", rand2(rng, n, 3, 1.0));
  for (bool dgcnn : {true, false}) {
    CAPTURE(dgcnn);
    auto build = [dgcnn](Graph<double>& g, WeightMap<double>& w) {
      auto x = wparam(g, w, "x");
      auto y = dgcnn ? dgcnn_positional_encoding(g, x, w, "pe", 3) : mlp_positional_encoding(g, x, w, "pe");
      return g.sum_all(g.square(y));
    };
    GradCheckReport rep = grad_check(wm, build, 8, 1e-6, 19);
    CAPTURE(rep.worst);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("knn oracle") {
  // 1-D features on a line; squared distances are unambiguous
  {
    std::vector<float> f = {0.f, 1.f, 2.5f, 2.6f};
    std::vector<int> nb = knn_feature_space(f.data(), 4, 1, 2);
    CHECK(nb == std::vector<int>{1, 2, 0, 2, 3, 1, 2, 1});
  }
  // ties break toward the smaller index
  {
    std::vector<float> f = {0.f, 2.f, -2.f};
    std::vector<int> nb = knn_feature_space(f.data(), 3, 1, 2);
    CHECK(nb[0] == 1);
    CHECK(nb[1] == 2);
  }
  // single point keeps a self edge; k clamps to n - 1
  {
    std::vector<float> f = {1.f, 2.f};
    CHECK(knn_feature_space(f.data(), 1, 2, 4) == std::vector<int>{0});
    std::vector<float> f3 = {0.f, 1.f, 5.f};
    std::vector<int> nb = knn_feature_space(f3.data(), 3, 1, 10);
    CHECK(nb.size() == 6);  // keff == 2
  }
  CHECK_THROWS_AS(knn_feature_space(nullptr, 0, 1, 1), InvariantError);
}

TEST_CASE("weight map access") {
  WeightMap<float> wm;
  wm.tensors.emplace("a", Tensor::zeros2(2, 2));
  CHECK_THROWS_AS((void)wm.get("missing"), InvariantError);
  Tensor& gr = wm.grad_slot("a");
  CHECK(gr.same_shape(wm.tensors.at("a")));
  gr.v[0] = 1.f;
  wm.zero_grads();
  CHECK(wm.grads.at("a").v[0] == 0.f);

  WeightMap<double> cast = wm.cast<double>();
  CHECK(cast.tensors.count("a") == 1);
}

TEST_CASE("parallel_for covers every index exactly once") {
  std::vector<int> hits(257, 0);
  parallel_for(hits.size(), 3, [&](size_t i) { hits[i] += 1; });
  for (int h : hits) CHECK(h == 1);
  parallel_for(0, 4, [&](size_t) { CHECK(false); });
}
