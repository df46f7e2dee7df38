#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "duo/tape.hpp"
#include "duo/tensor.hpp"

using duo::Rng;
using duo::Tape;
using duo::Tensor;

namespace {

Tensor<double> random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& x : t.data) x = rng.normal() * scale;
  return t;
}

// Independent naive triple-loop matmul used as the reference oracle.
Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor<double> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
      c.at(i, j) = acc;
    }
  return c;
}

double max_rel_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = std::abs(a.data[i] - b.data[i]) / (std::abs(b.data[i]) + 1e-12);
    worst = std::max(worst, d);
  }
  return worst;
}

}  // namespace

TEST_CASE("matmul identity and zero cases") {
  Tensor<double> eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  Rng rng(7);
  Tensor<double> x = random_tensor({3, 4}, rng);
  Tape<double> tape;
  auto a = tape.constant(eye);
  auto b = tape.constant(x);
  auto c = tape.matmul(a, b);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(tape.val(c).data[i] == doctest::Approx(x.data[i]));

  Tensor<double> m({2, 2}, {1, 2, 3, 4});
  Tensor<double> z({2, 2});
  Tape<double> t2;
  auto r = t2.matmul(t2.constant(m), t2.constant(z));
  for (auto v : t2.val(r).data) CHECK(v == 0.0);
}

TEST_CASE("matmul vs naive triple-loop oracle") {
  Rng rng(42);
  Tensor<double> a = random_tensor({4, 5}, rng);
  Tensor<double> b = random_tensor({5, 3}, rng);
  Tape<double> tape;
  auto c = tape.matmul(tape.constant(a), tape.constant(b));
  CHECK(max_rel_diff(tape.val(c), naive_matmul(a, b)) < 1e-6);
}

TEST_CASE("matmul shape mismatch") {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({4, 2}));
  CHECK_THROWS_AS((void)tape.matmul(a, b), duo::ShapeError);
}

TEST_CASE("matmul associativity on small random instances") {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor<double> a = random_tensor({3, 4}, rng);
    Tensor<double> b = random_tensor({4, 5}, rng);
    Tensor<double> c = random_tensor({5, 2}, rng);
    Tape<double> t;
    auto ab_c = t.matmul(t.matmul(t.constant(a), t.constant(b)), t.constant(c));
    auto a_bc = t.matmul(t.constant(a), t.matmul(t.constant(b), t.constant(c)));
    CHECK(max_rel_diff(t.val(ab_c), t.val(a_bc)) < 1e-4);
  }
}

TEST_CASE("softmax_rows examples") {
  Tape<double> tape;
  auto r1 = tape.softmax_rows(tape.constant(Tensor<double>({1, 4}, {3, 3, 3, 3})));
  for (auto v : tape.val(r1).data) CHECK(v == doctest::Approx(0.25));

  auto r2 = tape.softmax_rows(tape.constant(Tensor<double>({1, 2}, {1e4, -1e4})));
  CHECK(tape.val(r2).data[0] == doctest::Approx(1.0));
  CHECK(tape.val(r2).data[1] == doctest::Approx(0.0));
  CHECK(tape.val(r2).all_finite());

  // [2, 0] -> e^2/(e^2+1), evaluated independently
  const double e2 = std::exp(2.0);
  auto r3 = tape.softmax_rows(tape.constant(Tensor<double>({1, 2}, {2, 0})));
  CHECK(tape.val(r3).data[0] == doctest::Approx(e2 / (e2 + 1)).epsilon(1e-3));
  CHECK(tape.val(r3).data[1] == doctest::Approx(1 / (e2 + 1)).epsilon(1e-3));
}

TEST_CASE("softmax_rows property: rows sum to 1 and are nonnegative") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng.below(5), c = 1 + rng.below(8);
    Tensor<double> x = random_tensor({r, c}, rng, 10.0);
    Tape<double> tape;
    auto y = tape.softmax_rows(tape.constant(x));
    for (std::size_t i = 0; i < r; ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < c; ++j) {
        CHECK(tape.val(y).at(i, j) >= 0.0);
        sum += tape.val(y).at(i, j);
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("rms_norm examples") {
  Tape<double> tape;
  auto gain = tape.constant(Tensor<double>::full({4}, 1.0));
  auto ones = tape.rms_norm(tape.constant(Tensor<double>::full({1, 4}, 1.0)), gain, 0.0);
  for (auto v : tape.val(ones).data) CHECK(v == doctest::Approx(1.0));

  auto zeros = tape.rms_norm(tape.constant(Tensor<double>({1, 4})), gain, 1e-5);
  for (auto v : tape.val(zeros).data) CHECK(v == 0.0);

  Rng rng(5);
  Tensor<double> x = random_tensor({3, 8}, rng);
  Tensor<double> g = random_tensor({8}, rng);
  auto y = tape.rms_norm(tape.constant(x), tape.constant(g), 1e-5);
  // scalar-loop reference
  for (std::size_t i = 0; i < 3; ++i) {
    double ss = 0;
    for (std::size_t j = 0; j < 8; ++j) ss += x.at(i, j) * x.at(i, j);
    const double r = 1.0 / std::sqrt(ss / 8 + 1e-5);
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(tape.val(y).at(i, j) == doctest::Approx(x.at(i, j) * r * g.data[j]).epsilon(1e-6));
  }
}

namespace {
// swiglu as the composed graph used by the model
Tape<double>::Id swiglu_graph(Tape<double>& t, Tape<double>::Id x, Tape<double>::Id wg,
                              Tape<double>::Id wu, Tape<double>::Id wd) {
  return t.matmul(t.mul(t.silu(t.matmul(x, wg)), t.matmul(x, wu)), wd);
}
}  // namespace

TEST_CASE("swiglu_ffn examples") {
  Rng rng(9);
  Tensor<double> wg = random_tensor({4, 6}, rng), wu = random_tensor({4, 6}, rng),
                 wd = random_tensor({6, 4}, rng);
  {
    Tape<double> t;
    auto y = swiglu_graph(t, t.constant(Tensor<double>({2, 4})), t.constant(wg), t.constant(wu),
                          t.constant(wd));
    for (auto v : t.val(y).data) CHECK(v == 0.0);
  }
  {
    Tape<double> t;
    Tensor<double> x = random_tensor({2, 4}, rng);
    auto y = swiglu_graph(t, t.constant(x), t.constant(Tensor<double>({4, 6})),
                          t.constant(Tensor<double>({4, 6})), t.constant(Tensor<double>({6, 4})));
    for (auto v : t.val(y).data) CHECK(v == 0.0);
  }
  {
    Tape<double> t;
    Tensor<double> x = random_tensor({2, 4}, rng);
    auto y = swiglu_graph(t, t.constant(x), t.constant(wg), t.constant(wu), t.constant(wd));
    // scalar reference
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        double acc = 0;
        for (std::size_t f = 0; f < 6; ++f) {
          double a = 0, b = 0;
          for (std::size_t p = 0; p < 4; ++p) {
            a += x.at(i, p) * wg.at(p, f);
            b += x.at(i, p) * wu.at(p, f);
          }
          const double s = a / (1.0 + std::exp(-a));
          acc += s * b * wd.at(f, j);
        }
        CHECK(t.val(y).at(i, j) == doctest::Approx(acc).epsilon(1e-5));
      }
  }
}

TEST_CASE("cross_entropy examples") {
  Tape<double> tape;
  auto u = tape.cross_entropy(tape.constant(Tensor<double>::full({1, 7}, 0.3)), {4});
  CHECK(tape.val(u).data[0] == doctest::Approx(std::log(7.0)));

  Tensor<double> hot({1, 5});
  hot.at(0, 2) = 1000.0;
  auto h = tape.cross_entropy(tape.constant(hot), {2});
  CHECK(tape.val(h).data[0] == doctest::Approx(0.0).epsilon(1e-9));

  Rng rng(13);
  Tensor<double> logits = random_tensor({2, 5}, rng, 2.0);
  auto ce = tape.cross_entropy(tape.constant(logits), {1, 3});
  const int targets[2] = {1, 3};
  for (std::size_t i = 0; i < 2; ++i) {
    double denom = 0;
    for (std::size_t j = 0; j < 5; ++j) denom += std::exp(logits.at(i, j));
    const double want = -std::log(std::exp(logits.at(i, targets[i])) / denom);
    CHECK(std::abs(tape.val(ce).data[i] - want) < 1e-6);
  }

  CHECK_THROWS_AS((void)tape.cross_entropy(tape.constant(logits), {1, 9}), duo::ContractError);
}

TEST_CASE("backward trivial cases") {
  Rng rng(17);
  {
    Tape<double> tape;
    Tensor<double> x = random_tensor({3, 4}, rng);
    auto xi = tape.param(x);
    auto loss = tape.sum(xi);
    tape.backward(loss);
    for (auto g : tape.grad(xi).data) CHECK(g == 1.0);
  }
  {
    // parameter not on the path to the loss gets a zero gradient
    Tape<double> tape;
    Tensor<double> x = random_tensor({2, 2}, rng);
    Tensor<double> p = random_tensor({2, 2}, rng);
    auto xi = tape.param(x);
    auto pi = tape.param(p);
    auto loss = tape.sum(tape.mul(xi, xi));
    tape.backward(loss);
    for (auto g : tape.grad(pi).data) CHECK(g == 0.0);
  }
  {
    Tape<double> tape;
    auto xi = tape.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
    auto notscalar = tape.mul(xi, xi);
    CHECK_THROWS_AS(tape.backward(notscalar), duo::ContractError);
  }
}

namespace {

// FD-checks d(scalar_fn(x))/dx for a graph builder applied to leaf x.
double fd_error_for(const std::function<Tape<double>::Id(Tape<double>&, Tape<double>::Id)>& build,
                    const Tensor<double>& x0) {
  auto eval = [&](const Tensor<double>& x) {
    Tape<double> t;
    auto xi = t.param(x);
    return t.val(build(t, xi)).data[0];
  };
  Tape<double> t;
  auto xi = t.param(x0);
  auto loss = build(t, xi);
  t.backward(loss);
  return duo::finite_difference_check<double>(eval, x0, t.grad(xi));
}

}  // namespace

TEST_CASE("finite-difference verification of every kernel (64-bit)") {
  Rng rng(23);
  const Tensor<double> x = random_tensor({3, 6}, rng, 0.7);

  SUBCASE("silu") {
    CHECK(fd_error_for([](Tape<double>& t, Tape<double>::Id xi) { return t.mean(t.silu(xi)); }, x) < 1e-4);
  }
  SUBCASE("mul") {
    Tensor<double> other = random_tensor({3, 6}, rng);
    CHECK(fd_error_for([&](Tape<double>& t, Tape<double>::Id xi) {
            return t.mean(t.mul(xi, t.constant(other)));
          }, x) < 1e-4);
  }
  SUBCASE("matmul lhs and rhs") {
    Tensor<double> w = random_tensor({6, 4}, rng);
    CHECK(fd_error_for([&](Tape<double>& t, Tape<double>::Id xi) {
            return t.mean(t.matmul(xi, t.constant(w)));
          }, x) < 1e-4);
    Tensor<double> a = random_tensor({4, 3}, rng);
    CHECK(fd_error_for([&](Tape<double>& t, Tape<double>::Id xi) {
            return t.mean(t.matmul(t.constant(a), xi));
          }, x) < 1e-4);
  }
  SUBCASE("matmul_nt") {
    Tensor<double> w = random_tensor({5, 6}, rng);
    CHECK(fd_error_for([&](Tape<double>& t, Tape<double>::Id xi) {
            return t.mean(t.matmul_nt(xi, t.constant(w)));
          }, x) < 1e-4);
  }
  SUBCASE("softmax_rows") {
    Tensor<double> pick = random_tensor({3, 6}, rng);
    CHECK(fd_error_for([&](Tape<double>& t, Tape<double>::Id xi) {
            return t.mean(t.mul(t.softmax_rows(xi), t.constant(pick)));
          }, x) < 1e-4);
  }
  SUBCASE("rms_norm input and gain") {
    Tensor<double> g = random_tensor({6}, rng);
    CHECK(fd_error_for([&](Tape<double>& t, Tape<double>::Id xi) {
            return t.mean(t.rms_norm(xi, t.constant(g), 1e-5));
          }, x) < 1e-4);
    Tensor<double> g0 = random_tensor({6}, rng);
    CHECK(fd_error_for([&](Tape<double>& t, Tape<double>::Id gi) {
            return t.mean(t.rms_norm(t.constant(x), gi, 1e-5));
          }, g0) < 1e-4);
  }
  SUBCASE("cross_entropy") {
    Tensor<double> logits = random_tensor({3, 5}, rng, 1.5);
    CHECK(fd_error_for([&](Tape<double>& t, Tape<double>::Id xi) {
            return t.mean(t.cross_entropy(xi, {0, 2, 4}));
          }, logits) < 1e-4);
  }
  SUBCASE("rope_attention q, k, v") {
    Tensor<double> q0 = random_tensor({4, 8}, rng), k0 = random_tensor({4, 8}, rng),
                   v0 = random_tensor({4, 8}, rng);
    CHECK(fd_error_for([&](Tape<double>& t, Tape<double>::Id qi) {
            return t.mean(t.rope_attention(qi, t.constant(k0), t.constant(v0), 2, 10000.0));
          }, q0) < 1e-4);
    CHECK(fd_error_for([&](Tape<double>& t, Tape<double>::Id ki) {
            return t.mean(t.rope_attention(t.constant(q0), ki, t.constant(v0), 2, 10000.0));
          }, k0) < 1e-4);
    CHECK(fd_error_for([&](Tape<double>& t, Tape<double>::Id vi) {
            return t.mean(t.rope_attention(t.constant(q0), t.constant(k0), vi, 2, 10000.0));
          }, v0) < 1e-4);
  }
  SUBCASE("routed_ffn input and weights") {
    using duo::RouteChoice;
    const std::vector<RouteChoice> routes = {RouteChoice::Big, RouteChoice::Small, RouteChoice::Skip};
    Tensor<double> bg = random_tensor({6, 8}, rng), bu = random_tensor({6, 8}, rng),
                   bd = random_tensor({8, 6}, rng);
    Tensor<double> sg = random_tensor({6, 2}, rng), su = random_tensor({6, 2}, rng),
                   sd = random_tensor({2, 6}, rng);
    auto build_x = [&](Tape<double>& t, Tape<double>::Id xi) {
      return t.mean(t.routed_ffn(xi, t.constant(bg), t.constant(bu), t.constant(bd), t.constant(sg),
                                 t.constant(su), t.constant(sd), routes));
    };
    CHECK(fd_error_for(build_x, x) < 1e-4);
    auto build_bg = [&](Tape<double>& t, Tape<double>::Id wi) {
      return t.mean(t.routed_ffn(t.constant(x), wi, t.constant(bu), t.constant(bd), t.constant(sg),
                                 t.constant(su), t.constant(sd), routes));
    };
    CHECK(fd_error_for(build_bg, bg) < 1e-4);
    auto build_sd = [&](Tape<double>& t, Tape<double>::Id wi) {
      return t.mean(t.routed_ffn(t.constant(x), t.constant(bg), t.constant(bu), t.constant(bd),
                                 t.constant(sg), t.constant(su), wi, routes));
    };
    CHECK(fd_error_for(build_sd, sd) < 1e-4);
  }
  SUBCASE("mixture probs and branches") {
    Tensor<double> p0 = random_tensor({3, 2}, rng);
    Tensor<double> h0 = random_tensor({3, 6}, rng), h1 = random_tensor({3, 6}, rng);
    CHECK(fd_error_for([&](Tape<double>& t, Tape<double>::Id pi) {
            return t.mean(t.mixture(pi, {t.constant(h0), t.constant(h1)}));
          }, p0) < 1e-4);
    CHECK(fd_error_for([&](Tape<double>& t, Tape<double>::Id hi) {
            return t.mean(t.mixture(t.constant(p0), {hi, t.constant(h1)}));
          }, h0) < 1e-4);
  }
  SUBCASE("budget penalty") {
    Tensor<double> p0({3, 2}, {0.2, 0.8, 0.5, 0.5, 0.9, 0.1});
    CHECK(fd_error_for([&](Tape<double>& t, Tape<double>::Id pi) {
            return t.budget_penalty({pi, t.constant(p0)}, 1, 0.4);
          }, p0) < 1e-4);
  }
  SUBCASE("embed") {
    Tensor<double> table = random_tensor({5, 4}, rng);
    CHECK(fd_error_for([&](Tape<double>& t, Tape<double>::Id ti) {
            return t.mean(t.embed(ti, {0, 3, 3, 1}));
          }, table) < 1e-4);
  }
}

TEST_CASE("finite_difference_check harness examples") {
  Rng rng(31);
  Tensor<double> x = random_tensor({2, 3}, rng);
  // f(x) = sum(x^2), analytic gradient 2x; quadratics are exact under central differences
  Tensor<double> grad = x;
  for (auto& g : grad.data) g *= 2.0;
  auto f = [](const Tensor<double>& v) {
    double s = 0;
    for (auto e : v.data) s += e * e;
    return s;
  };
  CHECK(duo::finite_difference_check<double>(f, x, grad) < 1e-6);

  auto constant = [](const Tensor<double>&) { return 3.5; };
  CHECK(duo::finite_difference_check<double>(constant, x, Tensor<double>({2, 3})) == 0.0);
}

TEST_CASE("kernels are deterministic within a build") {
  Rng rng(19);
  Tensor<double> a = random_tensor({7, 9}, rng), b = random_tensor({9, 5}, rng);
  Tape<double> t1, t2;
  auto r1 = t1.matmul(t1.constant(a), t1.constant(b));
  auto r2 = t2.matmul(t2.constant(a), t2.constant(b));
  CHECK(t1.val(r1).data == t2.val(r2).data);

  Tape<double> t3, t4;
  auto s1 = t3.softmax_rows(t3.constant(a));
  auto s2 = t4.softmax_rows(t4.constant(a));
  CHECK(t3.val(s1).data == t4.val(s2).data);
}

TEST_CASE("tape rejects non-finite values") {
  Tape<double> t;
  Tensor<double> bad({1, 2}, {1.0, std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS((void)t.softmax_rows(t.constant(bad)), duo::NumericError);
}
