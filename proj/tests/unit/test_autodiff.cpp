#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "aq/autodiff.hpp"
#include "aq/error.hpp"
#include "aq/rng.hpp"
#include "common/oracles.hpp"

using namespace aq;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(shape_product(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("elementwise forward matches scalar math") {
  Graph g;
  Tensor a = g.input("a", {2, 2}, {1.0, -2.0, 3.0, 0.5});
  Tensor b = g.input("b", {2, 2}, {4.0, 5.0, -6.0, 2.0});
  CHECK(add(a, b).value() == std::vector<double>{5.0, 3.0, -3.0, 2.5});
  CHECK(sub(a, b).value() == std::vector<double>{-3.0, -7.0, 9.0, -1.5});
  CHECK(mul(a, b).value() == std::vector<double>{4.0, -10.0, -18.0, 1.0});
  CHECK(div(a, b).value() == std::vector<double>{0.25, -0.4, -0.5, 0.25});
  CHECK(scale(a, 2.0).value() == std::vector<double>{2.0, -4.0, 6.0, 1.0});
  CHECK(add_scalar(a, 1.0).value() == std::vector<double>{2.0, -1.0, 4.0, 1.5});
  CHECK(relu(a).value() == std::vector<double>{1.0, 0.0, 3.0, 0.5});
  CHECK(gtz(a).value() == std::vector<double>{1.0, 0.0, 1.0, 1.0});
  CHECK(square(a).value() == std::vector<double>{1.0, 4.0, 9.0, 0.25});
}

TEST_CASE("matmul matches oracle for all transpose flags") {
  Rng rng(11);
  const std::size_t m = 3, k = 4, n = 2;
  Tensor a = random_tensor(rng, {m, k});
  Tensor at = Tensor({k, m}, oracle::transpose(a.value(), m, k));
  Tensor b = random_tensor(rng, {k, n});
  Tensor bt = Tensor({n, k}, oracle::transpose(b.value(), k, n));
  const std::vector<double> want = oracle::matmul(a.value(), m, k, b.value(), n);

  Graph g;
  Tensor ga = g.input("a", a), gat = g.input("at", at);
  Tensor gb = g.input("b", b), gbt = g.input("bt", bt);
  auto close = [&](const Tensor& t) {
    REQUIRE(t.shape() == Shape{m, n});
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(t.value()[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
  };
  close(matmul(ga, gb));
  close(matmul(ga, gbt, false, true));
  close(matmul(gat, gb, true, false));
  close(matmul(gat, gbt, true, true));
}

TEST_CASE("rank-1 matmul convenience squeezes shapes") {
  Graph g;
  Tensor v = g.input("v", {3}, {1.0, 2.0, 3.0});
  Tensor m = g.input("m", {3, 2}, {1.0, 0.0, 0.0, 1.0, 1.0, 1.0});
  Tensor r = matmul(v, m);
  CHECK(r.shape() == Shape{2});
  CHECK(r.value() == std::vector<double>{4.0, 5.0});
  Tensor w = g.input("w", {2}, {10.0, 1.0});
  Tensor d = matmul(r, w);
  CHECK(d.shape() == Shape{});
  CHECK(d.item() == doctest::Approx(45.0));
}

TEST_CASE("reductions, argmax one-hot and tie-breaking") {
  Graph g;
  Tensor a = g.input("a", {2, 3}, {1.0, 5.0, 5.0, -1.0, -2.0, -3.0});
  CHECK(sum_all(a).item() == doctest::Approx(5.0));
  Tensor s1 = sum_axis(a, 1);
  CHECK(s1.shape() == Shape{2, 1});
  CHECK(s1.value() == std::vector<double>{11.0, -6.0});
  Tensor m1 = max_axis(a, 1);
  CHECK(m1.value() == std::vector<double>{5.0, -1.0});
  // Tie on the first row: the one-hot must pick the lowest index.
  Tensor oh = onehot_argmax(a, 1);
  CHECK(oh.value() == std::vector<double>{0.0, 1.0, 0.0, 1.0, 0.0, 0.0});
  Tensor m0 = max_axis(a, 0);
  CHECK(m0.shape() == Shape{1, 3});
  CHECK(m0.value() == std::vector<double>{1.0, 5.0, 5.0});
  CHECK(argmax_rows(a) == std::vector<int>{1, 0});
}

TEST_CASE("broadcast and sum_to are shape inverses") {
  Graph g;
  Tensor row = g.input("r", {1, 3}, {1.0, 2.0, 3.0});
  Tensor b = broadcast(row, {2, 3});
  CHECK(b.value() == std::vector<double>{1.0, 2.0, 3.0, 1.0, 2.0, 3.0});
  Tensor back = sum_to(b, {1, 3});
  CHECK(back.value() == std::vector<double>{2.0, 4.0, 6.0});
  Tensor s = g.input("s", {}, {7.0});
  Tensor bs = broadcast(s, {2, 2});
  CHECK(bs.value() == std::vector<double>(4, 7.0));
  CHECK(sum_to(bs, Shape{}).item() == doctest::Approx(28.0));
  // Missing-leading-axis expansion: [3] -> [2,3].
  Tensor v = g.input("v", {3}, {1.0, 2.0, 3.0});
  CHECK(broadcast(v, {2, 3}).value() ==
        std::vector<double>{1.0, 2.0, 3.0, 1.0, 2.0, 3.0});
}

TEST_CASE("slice, pad and concat round-trip") {
  Graph g;
  Tensor a = g.input("a", {2, 4}, {0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0});
  Tensor s = slice(a, 1, 1, 2);
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s.value() == std::vector<double>{1.0, 2.0, 5.0, 6.0});
  Tensor p = pad(s, 1, 1, 1);
  CHECK(p.shape() == Shape{2, 4});
  CHECK(p.value() == std::vector<double>{0.0, 1.0, 2.0, 0.0, 0.0, 5.0, 6.0, 0.0});
  Tensor left = slice(a, 1, 0, 1);
  Tensor right = slice(a, 1, 1, 3);
  std::vector<Tensor> parts = {left, right};
  Tensor c = concat(parts, 1);
  CHECK(c.shape() == a.shape());
  CHECK(c.value() == a.value());
  Tensor rows = concat(std::vector<Tensor>{slice(a, 0, 1, 1), slice(a, 0, 0, 1)}, 0);
  CHECK(rows.value() == std::vector<double>{4.0, 5.0, 6.0, 7.0, 0.0, 1.0, 2.0, 3.0});
}

TEST_CASE("solve_spd matches a general-purpose solver") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(5), m = 1 + rng.below(3);
    // Build an SPD matrix as M^T M + I.
    Tensor mt = random_tensor(rng, {n, n});
    std::vector<double> spd = oracle::matmul(
        oracle::transpose(mt.value(), n, n), n, n, mt.value(), n);
    for (std::size_t i = 0; i < n; ++i) spd[i * n + i] += 1.0;
    Tensor b = random_tensor(rng, {n, m});
    const std::vector<double> want =
        oracle::gauss_jordan_solve(spd, n, b.value(), m);
    Graph g;
    Tensor x = solve_spd(g.input("a", {n, n}, spd), g.input("b", b));
    REQUIRE(x.shape() == Shape{n, m});
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(x.value()[i] == doctest::Approx(want[i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("solve_spd rejects singular systems") {
  Graph g;
  Tensor a = g.input("a", {2, 2}, {1.0, 1.0, 1.0, 1.0});  // rank 1
  Tensor b = g.input("b", {2, 1}, {1.0, 2.0});
  CHECK_THROWS_AS(solve_spd(a, b), NumericError);
  CHECK_THROWS_WITH_AS(solve_spd(a, b), doctest::Contains("singular"),
                       NumericError);
}

TEST_CASE("softmax composite matches oracle") {
  Rng rng(23);
  Tensor logits = random_tensor(rng, {3, 5}, -4.0, 4.0);
  Graph g;
  Tensor p = softmax(g.input("z", logits), 1);
  const std::vector<double> z = logits.value();
  const std::vector<double> pv = p.value();
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> row(z.begin() + r * 5, z.begin() + (r + 1) * 5);
    const std::vector<double> want = oracle::softmax(row);
    double total = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK(pv[r * 5 + c] == doctest::Approx(want[c]).epsilon(1e-12));
      total += pv[r * 5 + c];
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("gradients of every differentiable primitive pass FD checks") {
  Rng rng(31);
  const double tol = 1e-5;
  auto sweep = [&](const char* what, int points,
                   const std::function<Tensor(Graph&, const std::vector<Tensor>&)>& fn,
                   const std::vector<Shape>& shapes, double lo, double hi) {
    for (int t = 0; t < points; ++t) {
      std::vector<Tensor> pts;
      for (const Shape& s : shapes) pts.push_back(random_tensor(rng, s, lo, hi));
      GradReport rep = check_grad(fn, pts, tol);
      INFO(what << " trial " << t << " max_rel=" << rep.max_rel_error);
      CHECK(rep.pass);
    }
  };

  // Binary elementwise ops folded through a sum to a scalar.
  sweep("add", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(add(p[0], p[1])); }, {{2, 3}, {2, 3}}, -2, 2);
  sweep("sub*mul", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(mul(sub(p[0], p[1]), p[0])); }, {{2, 3}, {2, 3}}, -2, 2);
  sweep("div", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(div(p[0], p[1])); }, {{2, 3}, {2, 3}}, 1.0, 3.0);
  sweep("scale+add_scalar", 3, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(add_scalar(scale(p[0], -1.7), 0.3)); }, {{4}}, -2, 2);
  sweep("matmul", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(square(matmul(p[0], p[1]))); }, {{3, 4}, {4, 2}}, -1, 1);
  sweep("matmul_tt", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(square(matmul(p[0], p[1], true, true))); },
        {{4, 3}, {2, 4}}, -1, 1);
  sweep("relu", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(relu(p[0])); }, {{3, 3}}, 0.5, 2.0);
  sweep("exp", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(exp(p[0])); }, {{2, 2}}, -1, 1);
  sweep("log", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(log(p[0])); }, {{2, 2}}, 0.5, 3.0);
  sweep("square", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(square(p[0])); }, {{2, 2}}, -2, 2);
  sweep("sqrt", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(sqrt(p[0])); }, {{2, 2}}, 0.5, 3.0);
  sweep("sum_axis", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(square(sum_axis(p[0], 1))); }, {{3, 4}}, -1, 1);
  sweep("max_axis", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(max_axis(p[0], 1)); }, {{3, 4}}, -1, 1);
  sweep("broadcast", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(square(broadcast(p[0], {4, 2, 3}))); }, {{2, 3}}, -1, 1);
  sweep("sum_to", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(square(sum_to(p[0], {1, 3}))); }, {{4, 3}}, -1, 1);
  sweep("reshape", 3, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(square(reshape(p[0], {6}))); }, {{2, 3}}, -1, 1);
  sweep("slice+pad", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(square(pad(slice(p[0], 1, 1, 2), 0, 1, 0))); },
        {{3, 4}}, -1, 1);
  sweep("concat", 5, [](Graph&, const std::vector<Tensor>& p) {
    std::vector<Tensor> parts = {p[0], p[1]};
    return sum_all(square(concat(parts, 1))); }, {{2, 2}, {2, 3}}, -1, 1);
  sweep("solve_spd", 5, [](Graph& g, const std::vector<Tensor>& p) {
    Tensor spd = add_scalar(matmul(p[0], p[0], true, false), 0.0);
    Tensor eye = g.constant({3, 3}, {2, 0, 0, 0, 2, 0, 0, 0, 2});
    return sum_all(square(solve_spd(add(spd, eye), p[1])));
  }, {{3, 3}, {3, 2}}, -1, 1);
  sweep("logsumexp", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(logsumexp(p[0], 1)); }, {{3, 5}}, -3, 3);
  sweep("log_softmax", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(mul(log_softmax(p[0], 1), p[1])); }, {{2, 4}, {2, 4}}, -2, 2);
  sweep("softmax", 5, [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(square(softmax(p[0], 1))); }, {{2, 4}}, -2, 2);
}

TEST_CASE("log_softmax gradient is exactly p - onehot") {
  // The composite must differentiate to the softmax itself, including the
  // cancellation of the max-shift term.
  Graph g;
  Tensor z = g.input("z", {1, 4}, {0.2, -1.0, 3.0, 0.4});
  Tensor y = g.constant({1, 4}, {0.0, 0.0, 1.0, 0.0});
  Tensor loss = neg(sum_all(mul(log_softmax(z, 1), y)));
  Tensor dz = g.gradient(loss, z);
  const std::vector<double> p =
      oracle::softmax({0.2, -1.0, 3.0, 0.4});
  for (std::size_t i = 0; i < 4; ++i) {
    const double want = p[i] - (i == 2 ? 1.0 : 0.0);
    CHECK(dz.value()[i] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("second derivatives: Hessian-vector product of a quadratic") {
  // f(x) = x^T A x with A fixed; H = A + A^T exactly, so grad-of-grad must
  // reproduce (A + A^T) v to near machine precision.
  Rng rng(41);
  const std::size_t n = 5;
  Tensor a = random_tensor(rng, {n, n});
  Tensor x0 = random_tensor(rng, {n, 1});
  Tensor v = random_tensor(rng, {n, 1});

  Graph g;
  Tensor x = g.input("x", x0);
  Tensor f = sum_all(mul(x, matmul(g.constant(a), x)));
  Tensor grad = g.gradient(f, x);          // first derivative, still on tape
  Tensor gv = sum_all(mul(grad, g.constant(v)));
  Tensor hv = g.gradient(gv, x);           // second derivative

  std::vector<double> at = oracle::transpose(a.value(), n, n);
  std::vector<double> sym(n * n);
  for (std::size_t i = 0; i < n * n; ++i) sym[i] = a.value()[i] + at[i];
  const std::vector<double> want = oracle::matmul(sym, n, n, v.value(), 1);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(hv.value()[i] == doctest::Approx(want[i]).epsilon(1e-10));
  }
}

TEST_CASE("Hessian of log-sum-exp via double grad matches FD of grad") {
  Rng rng(43);
  Tensor x0 = random_tensor(rng, {4}, -1.5, 1.5);
  Tensor v = random_tensor(rng, {4});
  // Engine: H v via grad of (grad . v).
  Graph g;
  Tensor x = g.input("x", x0);
  Tensor f = sum_all(logsumexp(reshape(x, {1, 4}), 1));
  Tensor gr = g.gradient(f, x);
  Tensor hv = g.gradient(sum_all(mul(gr, g.constant(v))), x);
  // Oracle: finite differences of the analytic softmax gradient.
  auto grad_at = [&](const std::vector<double>& pt) {
    return oracle::softmax(pt);
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < 4; ++i) {
    double want = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      std::vector<double> p = x0.value(), q = x0.value();
      p[j] += h;
      q[j] -= h;
      want += (grad_at(p)[i] - grad_at(q)[i]) / (2 * h) * v.value()[j];
    }
    CHECK(hv.value()[i] == doctest::Approx(want).epsilon(1e-4));
  }
}

TEST_CASE("detached tensors re-enter as constants and get zero gradient") {
  Graph g;
  Tensor x = g.input("x", {2}, {1.0, 2.0});
  Tensor frozen = mul(x, x).detach();
  Tensor y = sum_all(mul(g.constant(frozen), x));
  Tensor dx = g.gradient(y, x);
  // d/dx of c*x is just c; no path through the detached square term.
  CHECK(dx.value() == std::vector<double>{1.0, 4.0});
}

TEST_CASE("gradient of an unreachable input is exactly zero") {
  Graph g;
  Tensor x = g.input("x", {2}, {1.0, 2.0});
  Tensor z = g.input("z", {3}, {1.0, 1.0, 1.0});
  Tensor y = sum_all(square(x));
  Tensor dz = g.gradient(y, z);
  CHECK(dz.shape() == Shape{3});
  CHECK(dz.value() == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("replay recomputes the whole tape bitwise-identically") {
  Rng rng(47);
  Graph g;
  Tensor x = g.input("x", {2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  Tensor w = g.input("w", random_tensor(rng, {3, 4}));
  Tensor out = sum_all(square(relu(matmul(x, w))));
  Tensor dx = g.gradient(out, x);

  const std::vector<double> x2 = {1.0, -1.0, 0.5, 0.25, -0.75, 2.0};
  g.replay({{"x", x2}});
  const std::vector<double> replayed_out = out.value();
  const std::vector<double> replayed_dx = dx.value();

  // Fresh graph built at the new point must agree bitwise.
  Graph g2;
  Tensor xb = g2.input("x", {2, 3}, x2);
  Tensor wb = g2.input("w", {3, 4}, w.value());
  Tensor outb = sum_all(square(relu(matmul(xb, wb))));
  Tensor dxb = g2.gradient(outb, xb);
  CHECK(replayed_out == outb.value());
  CHECK(replayed_dx == dxb.value());
}

TEST_CASE("forward is pure and reports non-finite values") {
  Graph g;
  Tensor x = g.input("x", {2}, {1.0, 2.0});
  Tensor y = log(x);
  g.mark_output("y", y);
  const std::vector<double> before = y.value();

  ForwardResult ok = g.forward({{"x", Tensor({2}, {2.0, 3.0})}}, {"y"});
  CHECK(ok.all_finite);
  CHECK(ok.outputs.at("y").value()[0] == doctest::Approx(std::log(2.0)));
  CHECK(y.value() == before);  // stored tape values untouched

  ForwardResult bad = g.forward({{"x", Tensor({2}, {-1.0, 1.0})}}, {"y"});
  CHECK_FALSE(bad.all_finite);
  CHECK(bad.first_nonfinite_node.find("log") != std::string::npos);
}

TEST_CASE("structured errors name the offending node") {
  Graph g;
  Tensor a = g.input("a", {2, 3}, std::vector<double>(6, 1.0));
  Tensor b = g.input("b", {3, 2}, std::vector<double>(6, 1.0));
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), InputError);
  CHECK_THROWS_WITH_AS(matmul(a, b, true, false),
                       doctest::Contains("matmul"), InputError);
  CHECK_THROWS_AS(slice(a, 1, 2, 5), InputError);
  CHECK_THROWS_AS(g.input("a", {1}, {0.0}), InputError);  // duplicate name
  CHECK_THROWS_AS(g.gradient(a, a), InputError);          // non-scalar output
  Graph g2;
  Tensor c = g2.input("c", {2, 3}, std::vector<double>(6, 1.0));
  CHECK_THROWS_AS(add(a, c), InputError);                 // cross-graph
  Tensor s = sum_all(a);
  CHECK_THROWS_AS(g2.gradient(sum_all(c), a), InputError);
  CHECK_THROWS_AS(g.forward({}, {"missing"}), InputError);
  CHECK_THROWS_WITH_AS(g.forward({}, {"a"}), doctest::Contains("not bound"),
                       InputError);
}

TEST_CASE("negative control: corrupted gradients must fail the checker") {
  Rng rng(53);
  std::vector<Tensor> pts = {random_tensor(rng, {3, 3}), random_tensor(rng, {3, 3})};
  auto fn = [](Graph&, const std::vector<Tensor>& p) {
    return sum_all(mul(p[0], exp(p[1])));
  };
  GradReport good = check_grad(fn, pts, 1e-5);
  CHECK(good.pass);

  // Recompute the true gradients, then corrupt one coordinate.
  Graph g;
  std::vector<Tensor> attached = {g.input("p0", pts[0]), g.input("p1", pts[1])};
  Tensor out = fn(g, attached);
  auto grads = g.gradients(out, attached);
  std::vector<Tensor> claimed = {grads[0].detach(), grads[1].detach()};
  std::vector<double> bent = claimed[1].value();
  bent[4] += 0.05;
  claimed[1] = Tensor({3, 3}, bent);
  GradReport badrep = check_grad_against(fn, pts, claimed, 1e-5);
  CHECK_FALSE(badrep.pass);
  CHECK(badrep.max_rel_error > 1e-3);
}

TEST_CASE("gradient accumulates across fan-out") {
  Graph g;
  Tensor x = g.input("x", {}, {3.0});
  Tensor y = add(mul(x, x), scale(x, 4.0));  // x^2 + 4x -> dy/dx = 2x + 4
  CHECK(g.gradient(y, x).item() == doctest::Approx(10.0));
}
