#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "aq/attacks.hpp"
#include "aq/error.hpp"
#include "aq/nn.hpp"
#include "aq/rng.hpp"
#include "aq/tasks.hpp"
#include "common/oracles.hpp"

using namespace aq;

namespace {

// Linear classifier closure: logits = x W + b.
ClassifierFn linear_model(std::vector<double> w, std::size_t d, std::size_t c,
                          std::vector<double> b) {
  return [w = std::move(w), b = std::move(b), d, c](Graph& g,
                                                    const Tensor& x) {
    Tensor logits = matmul(x, g.constant({d, c}, w));
    return add(logits, broadcast(g.constant({c}, b), logits.shape()));
  };
}

double linear_ce(const std::vector<double>& w, const std::vector<double>& b,
                 std::size_t d, std::size_t c, const std::vector<double>& x,
                 int y) {
  std::vector<double> logits(b);
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t i = 0; i < d; ++i) logits[j] += x[i] * w[i * c + j];
  }
  return oracle::cross_entropy(logits, y);
}

Tensor random_batch(Rng& rng, std::size_t b, std::size_t d) {
  std::vector<double> v(b * d);
  for (double& x : v) x = rng.uniform(0.2, 0.8);
  return Tensor({b, d}, std::move(v));
}

AttackConfig no_clip() {
  AttackConfig cfg;
  cfg.clip = false;
  return cfg;
}

}  // namespace

TEST_CASE("fgsm on a constant model returns the input unchanged") {
  ClassifierFn model = linear_model(std::vector<double>(3 * 2, 0.0), 3, 2,
                                    {0.3, -0.2});
  Tensor x({2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  AttackOutcome out = fgsm_attack(model, x, {0, 1}, 0.25, no_clip());
  CHECK(out.x_adv.value() == x.value());
  CHECK(out.perturbation_linf == std::vector<double>{0.0, 0.0});
}

TEST_CASE("fgsm pushes a 1-D linear logit the analytic way") {
  // logits = [x, 0]; label 1, so loss grows with x: x_adv = x + eps.
  ClassifierFn model = linear_model({1.0, 0.0}, 1, 2, {0.0, 0.0});
  Tensor x({1, 1}, {0.4});
  AttackOutcome out = fgsm_attack(model, x, {1}, 0.1, no_clip());
  CHECK(out.x_adv.value()[0] == doctest::Approx(0.5).epsilon(1e-15));
  AttackOutcome dec = fgsm_attack(model, x, {0}, 0.1, no_clip());
  CHECK(dec.x_adv.value()[0] == doctest::Approx(0.3).epsilon(1e-15));
}

TEST_CASE("fgsm matches brute-force corner search on a 2-D linear model") {
  Rng rng(201);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<double> w(2 * 2), b(2);
    for (double& v : w) v = rng.uniform(-2.0, 2.0);
    for (double& v : b) v = rng.uniform(-0.5, 0.5);
    std::vector<double> x0 = {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7)};
    const int y = static_cast<int>(rng.below(2));
    const double eps = 0.15;

    AttackOutcome out = fgsm_attack(linear_model(w, 2, 2, b), Tensor({1, 2}, x0),
                                    {y}, eps, no_clip());
    double best = -1e300;
    for (int sx : {-1, 1}) {
      for (int sy : {-1, 1}) {
        best = std::max(best, linear_ce(w, b, 2, 2,
                                        {x0[0] + sx * eps, x0[1] + sy * eps},
                                        y));
      }
    }
    CHECK(out.final_loss[0] == doctest::Approx(best).epsilon(1e-10));
  }
}

TEST_CASE("single-step pgd without random start equals fgsm") {
  Rng rng(77);
  std::vector<double> w(4 * 3), b(3, 0.0);
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  ClassifierFn model = linear_model(w, 4, 3, b);
  Tensor x = random_batch(rng, 5, 4);
  const std::vector<int> y = {0, 1, 2, 0, 1};

  for (double step : {0.05, 0.2}) {  // below and above the budget
    AttackConfig cfg;
    cfg.eps = 0.1;
    cfg.step = step;
    cfg.steps = 1;
    cfg.random_start = false;
    AttackOutcome p = pgd_attack(model, x, y, cfg, 9);
    AttackOutcome f =
        fgsm_attack(model, x, y, std::min(step, cfg.eps), AttackConfig{});
    CHECK(p.x_adv.value() == f.x_adv.value());  // bitwise
  }
}

TEST_CASE("pgd reaches the dense-grid maximum on a 2-D linear model") {
  Rng rng(301);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> w(2 * 2), b(2);
    for (double& v : w) v = rng.uniform(-2.0, 2.0);
    for (double& v : b) v = rng.uniform(-0.3, 0.3);
    std::vector<double> x0 = {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7)};
    const int y = static_cast<int>(rng.below(2));

    AttackConfig cfg = no_clip();
    cfg.eps = 0.1;
    cfg.step = 0.02;
    cfg.steps = 20;
    cfg.random_start = false;
    AttackOutcome out =
        pgd_attack(linear_model(w, 2, 2, b), Tensor({1, 2}, x0), {y}, cfg, 5);

    double best = -1e300;
    const int n = 100;
    for (int i = 0; i <= n; ++i) {
      for (int j = 0; j <= n; ++j) {
        const double dx = -cfg.eps + 2 * cfg.eps * i / n;
        const double dy = -cfg.eps + 2 * cfg.eps * j / n;
        best = std::max(best,
                        linear_ce(w, b, 2, 2, {x0[0] + dx, x0[1] + dy}, y));
      }
    }
    CHECK(out.final_loss[0] == doctest::Approx(best).epsilon(1e-6));
    CHECK(std::abs(out.final_loss[0] - best) < 1e-6);
  }
}

TEST_CASE("mi-fgsm with zero momentum is bitwise iterative fgsm") {
  Rng rng(88);
  std::vector<double> w(6 * 4);
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  ClassifierFn model = linear_model(w, 6, 4, std::vector<double>(4, 0.0));
  Tensor x = random_batch(rng, 4, 6);
  const std::vector<int> y = {3, 0, 1, 2};

  AttackConfig cfg;
  cfg.eps = 0.08;
  cfg.step = 0.02;
  cfg.steps = 7;
  cfg.random_start = false;
  AttackOutcome mi = mi_fgsm_attack(model, x, y, cfg, 0.0, 4242);
  AttackOutcome it = pgd_attack(model, x, y, cfg, 4242);
  CHECK(mi.x_adv.value() == it.x_adv.value());
  CHECK(mi.final_loss == it.final_loss);

  // Nonzero momentum on a constant model still does nothing.
  ClassifierFn flat = linear_model(std::vector<double>(6 * 4, 0.0), 6, 4,
                                   {0.1, 0.2, 0.3, 0.4});
  AttackOutcome still = mi_fgsm_attack(flat, x, y, cfg, 1.0, 1);
  CHECK(still.x_adv.value() == x.value());
}

TEST_CASE("mi-fgsm matches a hand-unrolled two-step recurrence") {
  const std::vector<double> w = {1.5, -0.7, -0.4, 1.1};  // [2 x 2]
  const std::vector<double> b = {0.1, -0.1};
  const std::vector<double> x0 = {0.45, 0.55};
  const int y = 0;
  const double mu = 0.9, eps = 0.2, step = 0.07;

  AttackConfig cfg = no_clip();
  cfg.eps = eps;
  cfg.step = step;
  cfg.steps = 2;
  AttackOutcome out = mi_fgsm_attack(linear_model(w, 2, 2, b),
                                     Tensor({1, 2}, x0), {y}, cfg, mu, 0);

  // Hand recurrence with the analytic softmax gradient.
  auto grad_at = [&](const std::vector<double>& x) {
    std::vector<double> logits(b);
    for (std::size_t j = 0; j < 2; ++j) {
      for (std::size_t i = 0; i < 2; ++i) logits[j] += x[i] * w[i * 2 + j];
    }
    const std::vector<double> p = oracle::softmax(logits);
    std::vector<double> g(2, 0.0);
    for (std::size_t j = 0; j < 2; ++j) {
      const double coef = p[j] - (static_cast<int>(j) == y ? 1.0 : 0.0);
      for (std::size_t i = 0; i < 2; ++i) g[i] += coef * w[i * 2 + j];
    }
    return g;
  };
  std::vector<double> acc(2, 0.0), delta(2, 0.0), cur = x0;
  for (int s = 0; s < 2; ++s) {
    std::vector<double> g = grad_at(cur);
    double l1 = std::abs(g[0]) + std::abs(g[1]);
    for (std::size_t i = 0; i < 2; ++i) acc[i] = mu * acc[i] + g[i] / l1;
    for (std::size_t i = 0; i < 2; ++i) {
      delta[i] += step * (acc[i] > 0 ? 1.0 : (acc[i] < 0 ? -1.0 : 0.0));
      delta[i] = std::clamp(delta[i], -eps, eps);
      cur[i] = x0[i] + delta[i];
    }
  }
  CHECK(out.x_adv.value()[0] == doctest::Approx(cur[0]).epsilon(1e-12));
  CHECK(out.x_adv.value()[1] == doctest::Approx(cur[1]).epsilon(1e-12));
}

TEST_CASE("deepfool flips a linear binary model at the analytic margin") {
  Rng rng(404);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<double> w(2 * 2), b(2, 0.0);
    for (double& v : w) v = rng.uniform(-2.0, 2.0);
    std::vector<double> x0 = {rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};
    // Anchor = model's own prediction; margin of the other class.
    std::vector<double> logits(2, 0.0);
    for (std::size_t j = 0; j < 2; ++j) {
      for (std::size_t i = 0; i < 2; ++i) logits[j] += x0[i] * w[i * 2 + j];
    }
    const std::size_t anchor = logits[1] > logits[0] ? 1 : 0;
    const std::size_t other = 1 - anchor;
    const double margin = logits[other] - logits[anchor];
    const double wl1 = std::abs(w[0 * 2 + other] - w[0 * 2 + anchor]) +
                       std::abs(w[1 * 2 + other] - w[1 * 2 + anchor]);
    if (wl1 < 1e-6) continue;

    AttackOutcome out = deepfool_linf(linear_model(w, 2, 2, b),
                                      Tensor({1, 2}, x0), {}, 10, 0.02);
    CHECK(out.iterations_used[0] == 1);
    CHECK(out.success[0] == 1);
    const double want = std::abs(margin) / wl1 * 1.02;
    CHECK(out.perturbation_linf[0] == doctest::Approx(want).epsilon(1e-8));
    CHECK(std::abs(out.perturbation_linf[0] - want) < 1e-8);
  }
}

TEST_CASE("deepfool leaves already-misclassified examples alone") {
  ClassifierFn model = linear_model({1.0, -1.0}, 1, 2, {0.0, 0.0});
  Tensor x({1, 1}, {0.7});  // predicts class 0
  AttackOutcome out = deepfool_linf(model, x, {1}, 5, 0.02);
  CHECK(out.iterations_used[0] == 0);
  CHECK(out.success[0] == 1);
  CHECK(out.x_adv.value() == x.value());
  CHECK(out.perturbation_linf[0] == 0.0);
}

TEST_CASE("deepfool picks the closed-form nearest class on a 3-way model") {
  Rng rng(505);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> w(3 * 3), b(3);
    for (double& v : w) v = rng.uniform(-1.5, 1.5);
    for (double& v : b) v = rng.uniform(-0.2, 0.2);
    std::vector<double> x0 = {rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0),
                              rng.uniform(0.0, 1.0)};
    std::vector<double> logits(b);
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t i = 0; i < 3; ++i) logits[j] += x0[i] * w[i * 3 + j];
    }
    std::size_t anchor = 0;
    for (std::size_t j = 1; j < 3; ++j) {
      if (logits[j] > logits[anchor]) anchor = j;
    }
    // Closed-form per-class l-inf distance; the attack must flip to argmin.
    std::size_t want = 3;
    double best = 1e300;
    for (std::size_t k = 0; k < 3; ++k) {
      if (k == anchor) continue;
      double wl1 = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        wl1 += std::abs(w[i * 3 + k] - w[i * 3 + anchor]);
      }
      if (wl1 < 1e-9) continue;
      const double dist = std::abs(logits[k] - logits[anchor]) / wl1;
      if (dist < best) {
        best = dist;
        want = k;
      }
    }
    if (want == 3) continue;
    AttackOutcome out = deepfool_linf(linear_model(w, 3, 3, b),
                                      Tensor({1, 3}, x0), {}, 10, 0.02);
    Graph g;
    Tensor adv_logits =
        linear_model(w, 3, 3, b)(g, g.input("x", out.x_adv));
    const std::vector<double> lv = adv_logits.value();
    std::size_t got = 0;
    for (std::size_t j = 1; j < 3; ++j) {
      if (lv[j] > lv[got]) got = j;
    }
    CHECK(got == want);
  }
}

TEST_CASE("every bounded attack honors its budget on random cases") {
  Rng rng(606);
  int cases = 0;
  while (cases < 1000) {
    const std::size_t d = 2 + rng.below(4), c = 2 + rng.below(3);
    std::vector<double> w(d * c), b(c);
    for (double& v : w) v = rng.uniform(-1.5, 1.5);
    for (double& v : b) v = rng.uniform(-0.3, 0.3);
    ClassifierFn model = linear_model(w, d, c, b);
    Tensor x = random_batch(rng, 2, d);
    std::vector<int> y = {static_cast<int>(rng.below(c)),
                          static_cast<int>(rng.below(c))};
    AttackConfig cfg;
    cfg.eps = rng.uniform(0.0, 0.25);
    cfg.step = rng.uniform(0.005, 0.1);
    cfg.steps = 1 + rng.below(5);
    cfg.restarts = 1 + rng.below(2);
    cfg.random_start = rng.below(2) == 0;
    cfg.norm = rng.below(4) == 0 ? AttackNorm::kL2 : AttackNorm::kLinf;

    const int kind = static_cast<int>(rng.below(3));
    AttackOutcome out;
    if (kind == 0) {
      out = pgd_attack(model, x, y, cfg, rng.next_u64());
    } else if (kind == 1) {
      cfg.norm = AttackNorm::kLinf;
      out = fgsm_attack(model, x, y, cfg.eps, cfg);
    } else {
      out = mi_fgsm_attack(model, x, y, cfg, rng.uniform(0.0, 1.0),
                           rng.next_u64());
    }
    const std::vector<double> xv = x.value();
    const std::vector<double> av = out.x_adv.value();
    for (std::size_t e = 0; e < 2; ++e) {
      ++cases;
      double linf = 0.0, l2 = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double diff = std::abs(av[e * d + i] - xv[e * d + i]);
        linf = std::max(linf, diff);
        l2 += diff * diff;
      }
      if (cfg.norm == AttackNorm::kLinf || kind == 1) {
        CHECK(linf <= cfg.eps + 1e-9);
      } else {
        CHECK(std::sqrt(l2) <= cfg.eps + 1e-9);
      }
      // Data-range clipping also held (defaults clip to [0,1]).
      CHECK(av[e * d] >= 0.0);
      CHECK(av[e * d] <= 1.0);
    }
  }
}

TEST_CASE("projection matches the componentwise oracle") {
  Rng rng(707);
  for (int trial = 0; trial < 200; ++trial) {
    const double eps = rng.uniform(0.01, 0.5);
    std::vector<double> delta(6), want(6);
    for (std::size_t i = 0; i < 6; ++i) {
      delta[i] = rng.uniform(-1.0, 1.0);
      want[i] = std::min(std::max(delta[i], -eps), eps);
    }
    std::vector<double> got = delta;
    project_ball(got, eps, AttackNorm::kLinf);
    CHECK(got == want);

    std::vector<double> g2 = delta;
    project_ball(g2, eps, AttackNorm::kL2);
    double n = 0.0, n0 = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
      n += g2[i] * g2[i];
      n0 += delta[i] * delta[i];
    }
    CHECK(std::sqrt(n) <= eps + 1e-9);
    if (std::sqrt(n0) <= eps) CHECK(g2 == delta);  // inside: untouched
  }
}

TEST_CASE("pgd dominates fgsm on a trained model across 100 seeded trials") {
  // Train a tiny 2-way logistic model on synthetic data, then compare
  // attack strengths at data points.
  auto [train, test] = gen_synthetic(
      SyntheticSpec{.n_train_classes = 2, .n_test_classes = 2, .dim = 6,
                    .per_class = 40},
      31);
  const std::size_t d = 6, c = 2;
  std::vector<double> w(d * c, 0.0), b(c, 0.0);
  std::vector<double> xs;
  std::vector<int> ys;
  for (std::size_t cls = 0; cls < 2; ++cls) {
    xs.insert(xs.end(), train.classes[cls].data.begin(),
              train.classes[cls].data.end());
    ys.insert(ys.end(), 40, static_cast<int>(cls));
  }
  for (int it = 0; it < 200; ++it) {  // plain batch gradient descent
    std::vector<double> gw(d * c, 0.0), gb(c, 0.0);
    for (std::size_t e = 0; e < ys.size(); ++e) {
      std::vector<double> logits(b);
      for (std::size_t j = 0; j < c; ++j) {
        for (std::size_t i = 0; i < d; ++i) {
          logits[j] += xs[e * d + i] * w[i * c + j];
        }
      }
      const std::vector<double> p = oracle::softmax(logits);
      for (std::size_t j = 0; j < c; ++j) {
        const double coef = p[j] - (static_cast<int>(j) == ys[e] ? 1.0 : 0.0);
        gb[j] += coef;
        for (std::size_t i = 0; i < d; ++i) {
          gw[i * c + j] += coef * xs[e * d + i];
        }
      }
    }
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 0.5 * gw[i] / 80.0;
    for (std::size_t j = 0; j < c; ++j) b[j] -= 0.5 * gb[j] / 80.0;
  }
  ClassifierFn model = linear_model(w, d, c, b);

  Rng rng(808);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t cls = rng.below(2);
    const std::size_t e = rng.below(40);
    std::vector<double> x0(train.classes[cls].data.begin() + e * d,
                           train.classes[cls].data.begin() + (e + 1) * d);
    Tensor x({1, d}, x0);
    const std::vector<int> y = {static_cast<int>(cls)};

    AttackConfig cfg;
    cfg.eps = 0.1;
    cfg.step = 0.025;
    cfg.steps = 10;
    cfg.random_start = false;
    AttackOutcome p = pgd_attack(model, x, y, cfg, 1);
    AttackOutcome f = fgsm_attack(model, x, y, cfg.eps, cfg);
    CHECK(p.final_loss[0] >= f.final_loss[0] - 1e-9);
  }
}

TEST_CASE("best-of-restarts loss is non-decreasing in the restart count") {
  Rng rng(909);
  std::vector<double> w(5 * 3);
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  ClassifierFn model = linear_model(w, 5, 3, {0.0, 0.1, -0.1});
  Tensor x = random_batch(rng, 3, 5);
  const std::vector<int> y = {0, 1, 2};

  double prev = -1e300;
  for (std::size_t k = 1; k <= 5; ++k) {
    AttackConfig cfg;
    cfg.eps = 0.1;
    cfg.step = 0.03;
    cfg.steps = 5;
    cfg.restarts = k;
    AttackOutcome out = pgd_attack(model, x, y, cfg, 321);
    double total = 0.0;
    for (double l : out.final_loss) total += l;
    CHECK(total >= prev - 1e-12);
    prev = total;
  }
}

TEST_CASE("early stop ends iteration at the first misclassification") {
  // Decision boundary at x = 0.125, within the budget from x = 0.2.
  ClassifierFn model = linear_model({2.0, -2.0}, 1, 2, {0.0, 0.5});
  Tensor x({1, 1}, {0.2});
  AttackConfig cfg;
  cfg.eps = 0.2;
  cfg.step = 0.05;
  cfg.steps = 10;
  cfg.random_start = false;
  cfg.early_stop = true;
  AttackOutcome wrong = pgd_attack(model, x, {1}, cfg, 2);
  CHECK(wrong.iterations_used[0] == 0);
  CHECK(wrong.x_adv.value() == x.value());
  CHECK(wrong.success[0] == 1);

  // Correctly classified but fragile: stops before exhausting steps.
  AttackOutcome flip = pgd_attack(model, x, {0}, cfg, 2);
  CHECK(flip.success[0] == 1);
  CHECK(flip.iterations_used[0] < cfg.steps);
  AttackConfig full = cfg;
  full.early_stop = false;
  AttackOutcome maxed = pgd_attack(model, x, {0}, full, 2);
  CHECK(maxed.iterations_used[0] == cfg.steps);
}

TEST_CASE("zero-budget attacks return the input bitwise") {
  Rng rng(111);
  std::vector<double> w(4 * 2);
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  ClassifierFn model = linear_model(w, 4, 2, {0.0, 0.0});
  Tensor x = random_batch(rng, 3, 4);
  AttackConfig cfg;
  cfg.eps = 0.0;
  cfg.random_start = true;  // random start in a radius-0 ball is still x
  AttackOutcome p = pgd_attack(model, x, {0, 1, 0}, cfg, 77);
  CHECK(p.x_adv.value() == x.value());
  AttackOutcome f = fgsm_attack(model, x, {0, 1, 0}, 0.0, cfg);
  CHECK(f.x_adv.value() == x.value());
  AttackOutcome m = mi_fgsm_attack(model, x, {0, 1, 0}, cfg, 1.0, 77);
  CHECK(m.x_adv.value() == x.value());
}

TEST_CASE("transfer attack edge cases and label permutation oracle") {
  Rng rng(222);
  std::vector<double> w(4 * 3);
  for (double& v : w) v = rng.uniform(-1.5, 1.5);
  ClassifierFn model = linear_model(w, 4, 3, {0.0, 0.0, 0.0});
  Tensor x = random_batch(rng, 6, 4);
  const std::vector<int> y = {0, 1, 2, 0, 1, 2};
  AttackConfig cfg;
  cfg.eps = 0.15;
  cfg.step = 0.04;
  cfg.steps = 8;
  cfg.random_start = false;

  // Source == target: accuracy equals white-box robust accuracy.
  AttackOutcome white = pgd_attack(model, x, y, cfg, 3);
  double robust = 0.0;
  for (std::size_t e = 0; e < y.size(); ++e) robust += white.success[e] ? 0 : 1;
  robust /= static_cast<double>(y.size());
  CHECK(transfer_attack(model, model, x, y, cfg, 3) ==
        doctest::Approx(robust).epsilon(1e-12));

  // eps = 0: clean accuracy of the target.
  AttackConfig zero = cfg;
  zero.eps = 0.0;
  Graph g;
  Tensor clean_logits = model(g, g.input("x", x));
  CHECK(transfer_attack(model, model, x, y, zero, 3) ==
        doctest::Approx(accuracy(clean_logits, y)).epsilon(1e-12));

  // Target = source with permuted class order; verify against relabeling.
  const std::vector<std::size_t> perm = {2, 0, 1};  // target class p[j] = source j
  std::vector<double> wp(4 * 3), bp(3, 0.0);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      wp[i * 3 + perm[j]] = w[i * 3 + j];
    }
  }
  ClassifierFn target = linear_model(wp, 4, 3, bp);
  const double got = transfer_attack(model, target, x, y, cfg, 3);
  Graph g2;
  Tensor adv_logits = model(g2, g2.input("x", white.x_adv));
  const std::vector<int> src_pred = argmax_rows(adv_logits);
  double want = 0.0;
  for (std::size_t e = 0; e < y.size(); ++e) {
    want += static_cast<int>(perm[static_cast<std::size_t>(src_pred[e])]) ==
                    y[e]
                ? 1
                : 0;
  }
  want /= static_cast<double>(y.size());
  CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("attack validation rejects malformed requests") {
  ClassifierFn model = linear_model({1.0, 0.0}, 1, 2, {0.0, 0.0});
  Tensor x({1, 1}, {0.5});
  AttackConfig cfg;
  cfg.eps = -0.1;
  CHECK_THROWS_AS(pgd_attack(model, x, {0}, cfg, 1), InputError);
  cfg.eps = 0.1;
  cfg.restarts = 0;
  CHECK_THROWS_AS(pgd_attack(model, x, {0}, cfg, 1), InputError);
  cfg.restarts = 1;
  CHECK_THROWS_AS(pgd_attack(model, x, {0, 1}, cfg, 1), InputError);
  CHECK_THROWS_AS(pgd_attack(model, x, {5}, cfg, 1), InputError);
  CHECK_THROWS_AS(mi_fgsm_attack(model, x, {0}, cfg, -1.0, 1), InputError);
  cfg.clip_lo = 2.0;
  CHECK_THROWS_AS(pgd_attack(model, x, {0}, cfg, 1), InputError);
}
