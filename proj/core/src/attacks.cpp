#include "aq/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "aq/error.hpp"
#include "aq/nn.hpp"

namespace aq {

void AttackConfig::validate() const {
  if (!std::isfinite(eps) || eps < 0.0) {
    throw InputError("attack eps must be finite and >= 0");
  }
  if (!std::isfinite(step) || step < 0.0) {
    throw InputError("attack step must be finite and >= 0");
  }
  if (restarts < 1) throw InputError("attack restarts must be >= 1");
  if (clip && !(clip_lo < clip_hi)) {
    throw InputError("attack clip range must satisfy lo < hi");
  }
}

void project_ball(std::vector<double>& delta, double eps, AttackNorm norm) {
  if (norm == AttackNorm::kLinf) {
    for (double& d : delta) d = std::clamp(d, -eps, eps);
    return;
  }
  double n2 = 0.0;
  for (double d : delta) n2 += d * d;
  const double n = std::sqrt(n2);
  if (n > eps) {
    const double s = eps / n;
    for (double& d : delta) d *= s;
  }
}

namespace {

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

std::size_t argmax_of(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

double ce_from_logits(const std::vector<double>& logits, int label) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double s = 0.0;
  for (double v : logits) s += std::exp(v - m);
  return m + std::log(s) - logits[static_cast<std::size_t>(label)];
}

// One reusable tape per attack invocation: logits, cross-entropy and the
// input gradient for a [1, D] example, replayed across examples and steps.
struct AttackTape {
  Graph g;
  Tensor x_in, y_in, logits, loss, grad;
  std::size_t dim = 0, classes = 0;

  AttackTape(const ClassifierFn& model, std::size_t d,
             std::vector<double> x0) {
    dim = d;
    x_in = g.input("__x", {1, d}, std::move(x0));
    logits = model(g, x_in);
    const Shape ls = logits.shape();
    if (ls.size() != 2 || ls[0] != 1 || ls[1] < 2) {
      throw InputError("attack model must map [1,D] to [1,C>=2] logits, got " +
                       shape_str(ls));
    }
    classes = ls[1];
    std::vector<double> oh(classes, 0.0);
    oh[0] = 1.0;
    y_in = g.input("__y", {1, classes}, std::move(oh));
    loss = cross_entropy_onehot(logits, y_in);
    grad = g.gradient(loss, x_in);
  }

  void eval(const std::vector<double>& x, int label) {
    std::vector<double> oh(classes, 0.0);
    oh[static_cast<std::size_t>(label)] = 1.0;
    g.replay({{"__x", x}, {"__y", std::move(oh)}});
  }
  void eval_x(const std::vector<double>& x) { g.replay({{"__x", x}}); }
};

void check_batch(const Tensor& x, const std::vector<int>& y) {
  const Shape xs = x.shape();
  if (xs.size() != 2 || xs[0] == 0 || xs[1] == 0) {
    throw InputError("attack input must be a nonempty [B, D] batch, got " +
                     shape_str(xs));
  }
  if (y.size() != xs[0]) {
    throw InputError("attack got " + std::to_string(y.size()) +
                     " labels for batch of " + std::to_string(xs[0]));
  }
}

std::vector<double> random_delta(Rng& rng, std::size_t d, double eps,
                                 AttackNorm norm) {
  std::vector<double> delta(d);
  if (norm == AttackNorm::kLinf) {
    for (double& v : delta) v = rng.uniform(-eps, eps);
    return delta;
  }
  double n2 = 0.0;
  for (double& v : delta) {
    v = rng.gaussian();
    n2 += v * v;
  }
  const double n = std::sqrt(n2);
  const double r =
      eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
  const double s = n > 0.0 ? r / n : 0.0;
  for (double& v : delta) v *= s;
  return delta;
}

AttackOutcome attack_core(const ClassifierFn& model, const Tensor& x,
                          const std::vector<int>& y, const AttackConfig& cfg,
                          double momentum, std::uint64_t seed) {
  cfg.validate();
  check_batch(x, y);
  const Shape xs = x.shape();
  const std::size_t batch = xs[0], d = xs[1];
  const std::vector<double> xv = x.value();

  AttackTape tape(model, d, std::vector<double>(xv.begin(), xv.begin() + d));
  for (int label : y) {
    if (label < 0 || static_cast<std::size_t>(label) >= tape.classes) {
      throw InputError("attack label " + std::to_string(label) +
                       " out of range for " + std::to_string(tape.classes) +
                       " classes");
    }
  }

  AttackOutcome out;
  out.success.assign(batch, 0);
  out.iterations_used.assign(batch, 0);
  out.perturbation_linf.assign(batch, 0.0);
  out.final_loss.assign(batch, 0.0);
  std::vector<double> adv(batch * d);

  auto clipped = [&](const std::vector<double>& xe,
                     const std::vector<double>& delta) {
    std::vector<double> cur(d);
    for (std::size_t i = 0; i < d; ++i) {
      double v = xe[i] + delta[i];
      if (cfg.clip) v = std::clamp(v, cfg.clip_lo, cfg.clip_hi);
      cur[i] = v;
    }
    return cur;
  };

  for (std::size_t e = 0; e < batch; ++e) {
    const std::vector<double> xe(xv.begin() + e * d, xv.begin() + (e + 1) * d);
    double best_loss = -std::numeric_limits<double>::infinity();
    bool have_best = false;
    std::vector<double> best_x;
    std::uint8_t best_succ = 0;
    std::size_t best_iters = 0;

    for (std::size_t r = 0; r < cfg.restarts; ++r) {
      Rng rng(derive_seed(seed, SeedTag::kSeedAttack, e, r));
      std::vector<double> delta =
          cfg.random_start ? random_delta(rng, d, cfg.eps, cfg.norm)
                           : std::vector<double>(d, 0.0);
      project_ball(delta, cfg.eps, cfg.norm);
      std::vector<double> cur = clipped(xe, delta);
      std::vector<double> acc(d, 0.0);
      std::size_t iters = 0;
      bool aborted = false;

      tape.eval(cur, y[e]);
      for (std::size_t s = 0; s < cfg.steps; ++s) {
        const std::vector<double> gv = tape.grad.value();
        if (!std::isfinite(tape.loss.item()) || !all_finite(gv)) {
          aborted = true;
          break;
        }
        if (cfg.early_stop &&
            argmax_of(tape.logits.value()) != static_cast<std::size_t>(y[e])) {
          break;
        }
        double l1 = 0.0;
        for (double v : gv) l1 += std::abs(v);
        for (std::size_t i = 0; i < d; ++i) {
          // zero l1 norm: skip normalization (the gradient is zero anyway)
          acc[i] = momentum * acc[i] + (l1 > 0.0 ? gv[i] / l1 : gv[i]);
        }
        if (cfg.norm == AttackNorm::kLinf) {
          for (std::size_t i = 0; i < d; ++i) {
            delta[i] += cfg.step * sign_of(acc[i]);
          }
        } else {
          double n2 = 0.0;
          for (double v : acc) n2 += v * v;
          const double n = std::sqrt(n2);
          if (n > 0.0) {
            for (std::size_t i = 0; i < d; ++i) {
              delta[i] += cfg.step * acc[i] / n;
            }
          }
        }
        project_ball(delta, cfg.eps, cfg.norm);
        cur = clipped(xe, delta);
        ++iters;
        tape.eval_x(cur);
      }

      const double final_loss = tape.loss.item();
      if (aborted || !std::isfinite(final_loss)) continue;
      if (final_loss > best_loss) {
        best_loss = final_loss;
        best_x = cur;
        best_succ = argmax_of(tape.logits.value()) !=
                            static_cast<std::size_t>(y[e])
                        ? 1
                        : 0;
        best_iters = iters;
        have_best = true;
      }
    }

    if (!have_best) {
      throw NumericError("attack: non-finite loss or gradient in every "
                         "restart for example " +
                         std::to_string(e));
    }
    std::copy(best_x.begin(), best_x.end(), adv.begin() + e * d);
    out.success[e] = best_succ;
    out.iterations_used[e] = best_iters;
    out.final_loss[e] = best_loss;
    double linf = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      linf = std::max(linf, std::abs(best_x[i] - xe[i]));
    }
    out.perturbation_linf[e] = linf;
  }
  out.x_adv = Tensor({batch, d}, std::move(adv));
  return out;
}

}  // namespace

AttackOutcome pgd_attack(const ClassifierFn& model, const Tensor& x,
                         const std::vector<int>& y, const AttackConfig& cfg,
                         std::uint64_t seed) {
  return attack_core(model, x, y, cfg, 0.0, seed);
}

AttackOutcome fgsm_attack(const ClassifierFn& model, const Tensor& x,
                          const std::vector<int>& y, double eps,
                          const AttackConfig& clip_like) {
  AttackConfig cfg = clip_like;
  cfg.eps = eps;
  cfg.step = eps;
  cfg.steps = 1;
  cfg.restarts = 1;
  cfg.norm = AttackNorm::kLinf;
  cfg.random_start = false;
  cfg.early_stop = false;
  return attack_core(model, x, y, cfg, 0.0, 0);
}

AttackOutcome mi_fgsm_attack(const ClassifierFn& model, const Tensor& x,
                             const std::vector<int>& y,
                             const AttackConfig& cfg, double mu,
                             std::uint64_t seed) {
  if (!std::isfinite(mu) || mu < 0.0) {
    throw InputError("mi_fgsm momentum must be finite and >= 0");
  }
  AttackConfig c = cfg;
  c.random_start = false;  // MI-FGSM starts at the clean input
  return attack_core(model, x, y, c, mu, seed);
}

AttackOutcome deepfool_linf(const ClassifierFn& model, const Tensor& x,
                            const std::vector<int>& y, std::size_t max_iter,
                            double overshoot) {
  const Shape xs = x.shape();
  if (xs.size() != 2 || xs[0] == 0 || xs[1] == 0) {
    throw InputError("attack input must be a nonempty [B, D] batch, got " +
                     shape_str(xs));
  }
  if (!y.empty() && y.size() != xs[0]) {
    throw InputError("deepfool got " + std::to_string(y.size()) +
                     " labels for batch of " + std::to_string(xs[0]));
  }
  const std::size_t batch = xs[0], d = xs[1];
  const std::vector<double> xv = x.value();

  AttackOutcome out;
  out.success.assign(batch, 0);
  out.iterations_used.assign(batch, 0);
  out.perturbation_linf.assign(batch, 0.0);
  out.final_loss.assign(batch, 0.0);
  std::vector<double> adv(batch * d);

  for (std::size_t e = 0; e < batch; ++e) {
    const std::vector<double> xe(xv.begin() + e * d, xv.begin() + (e + 1) * d);
    Graph g;
    Tensor x_in = g.input("__x", {1, d}, xe);
    Tensor logits = model(g, x_in);
    const Shape ls = logits.shape();
    if (ls.size() != 2 || ls[0] != 1 || ls[1] < 2) {
      throw InputError("attack model must map [1,D] to [1,C>=2] logits, got " +
                       shape_str(ls));
    }
    const std::size_t classes = ls[1];
    const bool labeled = !y.empty();
    if (labeled &&
        (y[e] < 0 || static_cast<std::size_t>(y[e]) >= classes)) {
      throw InputError("deepfool label out of range");
    }

    const std::size_t pred0 = argmax_of(logits.value());
    const std::size_t anchor =
        labeled ? static_cast<std::size_t>(y[e]) : pred0;
    auto finish = [&](const std::vector<double>& cur, std::size_t iters) {
      std::copy(cur.begin(), cur.end(), adv.begin() + e * d);
      const std::vector<double> lv = logits.value();
      out.iterations_used[e] = iters;
      out.success[e] = argmax_of(lv) != anchor ? 1 : 0;
      out.final_loss[e] = ce_from_logits(lv, static_cast<int>(anchor));
      double linf = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        linf = std::max(linf, std::abs(cur[i] - xe[i]));
      }
      out.perturbation_linf[e] = linf;
    };

    if (labeled && pred0 != anchor) {
      finish(xe, 0);  // already misclassified: nothing to do
      continue;
    }

    // Per wrong class: margin f_k - f_anchor and its input gradient.
    Tensor anchor_logit = sum_all(slice(logits, 1, anchor, 1));
    std::vector<Tensor> margins, grads;
    std::vector<std::size_t> classes_of;
    for (std::size_t k = 0; k < classes; ++k) {
      if (k == anchor) continue;
      Tensor m = sub(sum_all(slice(logits, 1, k, 1)), anchor_logit);
      margins.push_back(m);
      grads.push_back(g.gradient(m, x_in));
      classes_of.push_back(k);
    }

    std::vector<double> cur = xe;
    std::size_t iters = 0;
    while (iters < max_iter && argmax_of(logits.value()) == anchor) {
      double best_ratio = std::numeric_limits<double>::infinity();
      std::size_t best_k = margins.size();
      for (std::size_t k = 0; k < margins.size(); ++k) {
        const std::vector<double> gk = grads[k].value();
        double l1 = 0.0;
        for (double v : gk) l1 += std::abs(v);
        if (!(l1 > 0.0)) continue;  // degenerate direction: skip this class
        const double ratio = std::abs(margins[k].item()) / l1;
        if (ratio < best_ratio) {
          best_ratio = ratio;
          best_k = k;
        }
      }
      if (best_k == margins.size()) break;  // nowhere to move
      const std::vector<double> gk = grads[best_k].value();
      double l1 = 0.0;
      for (double v : gk) l1 += std::abs(v);
      const double mag =
          (1.0 + overshoot) * std::abs(margins[best_k].item()) / l1;
      for (std::size_t i = 0; i < d; ++i) {
        cur[i] += mag * sign_of(gk[i]);
      }
      ++iters;
      g.replay({{"__x", cur}});
    }
    finish(cur, iters);
  }
  out.x_adv = Tensor({batch, d}, std::move(adv));
  return out;
}

double transfer_attack(const ClassifierFn& source, const ClassifierFn& target,
                       const Tensor& x, const std::vector<int>& y,
                       const AttackConfig& cfg, std::uint64_t seed) {
  AttackOutcome adv = pgd_attack(source, x, y, cfg, seed);
  Graph g;
  Tensor logits = target(g, g.input("__x", adv.x_adv));
  const Shape ls = logits.shape();
  if (ls.size() != 2 || ls[0] != x.shape()[0]) {
    throw InputError("transfer target produced logits " + shape_str(ls) +
                     " for batch " + shape_str(x.shape()));
  }
  return accuracy(logits, y);
}

}  // namespace aq
