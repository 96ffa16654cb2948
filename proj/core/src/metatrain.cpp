#include "aq/metatrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "aq/error.hpp"
#include "aq/parallel.hpp"
#include "aq/rng.hpp"

namespace aq {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(),
                     [](double x) { return std::isfinite(x); });
}

// Componentwise clamp / radial rescale of each row of a [B, D] delta.
void project_rows(std::vector<double>& delta, std::size_t b, std::size_t d,
                  const AttackConfig& atk) {
  for (std::size_t r = 0; r < b; ++r) {
    double* row = delta.data() + r * d;
    if (atk.norm == AttackNorm::kLinf) {
      for (std::size_t i = 0; i < d; ++i) {
        row[i] = std::clamp(row[i], -atk.eps, atk.eps);
      }
    } else {
      double n = 0.0;
      for (std::size_t i = 0; i < d; ++i) n += row[i] * row[i];
      n = std::sqrt(n);
      if (n > atk.eps && n > 0.0) {
        const double f = atk.eps / n;
        for (std::size_t i = 0; i < d; ++i) row[i] *= f;
      }
    }
  }
}

std::vector<double> clipped_point(const std::vector<double>& clean,
                                  const std::vector<double>& delta,
                                  const AttackConfig& atk) {
  std::vector<double> cur(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    cur[i] = clean[i] + delta[i];
    if (atk.clip) cur[i] = std::clamp(cur[i], atk.clip_lo, atk.clip_hi);
  }
  return cur;
}

}  // namespace

std::vector<double> trades_perturb(const ClassifierFn& model,
                                   const std::vector<double>& clean,
                                   std::size_t b, std::size_t d,
                                   const AttackConfig& atk,
                                   std::uint64_t seed) {
  atk.validate();
  if (clean.size() != b * d) {
    throw InputError("trade-off attack: batch size mismatch");
  }
  if (atk.steps == 0) return clean;
  Graph g;
  Tensor x_in = g.input("__x", {b, d}, clean);
  Tensor logits = model(g, x_in);
  if (logits.shape().size() != 2 || logits.shape()[0] != b) {
    throw InputError("trade-off attack: classifier returned a bad shape");
  }
  Tensor lp = log_softmax(logits, 1);
  Tensor target = g.constant(lp.shape(), lp.value());  // clean log-probs
  Tensor kl = scale(sum_all(mul(softmax(logits, 1), sub(lp, target))),
                    1.0 / static_cast<double>(b));
  Tensor grad = g.gradient(kl, x_in);

  Rng rng(seed);
  std::vector<double> delta(b * d, 0.0);
  if (atk.random_start) {
    if (atk.norm == AttackNorm::kLinf) {
      for (double& v : delta) v = rng.uniform(-atk.eps, atk.eps);
    } else {
      for (std::size_t r = 0; r < b; ++r) {
        double n = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          delta[r * d + i] = rng.gaussian();
          n += delta[r * d + i] * delta[r * d + i];
        }
        n = std::sqrt(n);
        const double radius =
            atk.eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
        if (n > 0) {
          for (std::size_t i = 0; i < d; ++i) delta[r * d + i] *= radius / n;
        }
      }
    }
    project_rows(delta, b, d, atk);
  }
  std::vector<double> cur = clipped_point(clean, delta, atk);
  for (std::size_t s = 0; s < atk.steps; ++s) {
    g.replay({{"__x", cur}});
    const std::vector<double> gv = grad.value();
    if (!all_finite(gv)) {
      throw NumericError("trade-off attack: non-finite gradient");
    }
    if (atk.norm == AttackNorm::kLinf) {
      for (std::size_t i = 0; i < gv.size(); ++i) {
        delta[i] += atk.step * (gv[i] > 0 ? 1.0 : (gv[i] < 0 ? -1.0 : 0.0));
      }
    } else {
      for (std::size_t r = 0; r < b; ++r) {
        double n = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          n += gv[r * d + i] * gv[r * d + i];
        }
        n = std::sqrt(n);
        if (n > 0) {
          for (std::size_t i = 0; i < d; ++i) {
            delta[r * d + i] += atk.step * gv[r * d + i] / n;
          }
        }
      }
    }
    project_rows(delta, b, d, atk);
    cur = clipped_point(clean, delta, atk);
  }
  return cur;
}

namespace {

struct TaskResult {
  std::vector<std::vector<double>> grads;  // parameter-entry order
  double loss = 0.0;
  double clean_acc = 0.0;
  double attack_success = 0.0;
  std::size_t attack_invocations = 0;
  std::string bad;  // non-finite diagnostic, empty when healthy
};

double success_rate(const std::vector<std::uint8_t>& success) {
  double s = 0.0;
  for (std::uint8_t v : success) s += v ? 1.0 : 0.0;
  return success.empty() ? 0.0 : s / static_cast<double>(success.size());
}

TaskResult run_task(const Architecture& arch, const MetaTrainConfig& cfg,
                    const ParameterSet& snapshot, const Dataset& data,
                    std::size_t episode_idx) {
  Rng erng(derive_seed(cfg.seed, SeedTag::kSeedEpisode, episode_idx));
  Episode ep = sample_episode(data, cfg.episode, erng);

  Graph g;
  ParamMap m = attach_params(g, snapshot);
  Tensor sx = g.constant(ep.support_x);
  const std::uint64_t query_seed =
      derive_seed(cfg.seed, SeedTag::kSeedAttack, episode_idx, 0);
  const std::uint64_t support_seed =
      derive_seed(cfg.seed, SeedTag::kSeedAttack, episode_idx, 1);

  TaskResult res;
  Tensor loss = sx;  // placeholder, assigned per regime below
  switch (cfg.regime) {
    case Regime::kNatural: {
      AdaptedModel am = adapt(g, arch, cfg.finetune, m, sx, ep.support_y,
                              ep.n_way);
      Tensor logits = am.predict(g.constant(ep.query_x));
      loss = cross_entropy(logits, ep.query_y);
      res.clean_acc = accuracy(logits, ep.query_y);
      break;
    }
    case Regime::kAq:
    case Regime::kAqSupport: {
      Tensor support = sx;
      if (cfg.regime == Regime::kAqSupport) {
        ClassifierFn target =
            cfg.support_attack_pre_adapt
                ? snapshot_classifier(arch, snapshot)
                : adapt(g, arch, cfg.finetune, m, sx, ep.support_y, ep.n_way)
                      .frozen;
        AttackOutcome sout = pgd_attack(target, ep.support_x, ep.support_y,
                                        cfg.attack, support_seed);
        ++res.attack_invocations;
        support = g.constant(sout.x_adv);
      }
      AdaptedModel am = adapt(g, arch, cfg.finetune, m, support,
                              ep.support_y, ep.n_way);
      AttackOutcome out = pgd_attack(am.frozen, ep.query_x, ep.query_y,
                                     cfg.attack, query_seed);
      ++res.attack_invocations;
      Tensor adv_logits = am.predict(g.constant(out.x_adv));
      loss = cross_entropy(adv_logits, ep.query_y);
      res.attack_success = success_rate(out.success);
      res.clean_acc = accuracy(am.predict(g.constant(ep.query_x)),
                               ep.query_y);
      break;
    }
    case Regime::kTrades: {
      AdaptedModel am = adapt(g, arch, cfg.finetune, m, sx, ep.support_y,
                              ep.n_way);
      Tensor clean_logits = am.predict(g.constant(ep.query_x));
      Tensor ce = cross_entropy(clean_logits, ep.query_y);
      res.clean_acc = accuracy(clean_logits, ep.query_y);
      if (cfg.trades_inv_lambda == 0.0) {
        loss = ce;
        break;
      }
      const std::size_t b = ep.query_y.size();
      const std::size_t d = ep.query_x.shape()[1];
      std::vector<double> xhat = ep.query_x.value();
      if (cfg.attack.steps > 0) {
        xhat = trades_perturb(am.frozen, xhat, b, d, cfg.attack, query_seed);
        ++res.attack_invocations;
      }
      Tensor adv_logits = am.predict(g.constant({b, d}, xhat));
      Tensor kl = scale(
          sum_all(mul(softmax(adv_logits, 1),
                      sub(log_softmax(adv_logits, 1),
                          log_softmax(clean_logits, 1)))),
          1.0 / static_cast<double>(b));
      loss = add(ce, scale(kl, cfg.trades_inv_lambda));
      res.attack_success = 1.0 - accuracy(adv_logits, ep.query_y);
      break;
    }
  }

  res.loss = loss.item();
  std::vector<Tensor> wrt;
  for (const ParamEntry& e : snapshot.entries()) wrt.push_back(m.at(e.name));
  const std::vector<Tensor> grads = g.gradients(loss, wrt);
  res.grads.reserve(grads.size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    res.grads.push_back(grads[i].value());
    if (res.bad.empty() && !all_finite(res.grads.back())) {
      res.bad = "gradient of " + snapshot.entries()[i].name;
    }
  }
  if (!std::isfinite(res.loss)) res.bad = "query loss";
  return res;
}

using Velocity = std::map<std::string, std::vector<double>>;

void apply_update(ParameterSet& theta, Velocity& velocity,
                  const std::vector<std::vector<double>>& mean_grads,
                  const OuterOptimizer& opt, double lr) {
  for (std::size_t i = 0; i < theta.entries().size(); ++i) {
    ParamEntry& entry = theta.entries()[i];
    std::vector<double> w = entry.value.value();
    const std::vector<double>& gm = mean_grads[i];
    std::vector<double>& v = velocity[entry.name];
    if (opt.momentum > 0 && v.empty()) v.assign(w.size(), 0.0);
    for (std::size_t j = 0; j < w.size(); ++j) {
      double g = gm[j] + opt.weight_decay * w[j];
      if (opt.momentum > 0) {
        v[j] = opt.momentum * v[j] + g;
        g += opt.momentum * v[j];  // Nesterov look-ahead
      }
      w[j] -= lr * g;
    }
    entry.value = Tensor(entry.value.shape(), std::move(w));
  }
}

void check_maml_width(const Architecture& arch, const MetaTrainConfig& cfg) {
  if (cfg.finetune.kind == FineTuneKind::kMamlSgd &&
      cfg.episode.n_way != arch.n_way) {
    throw InputError("meta-train: episode n_way " +
                     std::to_string(cfg.episode.n_way) +
                     " does not match the model head width " +
                     std::to_string(arch.n_way));
  }
  if (cfg.regime == Regime::kAqSupport && cfg.support_attack_pre_adapt &&
      cfg.episode.n_way != arch.n_way) {
    throw InputError(
        "meta-train: the query+support regime attacks the un-adapted model, "
        "which needs episode n_way equal to the model head width");
  }
}

}  // namespace

Regime regime_from(const std::string& name) {
  if (name == "natural") return Regime::kNatural;
  if (name == "aq") return Regime::kAq;
  if (name == "aq_support") return Regime::kAqSupport;
  if (name == "trades") return Regime::kTrades;
  throw InputError("unknown training regime '" + name +
                   "' (expected natural, aq, aq_support or trades)");
}

std::string to_string(Regime regime) {
  switch (regime) {
    case Regime::kNatural: return "natural";
    case Regime::kAq: return "aq";
    case Regime::kAqSupport: return "aq_support";
    case Regime::kTrades: return "trades";
  }
  return "?";
}

double OuterOptimizer::lr_at(std::size_t epoch) const {
  double out = lr;
  for (const auto& [boundary, value] : schedule) {
    if (epoch >= boundary) out = value;
  }
  return out;
}

void OuterOptimizer::validate() const {
  if (!std::isfinite(lr) || lr <= 0) {
    throw InputError("outer optimizer: lr must be finite and > 0");
  }
  if (!std::isfinite(momentum) || momentum < 0 || momentum >= 1) {
    throw InputError("outer optimizer: momentum must lie in [0, 1)");
  }
  if (!std::isfinite(weight_decay) || weight_decay < 0) {
    throw InputError("outer optimizer: weight_decay must be >= 0");
  }
  std::size_t prev = 0;
  bool first = true;
  for (const auto& [boundary, value] : schedule) {
    if (!first && boundary <= prev) {
      throw InputError("outer optimizer: schedule epochs must increase");
    }
    if (!std::isfinite(value) || value <= 0) {
      throw InputError("outer optimizer: scheduled lr must be > 0");
    }
    prev = boundary;
    first = false;
  }
}

void MetaTrainConfig::validate() const {
  finetune.validate();
  attack.validate();
  outer.validate();
  if (meta_batch < 1) throw InputError("meta-train: meta_batch must be >= 1");
  if (!std::isfinite(trades_inv_lambda) || trades_inv_lambda < 0) {
    throw InputError("meta-train: trades_inv_lambda must be >= 0");
  }
  if (episodes_per_epoch < 1) {
    throw InputError("meta-train: episodes_per_epoch must be >= 1");
  }
}

std::pair<ParameterSet, TrainLog> meta_train(const Architecture& arch,
                                             const MetaTrainConfig& cfg,
                                             const Dataset& data) {
  cfg.validate();
  data.validate();
  check_maml_width(arch, cfg);
  if (cfg.episodes_per_epoch % cfg.meta_batch != 0) {
    throw InputError(
        "meta-train: episodes_per_epoch must be a positive multiple of "
        "meta_batch");
  }

  Rng init_rng(derive_seed(cfg.seed, SeedTag::kSeedInit));
  ParameterSet theta = init_params(arch, init_rng);
  TrainLog log;
  Velocity velocity;
  const std::size_t outer_steps = cfg.episodes_per_epoch / cfg.meta_batch;
  std::size_t episode_idx = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    const double lr = cfg.outer.lr_at(epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t step = 0; step < outer_steps; ++step) {
      const ParameterSet snapshot = theta;
      std::vector<TaskResult> slots(cfg.meta_batch);
      parallel_for(cfg.meta_batch, cfg.threads, [&](std::size_t t) {
        slots[t] = run_task(arch, cfg, snapshot, data, episode_idx + t);
      });

      std::vector<std::vector<double>> mean_grads;
      mean_grads.reserve(theta.entries().size());
      for (const ParamEntry& e : theta.entries()) {
        mean_grads.emplace_back(e.value.size(), 0.0);
      }
      const double inv_n = 1.0 / static_cast<double>(cfg.meta_batch);
      for (std::size_t t = 0; t < cfg.meta_batch; ++t) {
        const TaskResult& r = slots[t];
        if (!r.bad.empty()) {
          throw NumericError("meta-train: non-finite " + r.bad +
                             " at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step) + ", task " +
                             std::to_string(t));
        }
        for (std::size_t i = 0; i < mean_grads.size(); ++i) {
          for (std::size_t j = 0; j < mean_grads[i].size(); ++j) {
            mean_grads[i][j] += r.grads[i][j] * inv_n;
          }
        }
        rec.mean_query_loss += r.loss;
        rec.clean_acc += r.clean_acc;
        rec.attack_success += r.attack_success;
        rec.attack_invocations += r.attack_invocations;
      }
      episode_idx += cfg.meta_batch;
      apply_update(theta, velocity, mean_grads, cfg.outer, lr);
    }
    const double n = static_cast<double>(outer_steps * cfg.meta_batch);
    rec.mean_query_loss /= n;
    rec.clean_acc /= n;
    rec.attack_success /= n;
    rec.seconds = seconds_since(start);
    log.epochs.push_back(rec);
  }
  return {std::move(theta), std::move(log)};
}

namespace {

std::pair<ParameterSet, TrainLog> train_with_regime(
    const Architecture& arch, const MetaTrainConfig& cfg, const Dataset& data,
    Regime want) {
  if (cfg.regime != want) {
    throw InputError("meta-train: config regime is " + to_string(cfg.regime) +
                     ", expected " + to_string(want));
  }
  return meta_train(arch, cfg, data);
}

}  // namespace

std::pair<ParameterSet, TrainLog> meta_train_natural(
    const Architecture& arch, const MetaTrainConfig& cfg,
    const Dataset& data) {
  return train_with_regime(arch, cfg, data, Regime::kNatural);
}

std::pair<ParameterSet, TrainLog> meta_train_aq(const Architecture& arch,
                                                const MetaTrainConfig& cfg,
                                                const Dataset& data) {
  return train_with_regime(arch, cfg, data, Regime::kAq);
}

std::pair<ParameterSet, TrainLog> meta_train_aq_support(
    const Architecture& arch, const MetaTrainConfig& cfg,
    const Dataset& data) {
  return train_with_regime(arch, cfg, data, Regime::kAqSupport);
}

std::pair<ParameterSet, TrainLog> meta_train_trades(
    const Architecture& arch, const MetaTrainConfig& cfg,
    const Dataset& data) {
  return train_with_regime(arch, cfg, data, Regime::kTrades);
}

std::pair<ParameterSet, TrainLog> adv_train_transfer(const Architecture& arch,
                                                     const MetaTrainConfig& cfg,
                                                     const Dataset& data) {
  cfg.validate();
  data.validate();
  if (data.n_classes() < 2) {
    throw InputError("transfer training: need at least 2 classes");
  }

  Architecture full = arch;
  full.n_way = data.n_classes();

  Rng init_rng(derive_seed(cfg.seed, SeedTag::kSeedInit));
  ParameterSet theta = init_params(full, init_rng);
  TrainLog log;
  Velocity velocity;

  // Merged example table in class-major order.
  const std::size_t dim = data.dim();
  std::vector<double> xs;
  std::vector<int> ys;
  xs.reserve(data.total_examples() * dim);
  for (std::size_t c = 0; c < data.n_classes(); ++c) {
    const DatasetClass& cls = data.classes[c];
    xs.insert(xs.end(), cls.data.begin(), cls.data.end());
    ys.insert(ys.end(), cls.count, static_cast<int>(c));
  }
  const std::size_t n = ys.size();
  const std::size_t batch = cfg.meta_batch;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    const double lr = cfg.outer.lr_at(epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    Rng srng(derive_seed(cfg.seed, SeedTag::kSeedShuffle, epoch));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    srng.shuffle(order);

    for (std::size_t b = 0; b < cfg.episodes_per_epoch; ++b) {
      std::vector<double> bx(batch * dim);
      std::vector<int> by(batch);
      for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t src = order[(b * batch + i) % n];
        std::copy_n(xs.begin() + src * dim, dim, bx.begin() + i * dim);
        by[i] = ys[src];
      }
      const ParameterSet snapshot = theta;
      AttackOutcome out = pgd_attack(
          snapshot_classifier(full, snapshot), Tensor({batch, dim}, bx), by,
          cfg.attack, derive_seed(cfg.seed, SeedTag::kSeedAttack, epoch, b));
      ++rec.attack_invocations;

      Graph g;
      ParamMap m = attach_params(g, snapshot);
      Tensor logits = forward_model(full, m, g.constant(out.x_adv));
      Tensor loss = cross_entropy(logits, by);
      if (!std::isfinite(loss.item())) {
        throw NumericError("transfer training: non-finite loss at epoch " +
                           std::to_string(epoch) + ", batch " +
                           std::to_string(b));
      }
      std::vector<Tensor> wrt;
      for (const ParamEntry& e : snapshot.entries()) wrt.push_back(m.at(e.name));
      const std::vector<Tensor> grads = g.gradients(loss, wrt);
      std::vector<std::vector<double>> gvals;
      gvals.reserve(grads.size());
      for (std::size_t i = 0; i < grads.size(); ++i) {
        gvals.push_back(grads[i].value());
        if (!all_finite(gvals.back())) {
          throw NumericError("transfer training: non-finite gradient of " +
                             snapshot.entries()[i].name + " at epoch " +
                             std::to_string(epoch) + ", batch " +
                             std::to_string(b));
        }
      }
      rec.mean_query_loss += loss.item();
      rec.clean_acc +=
          accuracy(forward_model(full, m, g.constant({batch, dim}, bx)), by);
      rec.attack_success += success_rate(out.success);
      apply_update(theta, velocity, gvals, cfg.outer, lr);
    }
    const double nb = static_cast<double>(cfg.episodes_per_epoch);
    rec.mean_query_loss /= nb;
    rec.clean_acc /= nb;
    rec.attack_success /= nb;
    rec.seconds = seconds_since(start);
    log.epochs.push_back(rec);
  }
  return {std::move(theta), std::move(log)};
}

}  // namespace aq
