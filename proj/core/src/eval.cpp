#include "aq/eval.hpp"

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "aq/error.hpp"
#include "aq/parallel.hpp"
#include "aq/rng.hpp"

namespace aq {

namespace {

std::size_t count_correct(const Tensor& logits, const std::vector<int>& y) {
  const std::vector<int> pred = argmax_rows(logits);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (pred[i] == y[i]) ++hits;
  }
  return hits;
}

struct EpisodeScore {
  std::size_t nat_correct = 0;
  std::size_t adv_correct = 0;
  std::size_t queries = 0;
};

EpisodeScore score_episode(const Architecture& arch,
                           const ParameterSet& params, const Dataset& test_set,
                           const EvalConfig& cfg, std::size_t index) {
  Rng erng(derive_seed(cfg.seed, SeedTag::kSeedEval, index));
  Episode ep = sample_episode(test_set, cfg.episode, erng);

  Graph g;
  ParamMap m = attach_constants(g, params);
  Tensor sx = g.constant(ep.support_x);
  AdaptedModel am =
      cfg.adv_finetune
          ? adapt_adversarial(g, arch, cfg.finetune, m, sx, ep.support_y,
                              ep.n_way, cfg.finetune_attack,
                              derive_seed(cfg.seed, SeedTag::kSeedFinetune,
                                          index))
          : adapt(g, arch, cfg.finetune, m, sx, ep.support_y, ep.n_way);

  EpisodeScore score;
  score.queries = ep.query_y.size();
  score.nat_correct =
      count_correct(am.predict(g.constant(ep.query_x)), ep.query_y);

  AttackOutcome out =
      pgd_attack(am.frozen, ep.query_x, ep.query_y, cfg.attack,
                 derive_seed(cfg.seed, SeedTag::kSeedAttack, index));
  for (std::uint8_t s : out.success) {
    if (!s) ++score.adv_correct;
  }
  return score;
}

}  // namespace

void EvalConfig::validate() const {
  if (n_episodes < 1) throw InputError("eval: n_episodes must be >= 1");
  finetune.validate();
  attack.validate();
  if (adv_finetune) finetune_attack.validate();
}

double stderr_bound(std::size_t n_samples) {
  if (n_samples == 0) throw InputError("stderr_bound: n_samples must be > 0");
  return std::sqrt(0.25 / static_cast<double>(n_samples));
}

Metrics evaluate(const Architecture& arch, const ParameterSet& params,
                 const Dataset& test_set, const EvalConfig& cfg) {
  cfg.validate();
  test_set.validate();

  std::vector<EpisodeScore> slots(cfg.n_episodes);
  parallel_for(cfg.n_episodes, cfg.threads, [&](std::size_t i) {
    slots[i] = score_episode(arch, params, test_set, cfg, i);
  });

  std::size_t nat = 0, adv = 0, total = 0;
  for (const EpisodeScore& s : slots) {
    nat += s.nat_correct;
    adv += s.adv_correct;
    total += s.queries;
  }
  Metrics out;
  out.n_samples = total;
  out.a_nat = static_cast<double>(nat) / static_cast<double>(total);
  out.a_adv = static_cast<double>(adv) / static_cast<double>(total);
  out.stderr_bound = stderr_bound(total);
  return out;
}

std::vector<ModelReport> compare(const Architecture& arch,
                                 const std::vector<CompareEntry>& models,
                                 const Dataset& test_set,
                                 const EvalConfig& cfg) {
  if (models.empty()) throw InputError("compare: need at least one model");
  std::vector<ModelReport> rows;
  rows.reserve(models.size());
  for (const CompareEntry& entry : models) {
    EvalConfig per = cfg;
    per.finetune = entry.finetune;
    ModelReport row;
    row.model = entry.name;
    per.adv_finetune = false;
    row.plain = evaluate(arch, entry.params, test_set, per);
    if (cfg.adv_finetune) {
      per.adv_finetune = true;
      row.at = evaluate(arch, entry.params, test_set, per);
      row.has_at = true;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace aq
