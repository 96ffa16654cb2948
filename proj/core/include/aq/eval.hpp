#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aq/attacks.hpp"
#include "aq/finetune.hpp"
#include "aq/nn.hpp"
#include "aq/tasks.hpp"

namespace aq {

// Test protocol: fine-tune on each held-out episode's support set, then
// score clean and attacked query examples against the adapted model.
struct EvalConfig {
  std::size_t n_episodes = 100;
  FineTuneSpec finetune;
  AttackConfig attack = [] {
    AttackConfig a;  // 20-step evaluation attack at 0.06 of the data range
    a.eps = 0.06;
    a.step = 0.015;
    a.steps = 20;
    return a;
  }();
  // Adversarially trained fine-tuning: perturb support during adaptation.
  bool adv_finetune = false;
  AttackConfig finetune_attack = [] {
    AttackConfig a;  // 7-step support attack used when adv_finetune is set
    a.eps = 0.06;
    a.step = 0.015;
    a.steps = 7;
    return a;
  }();
  EpisodeSpec episode;
  int threads = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

// Accuracies are exact fractions correct_count / n_samples.
struct Metrics {
  double a_nat = 0.0;
  double a_adv = 0.0;
  double stderr_bound = 0.0;
  std::size_t n_samples = 0;
};

// One standard error of a Bernoulli mean at worst-case variance:
// sqrt(0.25 / n).
double stderr_bound(std::size_t n_samples);

Metrics evaluate(const Architecture& arch, const ParameterSet& params,
                 const Dataset& test_set, const EvalConfig& cfg);

// One model to place in a comparison table.
struct CompareEntry {
  std::string name;
  ParameterSet params;
  FineTuneSpec finetune;
};

// A scored model: the plain protocol, plus the adversarially-fine-tuned
// protocol when it was requested.
struct ModelReport {
  std::string model;
  Metrics plain;
  bool has_at = false;
  Metrics at;
};

// Paired evaluation: every model sees the identical episode and attack
// seed sequence, so rows differ only through the models themselves. When
// cfg.adv_finetune is set each row also carries the AT protocol metrics.
std::vector<ModelReport> compare(const Architecture& arch,
                                 const std::vector<CompareEntry>& models,
                                 const Dataset& test_set,
                                 const EvalConfig& cfg);

}  // namespace aq
