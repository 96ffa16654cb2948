#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "aq/attacks.hpp"
#include "aq/finetune.hpp"
#include "aq/nn.hpp"
#include "aq/tasks.hpp"

namespace aq {

// Episodic training regimes: plain meta-learning, adversarial querying
// (perturb queries against the adapted model), its query+support ablation,
// and the clean-CE + weighted-KL robustness trade-off loss.
enum class Regime : std::uint8_t {
  kNatural = 0,
  kAq = 1,
  kAqSupport = 2,
  kTrades = 3,
};

Regime regime_from(const std::string& name);
std::string to_string(Regime regime);

// SGD with Nesterov momentum, decoupled-from-nothing weight decay (added to
// the gradient), and a staged learning-rate schedule keyed by epoch.
struct OuterOptimizer {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // (epoch boundary, new lr); boundaries must be increasing.
  std::vector<std::pair<std::size_t, double>> schedule = {
      {20, 0.06}, {40, 0.012}, {50, 0.0024}};

  double lr_at(std::size_t epoch) const;
  void validate() const;
};

struct MetaTrainConfig {
  Regime regime = Regime::kAq;
  FineTuneSpec finetune;
  AttackConfig attack = []{
    AttackConfig a;  // 7-step training attack at the default eval budget
    a.eps = 0.06;
    a.step = 0.015;
    a.steps = 7;
    return a;
  }();
  double trades_inv_lambda = 6.0;
  // When false, the query+support regime perturbs support against the
  // episode-adapted model instead of the not-yet-adapted base model.
  bool support_attack_pre_adapt = true;
  std::size_t meta_batch = 4;
  OuterOptimizer outer;
  std::size_t epochs = 60;
  std::size_t episodes_per_epoch = 100;  // must divide evenly by meta_batch
  EpisodeSpec episode;
  int threads = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

// The trade-off regime's attack: ascends the batch-mean KL divergence
// between the model's predictive distribution at the perturbed point and
// its (fixed) distribution at the clean point, with projected signed steps
// like the cross-entropy attacks. Rows of `clean` are [b, d]; returns the
// perturbed batch. steps = 0 returns `clean` unchanged.
std::vector<double> trades_perturb(const ClassifierFn& model,
                                   const std::vector<double>& clean,
                                   std::size_t b, std::size_t d,
                                   const AttackConfig& attack,
                                   std::uint64_t seed);

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_query_loss = 0.0;
  double clean_acc = 0.0;
  double attack_success = 0.0;
  double seconds = 0.0;
  std::size_t attack_invocations = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

// Episodic outer loop: sample meta_batch tasks, adapt each on support,
// take the regime's query loss, and apply the averaged gradient through
// the outer optimizer. Parameters start from Glorot init seeded by
// cfg.seed; identical config + seed reproduces the result bitwise at
// threads = 1 (and gradients reduce in task order at any thread count).
std::pair<ParameterSet, TrainLog> meta_train(const Architecture& arch,
                                             const MetaTrainConfig& cfg,
                                             const Dataset& data);

// Regime-checked wrappers over meta_train.
std::pair<ParameterSet, TrainLog> meta_train_natural(
    const Architecture& arch, const MetaTrainConfig& cfg, const Dataset& data);
std::pair<ParameterSet, TrainLog> meta_train_aq(const Architecture& arch,
                                                const MetaTrainConfig& cfg,
                                                const Dataset& data);
std::pair<ParameterSet, TrainLog> meta_train_aq_support(
    const Architecture& arch, const MetaTrainConfig& cfg, const Dataset& data);
std::pair<ParameterSet, TrainLog> meta_train_trades(
    const Architecture& arch, const MetaTrainConfig& cfg, const Dataset& data);

// Non-episodic baseline: adversarial minibatch training of backbone + an
// all-class linear head on the merged dataset. Here meta_batch is the
// minibatch size and episodes_per_epoch the number of minibatches per
// epoch. Returns the full parameter set; evaluation re-fits a fresh
// episodic head on the backbone.
std::pair<ParameterSet, TrainLog> adv_train_transfer(const Architecture& arch,
                                                     const MetaTrainConfig& cfg,
                                                     const Dataset& data);

}  // namespace aq
