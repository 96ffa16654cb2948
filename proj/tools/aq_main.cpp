#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "aq/error.hpp"
#include "aq/experiment.hpp"

namespace {

// Flags mirror config keys: each one recorded here lands in the named
// [section] key after the file is read, so the effective config (and its
// hash) covers command-line overrides too.
class OverrideSet {
 public:
  void add(CLI::App* cmd, const std::string& flag, std::string section,
           std::string key, const std::string& desc) {
    auto item = std::make_unique<Item>();
    item->section = std::move(section);
    item->key = std::move(key);
    item->opt = cmd->add_option(flag, item->value, desc);
    items_.push_back(std::move(item));
  }

  void apply(aq::RawConfig& raw) const {
    for (const auto& item : items_)
      if (item->opt->count())
        aq::override_entry(raw, item->section, item->key, item->value);
  }

 private:
  struct Item {
    CLI::Option* opt = nullptr;
    std::string section, key, value;
  };
  std::vector<std::unique_ptr<Item>> items_;
};

void add_common(CLI::App* cmd, std::string& config, OverrideSet& ov) {
  cmd->add_option("-c,--config", config, "experiment config file")
      ->required();
  ov.add(cmd, "--seed", "", "seed", "master seed (overrides config)");
  ov.add(cmd, "--threads", "", "threads",
         "worker threads; 1 is bitwise deterministic");
  ov.add(cmd, "--out", "", "out_dir", "output directory");
}

// The attack knobs target [attack] while training and [eval_attack]
// everywhere else — the section whose attack the command actually runs.
void add_attack_flags(CLI::App* cmd, OverrideSet& ov,
                      const std::string& section) {
  ov.add(cmd, "--eps", section, "eps", "perturbation budget");
  ov.add(cmd, "--step", section, "step", "attack step size");
  ov.add(cmd, "--steps", section, "steps", "attack iteration count");
  ov.add(cmd, "--restarts", section, "restarts", "random restarts");
  ov.add(cmd, "--norm", section, "norm", "ball norm: linf or l2");
  ov.add(cmd, "--random-start", section, "random_start",
         "start from a random point in the ball (true/false)");
  ov.add(cmd, "--early-stop", section, "early_stop",
         "stop attacking an example once it misclassifies (true/false)");
  ov.add(cmd, "--clip", section, "clip", "clip to the data range (true/false)");
  ov.add(cmd, "--clip-lo", section, "clip_lo", "clip range lower bound");
  ov.add(cmd, "--clip-hi", section, "clip_hi", "clip range upper bound");
}

void add_finetune_flags(CLI::App* cmd, OverrideSet& ov) {
  ov.add(cmd, "--finetune-kind", "finetune", "kind",
         "maml_sgd, ridge or proto");
  ov.add(cmd, "--inner-steps", "finetune", "inner_steps",
         "gradient fine-tuning steps");
  ov.add(cmd, "--inner-lr", "finetune", "inner_lr",
         "gradient fine-tuning learning rate");
  ov.add(cmd, "--scope", "finetune", "scope",
         "fine-tune scope: all or last_layer");
  ov.add(cmd, "--ridge-lambda", "finetune", "ridge_lambda",
         "ridge regularization strength");
}

void add_eval_flags(CLI::App* cmd, OverrideSet& ov) {
  ov.add(cmd, "--n-episodes", "eval", "n_episodes", "evaluation episodes");
  ov.add(cmd, "--adv-finetune", "eval", "adv_finetune",
         "also score adversarially fine-tuned adaptation (true/false)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"episodic adversarial meta-learning workbench"};
  app.require_subcommand(1);

  struct SubState {
    CLI::App* cmd = nullptr;
    std::string config;
    std::string checkpoint;
    OverrideSet ov;
  };

  SubState train, eval, cmp, attack, gen;

  train.cmd = app.add_subcommand(
      "train", "train a model and write checkpoint + training log");
  add_common(train.cmd, train.config, train.ov);
  train.ov.add(train.cmd, "--regime", "train", "regime",
               "natural, aq, aq_support, trades or transfer");
  train.ov.add(train.cmd, "--epochs", "train", "epochs", "training epochs");
  train.ov.add(train.cmd, "--episodes-per-epoch", "train",
               "episodes_per_epoch", "episodes drawn per epoch");
  train.ov.add(train.cmd, "--meta-batch", "train", "meta_batch",
               "tasks averaged per outer step");
  train.ov.add(train.cmd, "--lr", "train", "lr", "outer learning rate");
  train.ov.add(train.cmd, "--trades-inv-lambda", "train", "trades_inv_lambda",
               "weight of the trade-off regularizer");
  add_finetune_flags(train.cmd, train.ov);
  add_attack_flags(train.cmd, train.ov, "attack");

  eval.cmd = app.add_subcommand("eval", "score a checkpoint and write metrics");
  add_common(eval.cmd, eval.config, eval.ov);
  eval.cmd->add_option("--checkpoint", eval.checkpoint, "model to score")
      ->required();
  add_eval_flags(eval.cmd, eval.ov);
  add_finetune_flags(eval.cmd, eval.ov);
  add_attack_flags(eval.cmd, eval.ov, "eval_attack");

  cmp.cmd = app.add_subcommand(
      "compare", "score every [model] block under one episode stream");
  add_common(cmp.cmd, cmp.config, cmp.ov);
  add_eval_flags(cmp.cmd, cmp.ov);
  add_attack_flags(cmp.cmd, cmp.ov, "eval_attack");

  attack.cmd = app.add_subcommand(
      "attack", "run the full attack suite against one checkpoint");
  add_common(attack.cmd, attack.config, attack.ov);
  attack.cmd->add_option("--checkpoint", attack.checkpoint, "model to attack")
      ->required();
  attack.ov.add(attack.cmd, "--transfer-source", "attack_report",
                "transfer_source",
                "surrogate checkpoint for the black-box transfer column");
  add_eval_flags(attack.cmd, attack.ov);
  add_finetune_flags(attack.cmd, attack.ov);
  add_attack_flags(attack.cmd, attack.ov, "eval_attack");

  gen.cmd = app.add_subcommand(
      "gen-data", "generate a synthetic dataset pair as FSDS files");
  add_common(gen.cmd, gen.config, gen.ov);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    for (SubState* s : {&train, &eval, &cmp, &attack, &gen}) {
      if (!s->cmd->parsed()) continue;
      aq::RawConfig raw = aq::parse_config_file(s->config);
      s->ov.apply(raw);
      aq::ExperimentConfig cfg = aq::build_experiment(raw);
      if (s == &train) return aq::cmd_train(cfg);
      if (s == &eval) return aq::cmd_eval(cfg, s->checkpoint);
      if (s == &cmp) return aq::cmd_compare(cfg);
      if (s == &attack) return aq::cmd_attack(cfg, s->checkpoint);
      return aq::cmd_gen_data(cfg);
    }
  } catch (const aq::InputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const aq::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "aborted: %s\n", e.what());
    return 3;
  }
  return 0;
}
