#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "aq/attacks.hpp"
#include "aq/autodiff.hpp"
#include "aq/nn.hpp"

namespace aq {

enum class FineTuneKind : std::uint8_t { kMamlSgd = 0, kRidge = 1, kProto = 2 };
enum class AdaptScope : std::uint8_t { kAll = 0, kLastLayer = 1 };

// How a base model specializes to one episode's support set. Gradient-based
// fine-tuning runs plain SGD on the support loss; the closed-form heads fit
// a ridge regression or class prototypes on backbone features.
struct FineTuneSpec {
  FineTuneKind kind = FineTuneKind::kMamlSgd;
  std::size_t inner_steps = 10;
  double inner_lr = 0.01;
  AdaptScope scope = AdaptScope::kAll;
  double ridge_lambda = 1.0;

  void validate() const;  // InputError on negative or non-finite numbers
};

FineTuneKind finetune_kind_from(const std::string& name);
std::string to_string(FineTuneKind kind);

// An episode-specialized classifier. The payload (updated parameters, ridge
// weights, or prototypes) lives on the same tape as the base parameters, so
// gradients of any query loss flow through adaptation back to the base.
// `frozen` rebuilds the same predictor from detached values in a fresh
// graph — that is what attack construction runs against.
struct AdaptedModel {
  FineTuneKind kind = FineTuneKind::kMamlSgd;
  std::size_t n_way = 0;
  ParamMap params;  // adapted (maml) or base (ridge/proto) parameters
  std::function<Tensor(const Tensor&)> predict;  // query x -> logits
  ClassifierFn frozen;
};

// W = (X~' X~ + lambda I)^-1 X~' Y where X~ is `features` with an appended
// all-ones bias column and Y is one-hot labels. Returns [D+1, n_way].
// Differentiable w.r.t. features through the symmetric solve. A singular
// system (lambda = 0 with rank-deficient features) raises NumericError.
Tensor ridge_head(Graph& g, const Tensor& features, const Tensor& onehot,
                  double lambda);

// prototypes[c] = mean of support features with label c; [n_way, D].
// Every class must appear at least once.
Tensor proto_head(Graph& g, const Tensor& features,
                  const std::vector<int>& labels, std::size_t n_way);

// Logits for ridge / prototype predictors, given query features.
Tensor ridge_logits(Graph& g, const Tensor& features, const Tensor& w);
Tensor proto_logits(const Tensor& features, const Tensor& prototypes);

// inner_steps plain gradient-descent steps on the support cross-entropy,
// over all parameters or just the head. The update chain stays on the tape:
// outer derivatives through it are exact (second order), not approximated.
AdaptedModel finetune_maml(Graph& g, const Architecture& arch,
                           const ParamMap& params, const Tensor& support_x,
                           const std::vector<int>& support_y,
                           const FineTuneSpec& spec);

// Dispatch on spec.kind. Ridge and proto keep the backbone fixed and fit
// only their head; maml_sgd updates scope-selected parameters.
AdaptedModel adapt(Graph& g, const Architecture& arch,
                   const FineTuneSpec& spec, const ParamMap& params,
                   const Tensor& support_x, const std::vector<int>& support_y,
                   std::size_t n_way);

// Adversarially trained adaptation (test-time defense): maml_sgd perturbs
// the support set against the current inner model before every descent
// step; ridge/proto adapt cleanly once, perturb support against that
// predictor, then re-fit on the perturbed support. Perturbations enter the
// tape as constants.
AdaptedModel adapt_adversarial(Graph& g, const Architecture& arch,
                               const FineTuneSpec& spec,
                               const ParamMap& params, const Tensor& support_x,
                               const std::vector<int>& support_y,
                               std::size_t n_way, const AttackConfig& attack,
                               std::uint64_t seed);

// Rebuilds the base model from detached parameter values in the attack's
// own graph; used wherever an attack needs the un-adapted classifier.
ClassifierFn snapshot_classifier(const Architecture& arch,
                                 const ParameterSet& params);

// Detached copy of a live parameter map (scope recovered from the "head."
// name prefix).
ParameterSet snapshot_params(const ParamMap& params);

}  // namespace aq
