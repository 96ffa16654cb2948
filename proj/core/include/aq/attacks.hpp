#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "aq/autodiff.hpp"
#include "aq/rng.hpp"

namespace aq {

enum class AttackNorm : std::uint8_t { kLinf, kL2 };

struct AttackConfig {
  double eps = 8.0 / 255.0;
  double step = 2.0 / 255.0;  // per-iteration step size
  std::size_t steps = 20;
  std::size_t restarts = 1;
  AttackNorm norm = AttackNorm::kLinf;
  bool random_start = true;
  bool early_stop = false;  // stop iterating an example once it misclassifies
  bool clip = true;
  double clip_lo = 0.0;
  double clip_hi = 1.0;

  void validate() const;  // throws InputError
};

// Builds logits [B, C] in the supplied graph for an attached input [B, D].
// Called once per attack invocation; the resulting tape is replayed across
// examples and steps.
using ClassifierFn = std::function<Tensor(Graph&, const Tensor&)>;

struct AttackOutcome {
  Tensor x_adv;  // [B, D] detached
  std::vector<std::uint8_t> success;        // x_adv misclassifies
  std::vector<std::size_t> iterations_used;  // gradient steps taken
  std::vector<double> perturbation_linf;     // max |x_adv - x| per example
  std::vector<double> final_loss;            // per-example CE at x_adv
};

// Projects delta onto the eps-ball (componentwise clamp for l-inf, radial
// rescale for l2).
void project_ball(std::vector<double>& delta, double eps, AttackNorm norm);

// Iterated signed-gradient ascent on the cross-entropy: optional random
// start in the eps-ball, `steps` steps of size `step`, projection after
// every step, optional clip to the data range, optional early stop. With
// restarts > 1 the restart with the highest final loss wins (ties keep the
// earliest), so best-of-k loss is non-decreasing in k by construction.
AttackOutcome pgd_attack(const ClassifierFn& model, const Tensor& x,
                         const std::vector<int>& y, const AttackConfig& cfg,
                         std::uint64_t seed);

// Single full-budget signed-gradient step: x + eps * sign(grad), clipped.
AttackOutcome fgsm_attack(const ClassifierFn& model, const Tensor& x,
                          const std::vector<int>& y, double eps,
                          const AttackConfig& clip_like);

// Momentum variant: g <- mu*g + grad/|grad|_1, step by sign(g). Always
// starts at x; with mu = 0 the trajectory is bitwise identical to
// pgd_attack with random_start = false.
AttackOutcome mi_fgsm_attack(const ClassifierFn& model, const Tensor& x,
                             const std::vector<int>& y,
                             const AttackConfig& cfg, double mu,
                             std::uint64_t seed);

// l-inf DeepFool: repeatedly takes the cheapest linearized step
// |f_k - f_anchor| / |grad(f_k - f_anchor)|_1 over wrong classes k until the
// prediction flips or max_iter runs out. Unbounded and unclipped; the
// perturbation_linf field reports the distance it needed. When labels are
// given, an already-misclassified example returns unchanged after 0
// iterations; with an empty label vector the anchor is the initial argmax.
AttackOutcome deepfool_linf(const ClassifierFn& model, const Tensor& x,
                            const std::vector<int>& y,
                            std::size_t max_iter = 2, double overshoot = 0.02);

// Black-box transfer: craft PGD perturbations against `source`, report
// accuracy of `target` on them.
double transfer_attack(const ClassifierFn& source, const ClassifierFn& target,
                       const Tensor& x, const std::vector<int>& y,
                       const AttackConfig& cfg, std::uint64_t seed);

}  // namespace aq
