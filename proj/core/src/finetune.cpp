#include "aq/finetune.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "aq/error.hpp"
#include "aq/rng.hpp"

namespace aq {

namespace {

bool is_head_name(const std::string& name) {
  return name.rfind("head.", 0) == 0;
}

void require_rank2(const Tensor& t, const char* what) {
  if (t.shape().size() != 2) {
    throw InputError(std::string(what) + ": expected a rank-2 tensor");
  }
}

// Ones bias column appended on the right: [B, D] -> [B, D+1].
Tensor with_bias_column(Graph& g, const Tensor& features) {
  const Shape fs = features.shape();
  Tensor ones = g.constant({fs[0], 1}, std::vector<double>(fs[0], 1.0));
  const Tensor parts[] = {features, ones};
  return concat(parts, 1);
}

std::vector<std::string> scope_names(const ParamMap& params,
                                     AdaptScope scope) {
  std::vector<std::string> names;
  for (const auto& [name, t] : params) {
    if (scope == AdaptScope::kAll || is_head_name(name)) {
      names.push_back(name);
    }
  }
  if (names.empty()) {
    throw InputError("fine-tune: no parameters selected by scope");
  }
  return names;
}

void require_finite_loss(double value, std::size_t step) {
  if (!std::isfinite(value)) {
    throw NumericError("fine-tune: non-finite support loss at inner step " +
                       std::to_string(step));
  }
}

// One plain gradient-descent step over the named parameters, on the tape.
void descend(Graph& g, ParamMap& cur, const std::vector<std::string>& names,
             const Tensor& loss, double lr) {
  std::vector<Tensor> wrt;
  wrt.reserve(names.size());
  for (const std::string& name : names) wrt.push_back(cur.at(name));
  const std::vector<Tensor> grads = g.gradients(loss, wrt);
  for (std::size_t i = 0; i < names.size(); ++i) {
    cur[names[i]] = sub(wrt[i], scale(grads[i], lr));
  }
}

AdaptedModel pack_maml(Graph&, const Architecture& arch, ParamMap cur) {
  AdaptedModel m;
  m.kind = FineTuneKind::kMamlSgd;
  m.n_way = arch.n_way;
  m.params = cur;
  m.predict = [arch, cur](const Tensor& x) {
    return forward_model(arch, cur, x);
  };
  m.frozen = snapshot_classifier(arch, snapshot_params(cur));
  return m;
}

Tensor detached_copy(const Tensor& t) { return Tensor(t.shape(), t.value()); }

}  // namespace

void FineTuneSpec::validate() const {
  if (!std::isfinite(inner_lr) || inner_lr < 0) {
    throw InputError("fine-tune spec: inner_lr must be finite and >= 0");
  }
  if (!std::isfinite(ridge_lambda) || ridge_lambda < 0) {
    throw InputError("fine-tune spec: ridge_lambda must be finite and >= 0");
  }
}

FineTuneKind finetune_kind_from(const std::string& name) {
  if (name == "maml_sgd") return FineTuneKind::kMamlSgd;
  if (name == "ridge") return FineTuneKind::kRidge;
  if (name == "proto") return FineTuneKind::kProto;
  throw InputError("fine-tune spec: unknown kind '" + name +
                   "' (expected maml_sgd, ridge or proto)");
}

std::string to_string(FineTuneKind kind) {
  switch (kind) {
    case FineTuneKind::kMamlSgd: return "maml_sgd";
    case FineTuneKind::kRidge: return "ridge";
    case FineTuneKind::kProto: return "proto";
  }
  return "?";
}

Tensor ridge_head(Graph& g, const Tensor& features, const Tensor& onehot,
                  double lambda) {
  if (!std::isfinite(lambda) || lambda < 0) {
    throw InputError("ridge fit: lambda must be finite and >= 0");
  }
  require_rank2(features, "ridge fit features");
  require_rank2(onehot, "ridge fit labels");
  if (features.shape()[0] != onehot.shape()[0]) {
    throw InputError("ridge fit: feature rows != label rows");
  }
  Tensor x = with_bias_column(g, features);
  const std::size_t d1 = x.shape()[1];
  Tensor gram = matmul(x, x, true, false);
  if (lambda > 0) {
    std::vector<double> ident(d1 * d1, 0.0);
    for (std::size_t i = 0; i < d1; ++i) ident[i * d1 + i] = lambda;
    gram = add(gram, g.constant({d1, d1}, std::move(ident)));
  }
  return solve_spd(gram, matmul(x, onehot, true, false));
}

Tensor proto_head(Graph& g, const Tensor& features,
                  const std::vector<int>& labels, std::size_t n_way) {
  require_rank2(features, "prototype fit features");
  const std::size_t b = features.shape()[0];
  if (labels.size() != b) {
    throw InputError("prototype fit: feature rows != label count");
  }
  if (n_way < 2) throw InputError("prototype fit: n_way must be >= 2");
  std::vector<std::size_t> counts(n_way, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_way) {
      throw InputError("prototype fit: label out of range");
    }
    ++counts[static_cast<std::size_t>(y)];
  }
  for (std::size_t c = 0; c < n_way; ++c) {
    if (counts[c] == 0) {
      throw InputError("prototype fit: class " + std::to_string(c) +
                       " has no support examples");
    }
  }
  std::vector<double> mean(n_way * b, 0.0);
  for (std::size_t e = 0; e < b; ++e) {
    const std::size_t c = static_cast<std::size_t>(labels[e]);
    mean[c * b + e] = 1.0 / static_cast<double>(counts[c]);
  }
  return matmul(g.constant({n_way, b}, std::move(mean)), features);
}

Tensor ridge_logits(Graph& g, const Tensor& features, const Tensor& w) {
  return matmul(with_bias_column(g, features), w);
}

Tensor proto_logits(const Tensor& features, const Tensor& prototypes) {
  const std::size_t b = features.shape()[0];
  const std::size_t n = prototypes.shape()[0];
  // -|f - c|^2 = 2 f.c - |f|^2 - |c|^2, all batched on the tape.
  Tensor cross = matmul(features, prototypes, false, true);  // [B, n]
  Tensor f2 = broadcast(reshape(sum_axis(square(features), 1), {b, 1}),
                        {b, n});
  Tensor c2 = broadcast(reshape(sum_axis(square(prototypes), 1), {1, n}),
                        {b, n});
  return sub(scale(cross, 2.0), add(f2, c2));
}

AdaptedModel finetune_maml(Graph& g, const Architecture& arch,
                           const ParamMap& params, const Tensor& support_x,
                           const std::vector<int>& support_y,
                           const FineTuneSpec& spec) {
  spec.validate();
  if (spec.kind != FineTuneKind::kMamlSgd) {
    throw InputError("gradient fine-tune called with a closed-form head spec");
  }
  const std::vector<std::string> names = scope_names(params, spec.scope);
  ParamMap cur = params;
  for (std::size_t step = 0; step < spec.inner_steps; ++step) {
    Tensor loss = cross_entropy(forward_model(arch, cur, support_x),
                                support_y);
    require_finite_loss(loss.item(), step);
    descend(g, cur, names, loss, spec.inner_lr);
  }
  return pack_maml(g, arch, std::move(cur));
}

AdaptedModel adapt(Graph& g, const Architecture& arch,
                   const FineTuneSpec& spec, const ParamMap& params,
                   const Tensor& support_x, const std::vector<int>& support_y,
                   std::size_t n_way) {
  spec.validate();
  if (spec.kind == FineTuneKind::kMamlSgd) {
    if (n_way != arch.n_way) {
      throw InputError("adapt: episode n_way " + std::to_string(n_way) +
                       " does not match the model head width " +
                       std::to_string(arch.n_way));
    }
    return finetune_maml(g, arch, params, support_x, support_y, spec);
  }

  Tensor feats = forward_backbone(arch, params, support_x);
  AdaptedModel m;
  m.kind = spec.kind;
  m.n_way = n_way;
  m.params = params;
  ParameterSet frozen_base = snapshot_params(params);

  if (spec.kind == FineTuneKind::kRidge) {
    Tensor w = ridge_head(g, feats, onehot_labels(g, support_y, n_way),
                          spec.ridge_lambda);
    Graph* gp = &g;
    m.predict = [gp, arch, params, w](const Tensor& x) {
      return ridge_logits(*gp, forward_backbone(arch, params, x), w);
    };
    Tensor w_detached = detached_copy(w);
    m.frozen = [arch, frozen_base, w_detached](Graph& gg, const Tensor& x) {
      ParamMap base = attach_constants(gg, frozen_base);
      return ridge_logits(gg, forward_backbone(arch, base, x),
                          gg.constant(w_detached));
    };
    return m;
  }

  Tensor protos = proto_head(g, feats, support_y, n_way);
  m.predict = [arch, params, protos](const Tensor& x) {
    return proto_logits(forward_backbone(arch, params, x), protos);
  };
  Tensor protos_detached = detached_copy(protos);
  m.frozen = [arch, frozen_base, protos_detached](Graph& gg, const Tensor& x) {
    ParamMap base = attach_constants(gg, frozen_base);
    return proto_logits(forward_backbone(arch, base, x),
                        gg.constant(protos_detached));
  };
  return m;
}

AdaptedModel adapt_adversarial(Graph& g, const Architecture& arch,
                               const FineTuneSpec& spec,
                               const ParamMap& params, const Tensor& support_x,
                               const std::vector<int>& support_y,
                               std::size_t n_way, const AttackConfig& attack,
                               std::uint64_t seed) {
  spec.validate();
  attack.validate();
  const Tensor clean = detached_copy(support_x);

  if (spec.kind == FineTuneKind::kMamlSgd) {
    if (n_way != arch.n_way) {
      throw InputError("adapt: episode n_way " + std::to_string(n_way) +
                       " does not match the model head width " +
                       std::to_string(arch.n_way));
    }
    const std::vector<std::string> names = scope_names(params, spec.scope);
    ParamMap cur = params;
    for (std::size_t step = 0; step < spec.inner_steps; ++step) {
      ClassifierFn now = snapshot_classifier(arch, snapshot_params(cur));
      AttackOutcome out =
          pgd_attack(now, clean, support_y, attack,
                     derive_seed(seed, SeedTag::kSeedFinetune, step));
      Tensor adv = g.constant(out.x_adv);
      Tensor loss = cross_entropy(forward_model(arch, cur, adv), support_y);
      require_finite_loss(loss.item(), step);
      descend(g, cur, names, loss, spec.inner_lr);
    }
    return pack_maml(g, arch, std::move(cur));
  }

  AdaptedModel first = adapt(g, arch, spec, params, support_x, support_y,
                             n_way);
  AttackOutcome out = pgd_attack(first.frozen, clean, support_y, attack,
                                 derive_seed(seed, SeedTag::kSeedFinetune, 0));
  return adapt(g, arch, spec, params, g.constant(out.x_adv), support_y,
               n_way);
}

ClassifierFn snapshot_classifier(const Architecture& arch,
                                 const ParameterSet& params) {
  return [arch, params](Graph& g, const Tensor& x) {
    ParamMap m = attach_constants(g, params);
    return forward_model(arch, m, x);
  };
}

ParameterSet snapshot_params(const ParamMap& params) {
  ParameterSet out;
  for (const auto& [name, t] : params) {
    out.add(name, is_head_name(name) ? ParamScope::kHead : ParamScope::kBackbone,
            detached_copy(t));
  }
  return out;
}

}  // namespace aq
