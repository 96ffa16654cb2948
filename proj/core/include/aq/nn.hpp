#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "aq/autodiff.hpp"
#include "aq/rng.hpp"

namespace aq {

enum class ParamScope : std::uint8_t { kBackbone = 0, kHead = 1 };

struct ParamEntry {
  std::string name;
  ParamScope scope;
  Tensor value;  // detached
};

// An ordered, named collection of detached parameter tensors. Order is
// creation order and is part of the contract: checkpoints, gradient walks
// and update loops all traverse it identically.
class ParameterSet {
public:
  void add(std::string name, ParamScope scope, Tensor value);
  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  void set(const std::string& name, Tensor value);

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<ParamEntry>& entries() { return entries_; }
  std::size_t count() const { return entries_.size(); }
  std::size_t scalar_count() const;

  ParameterSet subset(ParamScope scope) const;

private:
  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Backbone layer specs. Dense consumes a flat feature vector; Conv2d works
// on channels-last [H, W, C] images ("valid" padding, square kernel).
struct DenseSpec {
  std::size_t out = 0;
  bool relu = true;
};
struct Conv2dSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  bool relu = true;
};
using LayerSpec = std::variant<DenseSpec, Conv2dSpec>;

// Backbone = the listed layers plus a final dense projection onto
// embedding_dim; the linear head maps embeddings to n_way logits.
struct Architecture {
  Shape input_shape;  // [D] flat features, or [H, W, C] images
  std::vector<LayerSpec> layers;
  std::size_t embedding_dim = 64;
  bool embed_relu = true;
  std::size_t n_way = 5;
};

// Weight and bias shapes for each backbone layer (layers + embed projection,
// in order). Validates layer compatibility along the way.
std::vector<std::pair<Shape, Shape>> backbone_param_shapes(
    const Architecture& arch);

// Glorot-uniform weights, zero biases. Names: backbone.<i>.{w,b} for each
// backbone layer (the embed projection is the last index) and head.{w,b}.
ParameterSet init_params(const Architecture& arch, Rng& rng);

using ParamMap = std::map<std::string, Tensor>;

// Bind parameters into a graph as trainable inputs / frozen constants.
ParamMap attach_params(Graph& g, const ParameterSet& params);
ParamMap attach_constants(Graph& g, const ParameterSet& params);

const Tensor& param(const ParamMap& m, const std::string& name);

// x is [B, prod(input_shape)]; returns embeddings [B, embedding_dim].
Tensor forward_backbone(const Architecture& arch, const ParamMap& params,
                        const Tensor& x);
// logits = f W + b with head.w [E, n_way], head.b [n_way].
Tensor forward_head(const ParamMap& params, const Tensor& features);
Tensor forward_model(const Architecture& arch, const ParamMap& params,
                     const Tensor& x);

// Mean cross-entropy over the batch, built on the tape.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);
Tensor cross_entropy_onehot(const Tensor& logits, const Tensor& onehot);

Tensor onehot_labels(Graph& g, const std::vector<int>& labels,
                     std::size_t n_classes);

// Fraction of rows whose argmax equals the label (detached math).
double accuracy(const Tensor& logits, const std::vector<int>& labels);

// Binary checkpoint: magic "AQCP", version, then each entry in order with
// name, scope, shape and f64 little-endian payload.
void save_checkpoint(const std::string& path, const ParameterSet& params);
ParameterSet load_checkpoint(const std::string& path);

}  // namespace aq
