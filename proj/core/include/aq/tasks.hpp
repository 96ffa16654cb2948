#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "aq/autodiff.hpp"
#include "aq/rng.hpp"

namespace aq {

// Examples for one class, stored row-major as count x dim flat features.
struct DatasetClass {
  std::size_t count = 0;
  std::vector<double> data;
};

// A labeled pool of classes; class identity is the index into `classes`.
struct Dataset {
  Shape feature_shape;  // [D] or [H,W,C]
  std::vector<DatasetClass> classes;

  std::size_t dim() const { return shape_product(feature_shape); }
  std::size_t n_classes() const { return classes.size(); }
  std::size_t total_examples() const;
  void validate() const;  // shape/sizing consistency, throws InputError
};

// One few-shot task: n_way classes, k_shot support and q_query query
// examples per class, grouped class-major. Labels are way indices.
struct Episode {
  Tensor support_x;  // [n_way*k_shot, D], detached
  std::vector<int> support_y;
  Tensor query_x;  // [n_way*q_query, D], detached
  std::vector<int> query_y;
  std::vector<std::size_t> class_indices;  // dataset class per way
  std::size_t n_way = 0, k_shot = 0, q_query = 0;
};

struct EpisodeSpec {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t q_query = 15;
};

// Draws classes without replacement, then k_shot+q_query distinct examples
// per class (first k_shot become support). Fully determined by `rng` state.
Episode sample_episode(const Dataset& ds, const EpisodeSpec& spec, Rng& rng);

// Gaussian clusters around class centers drawn uniformly from a ball, then
// mapped affinely onto [0,1] with a scale shared by both splits.
struct SyntheticSpec {
  std::size_t n_train_classes = 20;
  std::size_t n_test_classes = 10;
  std::size_t dim = 16;
  double radius = 1.0;
  // Cluster spread sized so a 0.06-budget attack can be resisted but a
  // naturally-trained model does not resist it: the regime gap is visible.
  double sigma = 0.08;
  std::size_t per_class = 50;
};

std::pair<Dataset, Dataset> gen_synthetic(const SyntheticSpec& spec,
                                          std::uint64_t seed);

// Binary dataset format: magic "FSDS", version, class/shape header, then
// f32 little-endian examples grouped by class.
void save_fsds(const std::string& path, const Dataset& ds);
Dataset load_fsds(const std::string& path);

// CSV rows are `label,f0,f1,...`; an optional header line is skipped.
// Classes are ordered by ascending label. Errors cite the offending line.
Dataset load_csv(const std::string& path);

}  // namespace aq
