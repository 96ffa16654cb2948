#include "aq/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "aq/error.hpp"

namespace aq {

std::size_t Dataset::total_examples() const {
  std::size_t n = 0;
  for (const auto& c : classes) n += c.count;
  return n;
}

void Dataset::validate() const {
  if (classes.empty()) throw InputError("dataset has no classes");
  const std::size_t d = dim();
  if (d == 0) throw InputError("dataset feature shape is empty");
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i].count == 0) {
      throw InputError("dataset class " + std::to_string(i) + " is empty");
    }
    if (classes[i].data.size() != classes[i].count * d) {
      throw InputError("dataset class " + std::to_string(i) +
                       " payload size mismatch");
    }
  }
}

Episode sample_episode(const Dataset& ds, const EpisodeSpec& spec, Rng& rng) {
  ds.validate();
  if (spec.n_way < 2) throw InputError("episode needs n_way >= 2");
  if (spec.k_shot == 0 || spec.q_query == 0) {
    throw InputError("episode needs k_shot >= 1 and q_query >= 1");
  }
  if (spec.n_way > ds.n_classes()) {
    throw InputError("episode wants " + std::to_string(spec.n_way) +
                     " classes, dataset has " + std::to_string(ds.n_classes()));
  }
  const std::size_t d = ds.dim();
  const std::size_t need = spec.k_shot + spec.q_query;

  Episode ep;
  ep.n_way = spec.n_way;
  ep.k_shot = spec.k_shot;
  ep.q_query = spec.q_query;
  ep.class_indices = rng.sample_without_replacement(ds.n_classes(), spec.n_way);

  std::vector<double> sx, qx;
  sx.reserve(spec.n_way * spec.k_shot * d);
  qx.reserve(spec.n_way * spec.q_query * d);
  for (std::size_t w = 0; w < spec.n_way; ++w) {
    const DatasetClass& cls = ds.classes[ep.class_indices[w]];
    if (cls.count < need) {
      throw InputError("class " + std::to_string(ep.class_indices[w]) +
                       " has " + std::to_string(cls.count) +
                       " examples, episode needs " + std::to_string(need));
    }
    const std::vector<std::size_t> pick =
        rng.sample_without_replacement(cls.count, need);
    for (std::size_t i = 0; i < need; ++i) {
      const double* row = &cls.data[pick[i] * d];
      auto& dst = i < spec.k_shot ? sx : qx;
      dst.insert(dst.end(), row, row + d);
      auto& lab = i < spec.k_shot ? ep.support_y : ep.query_y;
      lab.push_back(static_cast<int>(w));
    }
  }
  ep.support_x = Tensor({spec.n_way * spec.k_shot, d}, std::move(sx));
  ep.query_x = Tensor({spec.n_way * spec.q_query, d}, std::move(qx));
  return ep;
}

// ---- synthetic data ----

namespace {

// Uniform draw from the d-ball of the given radius: gaussian direction,
// radius scaled by U^(1/d). (Rejection from the cube collapses in high d.)
std::vector<double> ball_point(Rng& rng, std::size_t d, double radius) {
  std::vector<double> v(d);
  double norm2 = 0.0;
  for (double& x : v) {
    x = rng.gaussian();
    norm2 += x * x;
  }
  const double norm = std::sqrt(norm2);
  const double r =
      radius * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
  const double s = norm > 0.0 ? r / norm : 0.0;
  for (double& x : v) x *= s;
  return v;
}

Dataset synth_split(Rng& rng, const SyntheticSpec& spec,
                    std::size_t n_classes) {
  // Affine map onto [0,1]: features live within radius + a few sigma of the
  // origin with overwhelming probability; stragglers are clamped.
  const double extent = spec.radius + 4.0 * spec.sigma;
  Dataset ds;
  ds.feature_shape = {spec.dim};
  ds.classes.resize(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) {
    const std::vector<double> center = ball_point(rng, spec.dim, spec.radius);
    DatasetClass& cls = ds.classes[c];
    cls.count = spec.per_class;
    cls.data.resize(spec.per_class * spec.dim);
    for (std::size_t e = 0; e < spec.per_class; ++e) {
      for (std::size_t i = 0; i < spec.dim; ++i) {
        const double raw = center[i] + spec.sigma * rng.gaussian();
        double unit = (raw + extent) / (2.0 * extent);
        if (unit < 0.0) unit = 0.0;
        if (unit > 1.0) unit = 1.0;
        cls.data[e * spec.dim + i] = unit;
      }
    }
  }
  return ds;
}

}  // namespace

std::pair<Dataset, Dataset> gen_synthetic(const SyntheticSpec& spec,
                                          std::uint64_t seed) {
  if (spec.dim == 0 || spec.per_class == 0 || spec.n_train_classes == 0 ||
      spec.n_test_classes == 0) {
    throw InputError("synthetic spec has a zero dimension or count");
  }
  if (!(spec.radius > 0.0) || !(spec.sigma > 0.0)) {
    throw InputError("synthetic spec needs radius > 0 and sigma > 0");
  }
  Rng rng(derive_seed(seed, SeedTag::kSeedInit));
  Dataset train = synth_split(rng, spec, spec.n_train_classes);
  Dataset test = synth_split(rng, spec, spec.n_test_classes);
  return {std::move(train), std::move(test)};
}

// ---- FSDS binary format ----

namespace {

constexpr char kMagic[4] = {'F', 'S', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_f32(std::ostream& os, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(os, v);
}

[[noreturn]] void corrupt(const std::string& path, const std::string& why) {
  throw InputError("dataset '" + path + "': " + why);
}

std::uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) corrupt(path, "truncated");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

float get_f32(std::istream& is, const std::string& path) {
  const std::uint32_t v = get_u32(is, path);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace

void save_fsds(const std::string& path, const Dataset& ds) {
  ds.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw InputError("cannot write dataset '" + path + "'");
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(ds.n_classes()));
  put_u32(os, static_cast<std::uint32_t>(ds.feature_shape.size()));
  for (std::size_t d : ds.feature_shape) {
    put_u32(os, static_cast<std::uint32_t>(d));
  }
  const std::size_t epc = ds.classes[0].count;
  const bool uniform = std::all_of(
      ds.classes.begin(), ds.classes.end(),
      [&](const DatasetClass& c) { return c.count == epc; });
  put_u32(os, uniform ? static_cast<std::uint32_t>(epc) : 0u);
  if (!uniform) {
    for (const auto& c : ds.classes) {
      put_u32(os, static_cast<std::uint32_t>(c.count));
    }
  }
  for (const auto& c : ds.classes) {
    for (double v : c.data) put_f32(os, static_cast<float>(v));
  }
  if (!os) throw InputError("write failed for dataset '" + path + "'");
}

Dataset load_fsds(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open dataset '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    corrupt(path, "bad magic, not a dataset file");
  }
  const std::uint32_t version = get_u32(is, path);
  if (version != kVersion) {
    corrupt(path, "unsupported version " + std::to_string(version));
  }
  const std::uint32_t n_classes = get_u32(is, path);
  const std::uint32_t rank = get_u32(is, path);
  if (n_classes == 0 || n_classes > (1u << 20)) corrupt(path, "bad class count");
  if (rank == 0 || rank > 8) corrupt(path, "bad feature rank");
  Dataset ds;
  ds.feature_shape.resize(rank);
  for (auto& d : ds.feature_shape) {
    d = get_u32(is, path);
    if (d == 0) corrupt(path, "zero feature extent");
  }
  if (ds.dim() > (1u << 24)) corrupt(path, "oversized feature shape");
  const std::uint32_t epc = get_u32(is, path);
  std::vector<std::size_t> counts(n_classes, epc);
  if (epc == 0) {
    for (auto& c : counts) {
      c = get_u32(is, path);
      if (c == 0) corrupt(path, "empty class");
    }
  }
  ds.classes.resize(n_classes);
  for (std::uint32_t c = 0; c < n_classes; ++c) {
    ds.classes[c].count = counts[c];
    ds.classes[c].data.resize(counts[c] * ds.dim());
    for (double& v : ds.classes[c].data) {
      v = static_cast<double>(get_f32(is, path));
    }
  }
  char extra;
  if (is.read(&extra, 1)) corrupt(path, "trailing bytes after payload");
  ds.validate();
  return ds;
}

// ---- CSV loading ----

Dataset load_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open dataset '" + path + "'");
  auto at_line = [&](std::size_t line, const std::string& why) -> InputError {
    return InputError(path + ":" + std::to_string(line) + ": " + why);
  };

  std::map<long, std::vector<double>> by_label;
  std::size_t dim = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() < 2) {
      throw at_line(lineno, "expected `label,f0,...`, got " +
                                std::to_string(fields.size()) + " fields");
    }
    long label;
    try {
      std::size_t used = 0;
      label = std::stol(fields[0], &used);
      if (used != fields[0].size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      if (lineno == 1) continue;  // header row
      throw at_line(lineno, "label '" + fields[0] + "' is not an integer");
    }
    if (dim == 0) {
      dim = fields.size() - 1;
    } else if (fields.size() - 1 != dim) {
      throw at_line(lineno, "row has " + std::to_string(fields.size() - 1) +
                                " features, expected " + std::to_string(dim));
    }
    auto& bucket = by_label[label];
    for (std::size_t i = 1; i < fields.size(); ++i) {
      try {
        std::size_t used = 0;
        const double v = std::stod(fields[i], &used);
        if (used != fields[i].size() || !std::isfinite(v)) {
          throw std::invalid_argument("");
        }
        bucket.push_back(v);
      } catch (const std::exception&) {
        throw at_line(lineno, "feature '" + fields[i] + "' is not a number");
      }
    }
  }
  if (by_label.empty()) {
    throw InputError("dataset '" + path + "': no data rows");
  }
  Dataset ds;
  ds.feature_shape = {dim};
  for (auto& [label, data] : by_label) {
    DatasetClass c;
    c.count = data.size() / dim;
    c.data = std::move(data);
    ds.classes.push_back(std::move(c));
  }
  ds.validate();
  return ds;
}

}  // namespace aq
