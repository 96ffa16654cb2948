#include "aq/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "aq/error.hpp"

namespace aq {

// ---- ParameterSet ----

void ParameterSet::add(std::string name, ParamScope scope, Tensor value) {
  if (index_.count(name)) {
    throw InputError("parameter '" + name + "' already exists");
  }
  index_[name] = entries_.size();
  entries_.push_back({std::move(name), scope, value.detach()});
}

bool ParameterSet::has(const std::string& name) const {
  return index_.count(name) != 0;
}

const Tensor& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InputError("unknown parameter '" + name + "'");
  return entries_[it->second].value;
}

void ParameterSet::set(const std::string& name, Tensor value) {
  auto it = index_.find(name);
  if (it == index_.end()) throw InputError("unknown parameter '" + name + "'");
  ParamEntry& e = entries_[it->second];
  if (value.shape() != e.value.shape()) {
    throw InputError("parameter '" + name + "' shape mismatch: " +
                     shape_str(e.value.shape()) + " vs " +
                     shape_str(value.shape()));
  }
  e.value = value.detach();
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

ParameterSet ParameterSet::subset(ParamScope scope) const {
  ParameterSet out;
  for (const auto& e : entries_) {
    if (e.scope == scope) out.add(e.name, e.scope, e.value);
  }
  return out;
}

// ---- architecture ----

namespace {

struct FlowShape {
  bool spatial = false;
  std::size_t h = 0, w = 0, c = 0;  // when spatial
  std::size_t flat = 0;             // when dense

  std::size_t flattened() const { return spatial ? h * w * c : flat; }
};

FlowShape input_flow(const Architecture& arch) {
  FlowShape f;
  if (arch.input_shape.size() == 1) {
    f.flat = arch.input_shape[0];
  } else if (arch.input_shape.size() == 3) {
    f.spatial = true;
    f.h = arch.input_shape[0];
    f.w = arch.input_shape[1];
    f.c = arch.input_shape[2];
  } else {
    throw InputError("architecture input_shape must be [D] or [H,W,C], got " +
                     shape_str(arch.input_shape));
  }
  if (shape_product(arch.input_shape) == 0) {
    throw InputError("architecture input_shape has a zero extent");
  }
  return f;
}

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t s,
                     std::size_t layer) {
  if (k == 0 || s == 0 || in < k) {
    throw InputError("conv layer " + std::to_string(layer) +
                     ": kernel/stride " + std::to_string(k) + "/" +
                     std::to_string(s) + " invalid for spatial extent " +
                     std::to_string(in));
  }
  return (in - k) / s + 1;
}

}  // namespace

std::vector<std::pair<Shape, Shape>> backbone_param_shapes(
    const Architecture& arch) {
  std::vector<std::pair<Shape, Shape>> out;
  FlowShape f = input_flow(arch);
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    if (const auto* d = std::get_if<DenseSpec>(&arch.layers[i])) {
      if (d->out == 0) {
        throw InputError("dense layer " + std::to_string(i) + ": zero width");
      }
      out.push_back({Shape{f.flattened(), d->out}, Shape{d->out}});
      f = FlowShape{.flat = d->out};
    } else {
      const auto& c = std::get<Conv2dSpec>(arch.layers[i]);
      if (!f.spatial) {
        throw InputError("conv layer " + std::to_string(i) +
                         " needs a spatial input");
      }
      if (c.out_channels == 0) {
        throw InputError("conv layer " + std::to_string(i) + ": zero channels");
      }
      const std::size_t oh = conv_out(f.h, c.kernel, c.stride, i);
      const std::size_t ow = conv_out(f.w, c.kernel, c.stride, i);
      out.push_back(
          {Shape{c.kernel * c.kernel * f.c, c.out_channels}, Shape{c.out_channels}});
      f = FlowShape{.spatial = true, .h = oh, .w = ow, .c = c.out_channels};
    }
  }
  if (arch.embedding_dim == 0) throw InputError("embedding_dim must be > 0");
  out.push_back({Shape{f.flattened(), arch.embedding_dim},
                 Shape{arch.embedding_dim}});
  return out;
}

ParameterSet init_params(const Architecture& arch, Rng& rng) {
  if (arch.n_way < 2) throw InputError("n_way must be at least 2");
  ParameterSet ps;
  auto glorot = [&](const Shape& ws) {
    const double limit =
        std::sqrt(6.0 / static_cast<double>(ws[0] + ws[1]));
    std::vector<double> v(shape_product(ws));
    for (double& x : v) x = rng.uniform(-limit, limit);
    return Tensor(ws, std::move(v));
  };
  const auto shapes = backbone_param_shapes(arch);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const std::string base = "backbone." + std::to_string(i) + ".";
    ps.add(base + "w", ParamScope::kBackbone, glorot(shapes[i].first));
    ps.add(base + "b", ParamScope::kBackbone, Tensor::zeros(shapes[i].second));
  }
  ps.add("head.w", ParamScope::kHead,
         glorot(Shape{arch.embedding_dim, arch.n_way}));
  ps.add("head.b", ParamScope::kHead, Tensor::zeros(Shape{arch.n_way}));
  return ps;
}

ParamMap attach_params(Graph& g, const ParameterSet& params) {
  ParamMap m;
  for (const auto& e : params.entries()) {
    m.emplace(e.name, g.input(e.name, e.value));
  }
  return m;
}

ParamMap attach_constants(Graph& g, const ParameterSet& params) {
  ParamMap m;
  for (const auto& e : params.entries()) {
    m.emplace(e.name, g.constant(e.value));
  }
  return m;
}

const Tensor& param(const ParamMap& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw InputError("unknown parameter '" + name + "'");
  return it->second;
}

// ---- forward passes ----

namespace {

// slice with an output stride along one axis (concatenating unit slices when
// stride > 1; contiguous slice otherwise).
Tensor strided_window(const Tensor& t, std::size_t axis, std::size_t offset,
                      std::size_t out, std::size_t stride) {
  if (stride == 1) return slice(t, axis, offset, out);
  std::vector<Tensor> parts;
  parts.reserve(out);
  for (std::size_t i = 0; i < out; ++i) {
    parts.push_back(slice(t, axis, offset + i * stride, 1));
  }
  return concat(parts, axis);
}

Tensor dense_apply(const Tensor& x, const Tensor& w, const Tensor& b,
                   bool apply_relu) {
  Tensor y = matmul(x, w);
  y = add(y, broadcast(b, y.shape()));
  return apply_relu ? relu(y) : y;
}

}  // namespace

Tensor forward_backbone(const Architecture& arch, const ParamMap& params,
                        const Tensor& x) {
  const Shape xs = x.shape();
  const std::size_t dim = shape_product(arch.input_shape);
  if (xs.size() != 2 || xs[1] != dim) {
    throw InputError("backbone expects input [batch, " + std::to_string(dim) +
                     "], got " + shape_str(xs));
  }
  const std::size_t batch = xs[0];

  FlowShape f = input_flow(arch);
  Tensor cur = x;
  if (f.spatial) cur = reshape(cur, {batch, f.h, f.w, f.c});

  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const std::string base = "backbone." + std::to_string(i) + ".";
    const Tensor& w = param(params, base + "w");
    const Tensor& b = param(params, base + "b");
    if (const auto* d = std::get_if<DenseSpec>(&arch.layers[i])) {
      if (f.spatial) {
        cur = reshape(cur, {batch, f.flattened()});
        f = FlowShape{.flat = f.flattened()};
      }
      cur = dense_apply(cur, w, b, d->relu);
      f.flat = d->out;
    } else {
      const auto& c = std::get<Conv2dSpec>(arch.layers[i]);
      const std::size_t oh = conv_out(f.h, c.kernel, c.stride, i);
      const std::size_t ow = conv_out(f.w, c.kernel, c.stride, i);
      // im2col, channels-last: patch feature index is (ky*K + kx)*C + cin.
      std::vector<Tensor> patches;
      patches.reserve(c.kernel * c.kernel);
      for (std::size_t ky = 0; ky < c.kernel; ++ky) {
        Tensor rows = strided_window(cur, 1, ky, oh, c.stride);
        for (std::size_t kx = 0; kx < c.kernel; ++kx) {
          patches.push_back(strided_window(rows, 2, kx, ow, c.stride));
        }
      }
      Tensor cols = concat(patches, 3);  // [B, OH, OW, K*K*C]
      cols = reshape(cols, {batch * oh * ow, c.kernel * c.kernel * f.c});
      Tensor y = dense_apply(cols, w, b, c.relu);
      cur = reshape(y, {batch, oh, ow, c.out_channels});
      f = FlowShape{.spatial = true, .h = oh, .w = ow, .c = c.out_channels};
    }
  }
  if (f.spatial) {
    cur = reshape(cur, {batch, f.flattened()});
    f = FlowShape{.flat = f.flattened()};
  }
  const std::string base = "backbone." + std::to_string(arch.layers.size()) + ".";
  return dense_apply(cur, param(params, base + "w"), param(params, base + "b"),
                     arch.embed_relu);
}

Tensor forward_head(const ParamMap& params, const Tensor& features) {
  return dense_apply(features, param(params, "head.w"), param(params, "head.b"),
                     false);
}

Tensor forward_model(const Architecture& arch, const ParamMap& params,
                     const Tensor& x) {
  return forward_head(params, forward_backbone(arch, params, x));
}

// ---- losses and metrics ----

Tensor onehot_labels(Graph& g, const std::vector<int>& labels,
                     std::size_t n_classes) {
  std::vector<double> oh(labels.size() * n_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes) {
      throw InputError("label " + std::to_string(labels[i]) +
                       " out of range for " + std::to_string(n_classes) +
                       " classes");
    }
    oh[i * n_classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return g.constant({labels.size(), n_classes}, std::move(oh));
}

Tensor cross_entropy_onehot(const Tensor& logits, const Tensor& onehot) {
  const Shape s = logits.shape();
  if (s.size() != 2 || onehot.shape() != s) {
    throw InputError("cross_entropy: logits " + shape_str(s) +
                     " vs one-hot " + shape_str(onehot.shape()));
  }
  Tensor lse = sum_all(logsumexp(logits, 1));
  Tensor picked = sum_all(mul(logits, onehot));
  return scale(sub(lse, picked), 1.0 / static_cast<double>(s[0]));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (!logits.attached()) {
    throw InputError("cross_entropy: logits must be graph-attached");
  }
  const Shape s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size()) {
    throw InputError("cross_entropy: logits " + shape_str(s) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  return cross_entropy_onehot(
      logits, onehot_labels(*logits.graph(), labels, s[1]));
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  const std::vector<int> pred = argmax_rows(logits);
  if (pred.size() != labels.size()) {
    throw InputError("accuracy: batch size mismatch");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == labels[i]) ++hit;
  }
  return labels.empty() ? 0.0
                        : static_cast<double>(hit) /
                              static_cast<double>(labels.size());
}

// ---- checkpoint I/O ----

namespace {

constexpr char kMagic[4] = {'A', 'Q', 'C', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff),
                     static_cast<char>((v >> 8) & 0xff)};
  os.write(b, 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_f64(std::ostream& os, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

[[noreturn]] void corrupt(const std::string& path, const std::string& why) {
  throw InputError("checkpoint '" + path + "': " + why);
}

std::uint16_t get_u16(std::istream& is, const std::string& path) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2)) corrupt(path, "truncated");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) corrupt(path, "truncated");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

double get_f64(std::istream& is, const std::string& path) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) corrupt(path, "truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParameterSet& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw InputError("cannot write checkpoint '" + path + "'");
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(params.count()));
  for (const auto& e : params.entries()) {
    if (e.name.size() > 0xffff) corrupt(path, "parameter name too long");
    put_u16(os, static_cast<std::uint16_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    os.put(static_cast<char>(e.scope));
    const Shape s = e.value.shape();
    if (s.size() > 0xff) corrupt(path, "parameter rank too large");
    os.put(static_cast<char>(s.size()));
    for (std::size_t d : s) put_u32(os, static_cast<std::uint32_t>(d));
    const std::vector<double> v = e.value.value();
    for (double d : v) put_f64(os, d);
  }
  if (!os) throw InputError("write failed for checkpoint '" + path + "'");
}

ParameterSet load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    corrupt(path, "bad magic, not a checkpoint file");
  }
  const std::uint32_t version = get_u32(is, path);
  if (version != kVersion) {
    corrupt(path, "unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = get_u32(is, path);
  ParameterSet ps;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = get_u16(is, path);
    std::string name(len, '\0');
    if (len == 0 || !is.read(name.data(), len)) corrupt(path, "bad entry name");
    const int scope = is.get();
    if (scope != 0 && scope != 1) corrupt(path, "bad scope byte");
    const int rank = is.get();
    if (rank < 0 || rank > 8) corrupt(path, "bad rank");
    Shape shape(static_cast<std::size_t>(rank));
    for (auto& d : shape) d = get_u32(is, path);
    const std::size_t n = shape_product(shape);
    if (n > (1u << 26)) corrupt(path, "oversized tensor");
    std::vector<double> v(n);
    for (double& d : v) d = get_f64(is, path);
    ps.add(std::move(name), static_cast<ParamScope>(scope),
           Tensor(std::move(shape), std::move(v)));
  }
  return ps;
}

}  // namespace aq
