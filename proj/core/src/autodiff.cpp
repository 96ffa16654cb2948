#include "aq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace aq {

std::size_t shape_product(const Shape& s) {
  std::size_t p = 1;
  for (std::size_t d : s) p *= d;
  return p;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMatmul: return "matmul";
    case Op::kRelu: return "relu";
    case Op::kGtz: return "gtz";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSquare: return "square";
    case Op::kSqrt: return "sqrt";
    case Op::kSumAll: return "sum_all";
    case Op::kSumAxis: return "sum_axis";
    case Op::kMaxAxis: return "max_axis";
    case Op::kOnehotArgmax: return "onehot_argmax";
    case Op::kBroadcast: return "broadcast";
    case Op::kSumTo: return "sum_to";
    case Op::kReshape: return "reshape";
    case Op::kSlice: return "slice";
    case Op::kPad: return "pad";
    case Op::kConcat: return "concat";
    case Op::kSolveSpd: return "solve_spd";
  }
  return "?";
}

namespace {

std::string node_label(Op op, NodeId id, const std::string& name) {
  std::ostringstream os;
  os << op_name(op) << "#" << id;
  if (!name.empty()) os << " '" << name << "'";
  return os.str();
}

[[noreturn]] void fail(const std::string& msg) { throw InputError(msg); }

// Maps a flat index in `to` onto a flat index in `from`, where `from` is
// broadcast-compatible with `to` (trailing-aligned, extent-1 axes expand).
struct BroadcastMap {
  std::vector<std::size_t> to_dims;
  std::vector<std::size_t> from_strides;  // per to-axis; 0 on expanded axes

  BroadcastMap(const Shape& from, const Shape& to) {
    const std::size_t rt = to.size(), rf = from.size();
    to_dims = to;
    from_strides.assign(rt, 0);
    std::size_t stride = 1;
    for (std::size_t i = rf; i-- > 0;) {
      const std::size_t t_axis = i + (rt - rf);
      if (from[i] != 1) from_strides[t_axis] = stride;
      stride *= from[i];
    }
  }

  std::size_t map(std::size_t to_flat) const {
    std::size_t from_flat = 0;
    for (std::size_t a = to_dims.size(); a-- > 0;) {
      const std::size_t coord = to_flat % to_dims[a];
      to_flat /= to_dims[a];
      from_flat += coord * from_strides[a];
    }
    return from_flat;
  }
};

bool broadcastable(const Shape& from, const Shape& to) {
  if (from.size() > to.size()) return false;
  const std::size_t off = to.size() - from.size();
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i] != 1 && from[i] != to[i + off]) return false;
  }
  return true;
}

// Cholesky solve of A X = B for symmetric positive definite A.
void spd_solve(const std::vector<double>& a, std::size_t n,
               const std::vector<double>& b, std::size_t m,
               std::vector<double>& out) {
  std::vector<double> l(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= l[j * n + k] * l[j * n + k];
    if (!(d > 1e-12 * std::max(1.0, std::abs(a[j * n + j])))) {
      throw NumericError("solve_spd: matrix not positive definite (singular system)");
    }
    const double lj = std::sqrt(d);
    l[j * n + j] = lj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = s / lj;
    }
  }
  out.assign(n * m, 0.0);
  std::vector<double> y(n);
  for (std::size_t c = 0; c < m; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = b[i * m + c];
      for (std::size_t k = 0; k < i; ++k) s -= l[i * n + k] * y[k];
      y[i] = s / l[i * n + i];
    }
    for (std::size_t i = n; i-- > 0;) {
      double s = y[i];
      for (std::size_t k = i + 1; k < n; ++k) s -= l[k * n + i] * out[k * m + c];
      out[i * m + c] = s / l[i * n + i];
    }
  }
}

void reduce_dims(const Shape& s, std::size_t axis, std::size_t& outer,
                 std::size_t& n, std::size_t& inner) {
  outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  n = s[axis];
  inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace

// ---- Tensor ----

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    fail("tensor: shape " + shape_str(shape_) + " does not match payload of " +
         std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, {v}); }

Tensor Tensor::zeros(Shape shape) {
  std::vector<double> d(shape_product(shape), 0.0);
  return Tensor(std::move(shape), std::move(d));
}

Tensor Tensor::full(Shape shape, double v) {
  std::vector<double> d(shape_product(shape), v);
  return Tensor(std::move(shape), std::move(d));
}

Shape Tensor::shape() const {
  if (attached()) return graph_->node(node_).shape;
  return shape_;
}

std::vector<double> Tensor::value() const {
  if (attached()) return graph_->node(node_).value;
  return data_;
}

Tensor Tensor::detach() const { return Tensor(shape(), value()); }

double Tensor::item() const {
  const auto& v = value();
  if (v.size() != 1) {
    fail("item: tensor " + shape_str(shape()) + " is not a scalar");
  }
  return v[0];
}

// ---- Graph: validation and shape inference ----

void Graph::check_node(const Node& n) const {
  auto in_shape = [&](std::size_t i) -> const Shape& {
    return nodes_[n.inputs[i]].shape;
  };
  auto expect = [&](bool ok, const std::string& msg) {
    if (!ok) {
      fail(std::string(op_name(n.op)) + "#" + std::to_string(nodes_.size()) +
           ": " + msg);
    }
  };
  switch (n.op) {
    case Op::kInput:
    case Op::kConstant:
      expect(shape_product(n.shape) == n.value.size(), "payload/shape mismatch");
      break;
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDiv:
      expect(in_shape(0) == in_shape(1),
             "shape mismatch " + shape_str(in_shape(0)) + " vs " +
                 shape_str(in_shape(1)));
      break;
    case Op::kScale:
    case Op::kAddScalar:
    case Op::kRelu:
    case Op::kGtz:
    case Op::kExp:
    case Op::kLog:
    case Op::kSquare:
    case Op::kSqrt:
    case Op::kSumAll:
      break;
    case Op::kMatmul: {
      expect(in_shape(0).size() == 2 && in_shape(1).size() == 2,
             "operands must be 2-D");
      const std::size_t ak = n.trans_a ? in_shape(0)[0] : in_shape(0)[1];
      const std::size_t bk = n.trans_b ? in_shape(1)[1] : in_shape(1)[0];
      expect(ak == bk, "inner dimensions disagree: " + shape_str(in_shape(0)) +
                           (n.trans_a ? "^T" : "") + " x " +
                           shape_str(in_shape(1)) + (n.trans_b ? "^T" : ""));
      break;
    }
    case Op::kSumAxis:
    case Op::kMaxAxis:
    case Op::kOnehotArgmax:
      expect(n.axis < in_shape(0).size(), "axis out of range");
      break;
    case Op::kBroadcast:
      expect(broadcastable(in_shape(0), n.shape),
             "cannot broadcast " + shape_str(in_shape(0)) + " to " +
                 shape_str(n.shape));
      break;
    case Op::kSumTo:
      expect(broadcastable(n.shape, in_shape(0)),
             "cannot reduce " + shape_str(in_shape(0)) + " to " +
                 shape_str(n.shape));
      break;
    case Op::kReshape:
      expect(shape_product(n.shape) == shape_product(in_shape(0)),
             "element count mismatch " + shape_str(in_shape(0)) + " -> " +
                 shape_str(n.shape));
      break;
    case Op::kSlice:
      expect(n.axis < in_shape(0).size(), "axis out of range");
      expect(n.len >= 1 && n.start + n.len <= in_shape(0)[n.axis],
             "slice [" + std::to_string(n.start) + "," +
                 std::to_string(n.start + n.len) + ") exceeds extent " +
                 std::to_string(in_shape(0)[n.axis]));
      break;
    case Op::kPad:
      expect(n.axis < in_shape(0).size(), "axis out of range");
      break;
    case Op::kConcat: {
      expect(!n.inputs.empty(), "needs at least one input");
      const Shape& s0 = in_shape(0);
      expect(n.axis < s0.size(), "axis out of range");
      for (std::size_t i = 1; i < n.inputs.size(); ++i) {
        const Shape& si = in_shape(i);
        bool ok = si.size() == s0.size();
        for (std::size_t a = 0; ok && a < s0.size(); ++a) {
          if (a != n.axis && si[a] != s0[a]) ok = false;
        }
        expect(ok, "input " + std::to_string(i) + " shape " + shape_str(si) +
                       " incompatible with " + shape_str(s0));
      }
      break;
    }
    case Op::kSolveSpd: {
      const Shape& a = in_shape(0);
      const Shape& b = in_shape(1);
      expect(a.size() == 2 && a[0] == a[1], "matrix must be square");
      expect(b.size() == 2 && b[0] == a[0],
             "rhs shape " + shape_str(b) + " incompatible with " + shape_str(a));
      break;
    }
  }
}

Shape Graph::infer_shape(const Node& n) const {
  auto in_shape = [&](std::size_t i) -> const Shape& {
    return nodes_[n.inputs[i]].shape;
  };
  switch (n.op) {
    case Op::kInput:
    case Op::kConstant:
    case Op::kBroadcast:
    case Op::kSumTo:
    case Op::kReshape:
      return n.shape;
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDiv:
    case Op::kScale:
    case Op::kAddScalar:
    case Op::kRelu:
    case Op::kGtz:
    case Op::kExp:
    case Op::kLog:
    case Op::kSquare:
    case Op::kSqrt:
    case Op::kOnehotArgmax:
      return in_shape(0);
    case Op::kMatmul: {
      const std::size_t m = n.trans_a ? in_shape(0)[1] : in_shape(0)[0];
      const std::size_t c = n.trans_b ? in_shape(1)[0] : in_shape(1)[1];
      return Shape{m, c};
    }
    case Op::kSumAll:
      return Shape{};
    case Op::kSumAxis:
    case Op::kMaxAxis: {
      Shape s = in_shape(0);
      s[n.axis] = 1;
      return s;
    }
    case Op::kSlice: {
      Shape s = in_shape(0);
      s[n.axis] = n.len;
      return s;
    }
    case Op::kPad: {
      Shape s = in_shape(0);
      s[n.axis] += n.start + n.len;
      return s;
    }
    case Op::kConcat: {
      Shape s = in_shape(0);
      for (std::size_t i = 1; i < n.inputs.size(); ++i) {
        s[n.axis] += in_shape(i)[n.axis];
      }
      return s;
    }
    case Op::kSolveSpd:
      return in_shape(1);
  }
  return {};
}

// ---- Graph: kernels ----

void Graph::compute_into(const Node& n, std::span<const std::vector<double>*> in,
                         std::vector<double>& out) const {
  const std::size_t count = shape_product(n.shape);
  switch (n.op) {
    case Op::kInput:
    case Op::kConstant:
      out = n.value;
      return;
    case Op::kAdd: {
      const auto &a = *in[0], &b = *in[1];
      out.resize(count);
      for (std::size_t i = 0; i < count; ++i) out[i] = a[i] + b[i];
      return;
    }
    case Op::kSub: {
      const auto &a = *in[0], &b = *in[1];
      out.resize(count);
      for (std::size_t i = 0; i < count; ++i) out[i] = a[i] - b[i];
      return;
    }
    case Op::kMul: {
      const auto &a = *in[0], &b = *in[1];
      out.resize(count);
      for (std::size_t i = 0; i < count; ++i) out[i] = a[i] * b[i];
      return;
    }
    case Op::kDiv: {
      const auto &a = *in[0], &b = *in[1];
      out.resize(count);
      for (std::size_t i = 0; i < count; ++i) out[i] = a[i] / b[i];
      return;
    }
    case Op::kScale: {
      const auto& a = *in[0];
      out.resize(count);
      for (std::size_t i = 0; i < count; ++i) out[i] = a[i] * n.attr;
      return;
    }
    case Op::kAddScalar: {
      const auto& a = *in[0];
      out.resize(count);
      for (std::size_t i = 0; i < count; ++i) out[i] = a[i] + n.attr;
      return;
    }
    case Op::kMatmul: {
      const auto &a = *in[0], &b = *in[1];
      const Shape& sa = nodes_[n.inputs[0]].shape;
      const Shape& sb = nodes_[n.inputs[1]].shape;
      const std::size_t m = n.shape[0], c = n.shape[1];
      const std::size_t k = n.trans_a ? sa[0] : sa[1];
      out.assign(count, 0.0);
      auto at_a = [&](std::size_t i, std::size_t l) {
        return n.trans_a ? a[l * sa[1] + i] : a[i * sa[1] + l];
      };
      auto at_b = [&](std::size_t l, std::size_t j) {
        return n.trans_b ? b[j * sb[1] + l] : b[l * sb[1] + j];
      };
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
          const double av = at_a(i, l);
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] += av * at_b(l, j);
          }
        }
      }
      return;
    }
    case Op::kRelu: {
      const auto& a = *in[0];
      out.resize(count);
      for (std::size_t i = 0; i < count; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
      return;
    }
    case Op::kGtz: {
      const auto& a = *in[0];
      out.resize(count);
      for (std::size_t i = 0; i < count; ++i) out[i] = a[i] > 0.0 ? 1.0 : 0.0;
      return;
    }
    case Op::kExp: {
      const auto& a = *in[0];
      out.resize(count);
      for (std::size_t i = 0; i < count; ++i) out[i] = std::exp(a[i]);
      return;
    }
    case Op::kLog: {
      const auto& a = *in[0];
      out.resize(count);
      for (std::size_t i = 0; i < count; ++i) out[i] = std::log(a[i]);
      return;
    }
    case Op::kSquare: {
      const auto& a = *in[0];
      out.resize(count);
      for (std::size_t i = 0; i < count; ++i) out[i] = a[i] * a[i];
      return;
    }
    case Op::kSqrt: {
      const auto& a = *in[0];
      out.resize(count);
      for (std::size_t i = 0; i < count; ++i) out[i] = std::sqrt(a[i]);
      return;
    }
    case Op::kSumAll: {
      const auto& a = *in[0];
      double s = 0.0;
      for (double v : a) s += v;
      out.assign(1, s);
      return;
    }
    case Op::kSumAxis: {
      const auto& a = *in[0];
      std::size_t outer, len, inner;
      reduce_dims(nodes_[n.inputs[0]].shape, n.axis, outer, len, inner);
      out.assign(outer * inner, 0.0);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t base = (o * len + j) * inner;
          for (std::size_t i = 0; i < inner; ++i) {
            out[o * inner + i] += a[base + i];
          }
        }
      }
      return;
    }
    case Op::kMaxAxis: {
      const auto& a = *in[0];
      std::size_t outer, len, inner;
      reduce_dims(nodes_[n.inputs[0]].shape, n.axis, outer, len, inner);
      out.resize(outer * inner);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          double best = a[o * len * inner + i];
          for (std::size_t j = 1; j < len; ++j) {
            const double v = a[(o * len + j) * inner + i];
            if (v > best) best = v;  // strict: ties keep the lowest index
          }
          out[o * inner + i] = best;
        }
      }
      return;
    }
    case Op::kOnehotArgmax: {
      const auto& a = *in[0];
      std::size_t outer, len, inner;
      reduce_dims(nodes_[n.inputs[0]].shape, n.axis, outer, len, inner);
      out.assign(count, 0.0);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          std::size_t arg = 0;
          double best = a[o * len * inner + i];
          for (std::size_t j = 1; j < len; ++j) {
            const double v = a[(o * len + j) * inner + i];
            if (v > best) {
              best = v;
              arg = j;
            }
          }
          out[(o * len + arg) * inner + i] = 1.0;
        }
      }
      return;
    }
    case Op::kBroadcast: {
      const auto& a = *in[0];
      BroadcastMap bm(nodes_[n.inputs[0]].shape, n.shape);
      out.resize(count);
      for (std::size_t i = 0; i < count; ++i) out[i] = a[bm.map(i)];
      return;
    }
    case Op::kSumTo: {
      const auto& a = *in[0];
      const Shape& from = nodes_[n.inputs[0]].shape;
      BroadcastMap bm(n.shape, from);
      out.assign(count, 0.0);
      const std::size_t an = shape_product(from);
      for (std::size_t i = 0; i < an; ++i) out[bm.map(i)] += a[i];
      return;
    }
    case Op::kReshape: {
      out = *in[0];
      return;
    }
    case Op::kSlice: {
      const auto& a = *in[0];
      std::size_t outer, len, inner;
      reduce_dims(nodes_[n.inputs[0]].shape, n.axis, outer, len, inner);
      out.resize(count);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < n.len; ++j) {
          const double* src = &a[(o * len + n.start + j) * inner];
          double* dst = &out[(o * n.len + j) * inner];
          std::copy(src, src + inner, dst);
        }
      }
      return;
    }
    case Op::kPad: {
      const auto& a = *in[0];
      std::size_t outer, len, inner;
      reduce_dims(nodes_[n.inputs[0]].shape, n.axis, outer, len, inner);
      const std::size_t padded = n.start + len + n.len;
      out.assign(count, 0.0);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < len; ++j) {
          const double* src = &a[(o * len + j) * inner];
          double* dst = &out[(o * padded + n.start + j) * inner];
          std::copy(src, src + inner, dst);
        }
      }
      return;
    }
    case Op::kConcat: {
      std::size_t outer, len0, inner;
      reduce_dims(n.shape, n.axis, outer, len0, inner);
      out.resize(count);
      std::size_t offset = 0;
      for (std::size_t p = 0; p < n.inputs.size(); ++p) {
        const auto& a = *in[p];
        const std::size_t lp = nodes_[n.inputs[p]].shape[n.axis];
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < lp; ++j) {
            const double* src = &a[(o * lp + j) * inner];
            double* dst = &out[(o * len0 + offset + j) * inner];
            std::copy(src, src + inner, dst);
          }
        }
        offset += lp;
      }
      return;
    }
    case Op::kSolveSpd: {
      const Shape& sb = nodes_[n.inputs[1]].shape;
      spd_solve(*in[0], sb[0], *in[1], sb[1], out);
      return;
    }
  }
}

// ---- Graph: construction ----

NodeId Graph::emit(Node n) {
  for (NodeId in : n.inputs) {
    if (in >= nodes_.size()) fail("emit: dangling input node reference");
  }
  check_node(n);
  if (n.op != Op::kInput && n.op != Op::kConstant) {
    n.shape = infer_shape(n);
    std::vector<const std::vector<double>*> in_vals;
    in_vals.reserve(n.inputs.size());
    for (NodeId id : n.inputs) in_vals.push_back(&nodes_[id].value);
    compute_into(n, in_vals, n.value);
  }
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

Tensor Graph::input(const std::string& name, Shape shape,
                    std::vector<double> data) {
  if (name.empty()) fail("input: name required");
  if (inputs_.count(name)) fail("input: duplicate name '" + name + "'");
  Node n;
  n.op = Op::kInput;
  n.shape = std::move(shape);
  n.value = std::move(data);
  n.name = name;
  const NodeId id = emit(std::move(n));
  inputs_[name] = id;
  return Tensor(this, id);
}

Tensor Graph::input(const std::string& name, const Tensor& init) {
  return input(name, init.shape(), init.value());
}

Tensor Graph::constant(Shape shape, std::vector<double> data) {
  Node n;
  n.op = Op::kConstant;
  n.shape = std::move(shape);
  n.value = std::move(data);
  return Tensor(this, emit(std::move(n)));
}

Tensor Graph::constant(const Tensor& t) {
  return constant(t.shape(), t.value());
}

void Graph::mark_output(const std::string& name, const Tensor& t) {
  if (!t.attached() || t.graph() != this) {
    fail("mark_output: tensor not in this graph");
  }
  outputs_[name] = t.node();
}

// ---- Graph: evaluation ----

ForwardResult Graph::forward(const std::map<std::string, Tensor>& feeds,
                             const std::vector<std::string>& outputs) const {
  std::vector<std::vector<double>> vals(nodes_.size());
  ForwardResult res;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.op == Op::kInput) {
      auto it = feeds.find(n.name);
      if (it == feeds.end()) {
        fail("forward: input '" + n.name + "' not bound");
      }
      if (it->second.shape() != n.shape) {
        fail("forward: feed for '" + n.name + "' has shape " +
             shape_str(it->second.shape()) + ", node " + node_label(n.op, id, n.name) +
             " expects " + shape_str(n.shape));
      }
      vals[id] = it->second.value();
    } else if (n.op == Op::kConstant) {
      vals[id] = n.value;
    } else {
      std::vector<const std::vector<double>*> in_vals;
      in_vals.reserve(n.inputs.size());
      for (NodeId in : n.inputs) in_vals.push_back(&vals[in]);
      compute_into(n, in_vals, vals[id]);
    }
    if (res.all_finite) {
      for (double v : vals[id]) {
        if (!std::isfinite(v)) {
          res.all_finite = false;
          res.first_nonfinite_node = node_label(n.op, id, n.name);
          break;
        }
      }
    }
  }
  for (const auto& name : outputs) {
    NodeId id;
    if (auto it = outputs_.find(name); it != outputs_.end()) {
      id = it->second;
    } else if (auto jt = inputs_.find(name); jt != inputs_.end()) {
      id = jt->second;
    } else {
      fail("forward: unknown output '" + name + "'");
    }
    res.outputs.emplace(name, Tensor(nodes_[id].shape, vals[id]));
  }
  return res;
}

void Graph::replay(const std::map<std::string, std::vector<double>>& feeds) {
  for (const auto& [name, v] : feeds) {
    auto it = inputs_.find(name);
    if (it == inputs_.end()) fail("replay: unknown input '" + name + "'");
    Node& n = nodes_[it->second];
    if (v.size() != shape_product(n.shape)) {
      fail("replay: feed for '" + name + "' has " + std::to_string(v.size()) +
           " values, expected " + std::to_string(shape_product(n.shape)));
    }
    n.value = v;
  }
  std::vector<const std::vector<double>*> in_vals;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    if (n.op == Op::kInput || n.op == Op::kConstant) continue;
    in_vals.clear();
    for (NodeId in : n.inputs) in_vals.push_back(&nodes_[in].value);
    std::vector<double> out;
    compute_into(n, in_vals, out);
    n.value = std::move(out);
  }
}

// ---- builders ----

namespace {

Graph* graph_of(const Tensor& a, const Tensor& b) {
  if (a.attached() && b.attached()) {
    if (a.graph() != b.graph()) fail("operands belong to different graphs");
    return a.graph();
  }
  if (a.attached()) return a.graph();
  if (b.attached()) return b.graph();
  fail("operation requires at least one graph-attached operand");
}

NodeId as_node(Graph& g, const Tensor& t) {
  if (t.attached()) return t.node();
  return g.constant(t).node();  // detached values enter as constants
}

}  // namespace

Tensor make_node(Graph& g, Node n) { return g.tensor(g.emit(std::move(n))); }

namespace {

Tensor binary(Op op, const Tensor& a, const Tensor& b) {
  Graph& g = *graph_of(a, b);
  Node n;
  n.op = op;
  n.inputs = {as_node(g, a), as_node(g, b)};
  return make_node(g, std::move(n));
}

Tensor unary(Op op, const Tensor& a) {
  if (!a.attached()) fail("operation requires a graph-attached operand");
  Graph& g = *a.graph();
  Node n;
  n.op = op;
  n.inputs = {a.node()};
  return make_node(g, std::move(n));
}

Tensor axis_op(Op op, const Tensor& a, std::size_t axis) {
  if (!a.attached()) fail("operation requires a graph-attached operand");
  Graph& g = *a.graph();
  Node n;
  n.op = op;
  n.inputs = {a.node()};
  n.axis = axis;
  return make_node(g, std::move(n));
}

Tensor shaped_op(Op op, const Tensor& a, Shape target) {
  if (!a.attached()) fail("operation requires a graph-attached operand");
  Graph& g = *a.graph();
  Node n;
  n.op = op;
  n.inputs = {a.node()};
  n.shape = std::move(target);
  return make_node(g, std::move(n));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(Op::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Op::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Op::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(Op::kDiv, a, b); }

Tensor scale(const Tensor& a, double c) {
  if (!a.attached()) fail("operation requires a graph-attached operand");
  Graph& g = *a.graph();
  Node n;
  n.op = Op::kScale;
  n.inputs = {a.node()};
  n.attr = c;
  return make_node(g, std::move(n));
}

Tensor add_scalar(const Tensor& a, double c) {
  if (!a.attached()) fail("operation requires a graph-attached operand");
  Graph& g = *a.graph();
  Node n;
  n.op = Op::kAddScalar;
  n.inputs = {a.node()};
  n.attr = c;
  return make_node(g, std::move(n));
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  Graph& g = *graph_of(a, b);
  const std::size_t ra = a.shape().size(), rb = b.shape().size();
  // Rank-1 operands are treated as a row (lhs) or column (rhs) and the
  // result is squeezed back.
  if (ra == 1 || rb == 1) {
    Tensor a2 = a, b2 = b;
    if (ra == 1) {
      a2 = reshape(a.attached() ? a : g.constant(a), Shape{1, a.shape()[0]});
    }
    if (rb == 1) {
      b2 = reshape(b.attached() ? b : g.constant(b), Shape{b.shape()[0], 1});
    }
    Tensor r = matmul(a2, b2, ra == 1 ? false : trans_a,
                      rb == 1 ? false : trans_b);
    Shape out;
    if (ra != 1) out.push_back(r.shape()[0]);
    if (rb != 1) out.push_back(r.shape()[1]);
    return reshape(r, out);
  }
  Node n;
  n.op = Op::kMatmul;
  n.inputs = {as_node(g, a), as_node(g, b)};
  n.trans_a = trans_a;
  n.trans_b = trans_b;
  return make_node(g, std::move(n));
}

Tensor relu(const Tensor& a) { return unary(Op::kRelu, a); }
Tensor gtz(const Tensor& a) { return unary(Op::kGtz, a); }
Tensor exp(const Tensor& a) { return unary(Op::kExp, a); }
Tensor log(const Tensor& a) { return unary(Op::kLog, a); }
Tensor square(const Tensor& a) { return unary(Op::kSquare, a); }
Tensor sqrt(const Tensor& a) { return unary(Op::kSqrt, a); }
Tensor sum_all(const Tensor& a) { return unary(Op::kSumAll, a); }

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  return axis_op(Op::kSumAxis, a, axis);
}
Tensor max_axis(const Tensor& a, std::size_t axis) {
  return axis_op(Op::kMaxAxis, a, axis);
}
Tensor onehot_argmax(const Tensor& a, std::size_t axis) {
  return axis_op(Op::kOnehotArgmax, a, axis);
}

Tensor broadcast(const Tensor& a, const Shape& target) {
  return shaped_op(Op::kBroadcast, a, target);
}
Tensor sum_to(const Tensor& a, const Shape& target) {
  return shaped_op(Op::kSumTo, a, target);
}
Tensor reshape(const Tensor& a, const Shape& target) {
  return shaped_op(Op::kReshape, a, target);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t len) {
  if (!a.attached()) fail("operation requires a graph-attached operand");
  Graph& g = *a.graph();
  Node n;
  n.op = Op::kSlice;
  n.inputs = {a.node()};
  n.axis = axis;
  n.start = start;
  n.len = len;
  return make_node(g, std::move(n));
}

Tensor pad(const Tensor& a, std::size_t axis, std::size_t before,
           std::size_t after) {
  if (!a.attached()) fail("operation requires a graph-attached operand");
  Graph& g = *a.graph();
  Node n;
  n.op = Op::kPad;
  n.inputs = {a.node()};
  n.axis = axis;
  n.start = before;
  n.len = after;
  return make_node(g, std::move(n));
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) fail("concat: needs at least one input");
  Graph* g = nullptr;
  for (const Tensor& t : parts) {
    if (t.attached()) {
      if (g && g != t.graph()) fail("operands belong to different graphs");
      g = t.graph();
    }
  }
  if (!g) fail("operation requires a graph-attached operand");
  Node n;
  n.op = Op::kConcat;
  n.axis = axis;
  for (const Tensor& t : parts) n.inputs.push_back(as_node(*g, t));
  return make_node(*g, std::move(n));
}

Tensor solve_spd(const Tensor& a, const Tensor& b) {
  return binary(Op::kSolveSpd, a, b);
}

// ---- composites ----

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

Tensor logsumexp(const Tensor& a, std::size_t axis) {
  Tensor m = max_axis(a, axis);
  Tensor shifted = sub(a, broadcast(m, a.shape()));
  return add(m, log(sum_axis(exp(shifted), axis)));
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  return sub(a, broadcast(logsumexp(a, axis), a.shape()));
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  return exp(log_softmax(a, axis));
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const Shape& s = logits.shape();
  if (s.size() != 2) fail("argmax_rows: expected [batch, classes]");
  const auto& v = logits.value();
  std::vector<int> out(s[0]);
  for (std::size_t r = 0; r < s[0]; ++r) {
    std::size_t arg = 0;
    double best = v[r * s[1]];
    for (std::size_t c = 1; c < s[1]; ++c) {
      if (v[r * s[1] + c] > best) {
        best = v[r * s[1] + c];
        arg = c;
      }
    }
    out[r] = static_cast<int>(arg);
  }
  return out;
}

// ---- gradients ----

namespace {

struct NodeMeta {
  Op op;
  Shape shape;
  std::vector<NodeId> inputs;
  double attr;
  std::size_t axis, start, len;
  bool trans_a, trans_b;
};

NodeMeta meta_of(const Node& n) {
  return {n.op,    n.shape, n.inputs, n.attr,
          n.axis,  n.start, n.len,    n.trans_a, n.trans_b};
}

}  // namespace

std::vector<Tensor> Graph::gradients(const Tensor& output,
                                     std::span<const Tensor> wrt) {
  if (!output.attached() || output.graph() != this) {
    fail("grad: output is not part of this graph");
  }
  if (output.size() != 1) {
    fail("grad: output has shape " + shape_str(output.shape()) +
         ", expected a scalar");
  }
  for (const Tensor& t : wrt) {
    if (!t.attached() || t.graph() != this) {
      fail("grad: wrt tensor is not part of this graph");
    }
  }

  const NodeId out_id = output.node();
  std::vector<NodeId> adj(out_id + 1, kNoNode);
  {
    const Shape& os = nodes_[out_id].shape;
    adj[out_id] = constant(os, std::vector<double>(shape_product(os), 1.0)).node();
  }

  auto t = [&](NodeId id) { return Tensor(this, id); };
  auto accum = [&](NodeId target, const Tensor& contrib) {
    if (target > out_id) fail("grad: internal adjoint ordering violation");
    if (adj[target] == kNoNode) {
      adj[target] = contrib.node();
    } else {
      adj[target] = add(t(adj[target]), contrib).node();
    }
  };

  for (NodeId id = out_id + 1; id-- > 0;) {
    if (adj[id] == kNoNode) continue;
    const NodeMeta n = meta_of(nodes_[id]);
    if (n.op == Op::kInput || n.op == Op::kConstant) continue;
    Tensor g = t(adj[id]);
    Tensor self = t(id);
    switch (n.op) {
      case Op::kAdd:
        accum(n.inputs[0], g);
        accum(n.inputs[1], g);
        break;
      case Op::kSub:
        accum(n.inputs[0], g);
        accum(n.inputs[1], neg(g));
        break;
      case Op::kMul:
        accum(n.inputs[0], mul(g, t(n.inputs[1])));
        accum(n.inputs[1], mul(g, t(n.inputs[0])));
        break;
      case Op::kDiv: {
        Tensor a = t(n.inputs[0]), b = t(n.inputs[1]);
        accum(n.inputs[0], div(g, b));
        accum(n.inputs[1], neg(mul(g, div(a, square(b)))));
        break;
      }
      case Op::kScale:
        accum(n.inputs[0], scale(g, n.attr));
        break;
      case Op::kAddScalar:
        accum(n.inputs[0], g);
        break;
      case Op::kMatmul: {
        Tensor a = t(n.inputs[0]), b = t(n.inputs[1]);
        if (!n.trans_a && !n.trans_b) {
          accum(n.inputs[0], matmul(g, b, false, true));
          accum(n.inputs[1], matmul(a, g, true, false));
        } else if (!n.trans_a && n.trans_b) {
          accum(n.inputs[0], matmul(g, b, false, false));
          accum(n.inputs[1], matmul(g, a, true, false));
        } else if (n.trans_a && !n.trans_b) {
          accum(n.inputs[0], matmul(b, g, false, true));
          accum(n.inputs[1], matmul(a, g, false, false));
        } else {
          accum(n.inputs[0], matmul(b, g, true, true));
          accum(n.inputs[1], matmul(g, a, true, true));
        }
        break;
      }
      case Op::kRelu:
        accum(n.inputs[0], mul(g, gtz(t(n.inputs[0]))));
        break;
      case Op::kGtz:
      case Op::kOnehotArgmax:
        break;  // piecewise constant: zero derivative
      case Op::kExp:
        accum(n.inputs[0], mul(g, self));
        break;
      case Op::kLog:
        accum(n.inputs[0], div(g, t(n.inputs[0])));
        break;
      case Op::kSquare:
        accum(n.inputs[0], mul(g, scale(t(n.inputs[0]), 2.0)));
        break;
      case Op::kSqrt:
        accum(n.inputs[0], div(g, scale(self, 2.0)));
        break;
      case Op::kSumAll:
      case Op::kSumAxis:
        accum(n.inputs[0], broadcast(g, nodes_[n.inputs[0]].shape));
        break;
      case Op::kMaxAxis: {
        Tensor src = t(n.inputs[0]);
        accum(n.inputs[0], mul(broadcast(g, src.shape()),
                               onehot_argmax(src, n.axis)));
        break;
      }
      case Op::kBroadcast:
        accum(n.inputs[0], sum_to(g, nodes_[n.inputs[0]].shape));
        break;
      case Op::kSumTo:
        accum(n.inputs[0], broadcast(g, nodes_[n.inputs[0]].shape));
        break;
      case Op::kReshape:
        accum(n.inputs[0], reshape(g, nodes_[n.inputs[0]].shape));
        break;
      case Op::kSlice: {
        const Shape& src = nodes_[n.inputs[0]].shape;
        accum(n.inputs[0],
              pad(g, n.axis, n.start, src[n.axis] - n.start - n.len));
        break;
      }
      case Op::kPad:
        accum(n.inputs[0],
              slice(g, n.axis, n.start, nodes_[n.inputs[0]].shape[n.axis]));
        break;
      case Op::kConcat: {
        std::size_t offset = 0;
        for (NodeId in : n.inputs) {
          const std::size_t ext = nodes_[in].shape[n.axis];
          accum(in, slice(g, n.axis, offset, ext));
          offset += ext;
        }
        break;
      }
      case Op::kSolveSpd: {
        // S = A^-1 B:  dB = A^-1 G,  dA = -dB S^T
        Tensor a = t(n.inputs[0]);
        Tensor gb = solve_spd(a, g);
        accum(n.inputs[1], gb);
        accum(n.inputs[0], neg(matmul(gb, self, false, true)));
        break;
      }
      case Op::kInput:
      case Op::kConstant:
        break;
    }
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Tensor& w : wrt) {
    const NodeId id = w.node();
    if (id <= out_id && adj[id] != kNoNode) {
      out.push_back(t(adj[id]));
    } else {
      const Shape& s = nodes_[id].shape;
      out.push_back(constant(s, std::vector<double>(shape_product(s), 0.0)));
    }
  }
  return out;
}

Tensor Graph::gradient(const Tensor& output, const Tensor& wrt) {
  const Tensor w[] = {wrt};
  return gradients(output, w)[0];
}

// ---- gradient checking ----

GradReport check_grad_against(const ScalarGraphFn& fn,
                              const std::vector<Tensor>& points,
                              const std::vector<Tensor>& claimed,
                              double tol, double h) {
  GradReport rep;
  Graph g;
  std::vector<Tensor> attached;
  std::map<std::string, Tensor> feeds;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const std::string name = "p" + std::to_string(i);
    attached.push_back(g.input(name, points[i]));
    feeds.emplace(name, points[i]);
  }
  Tensor out = fn(g, attached);
  if (!out.attached() || out.graph() != &g || out.size() != 1) {
    fail("check_grad: builder must return a scalar in the supplied graph");
  }
  g.mark_output("__out", out);

  rep.per_parameter.assign(points.size(), 0.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const std::string name = "p" + std::to_string(i);
    const auto& base = points[i].value();
    const auto& claim = claimed[i].value();
    for (std::size_t j = 0; j < base.size(); ++j) {
      auto probe = [&](double delta) {
        std::vector<double> bumped = base;
        bumped[j] += delta;
        auto local = feeds;
        local.erase(name);
        local.emplace(name, Tensor(points[i].shape(), std::move(bumped)));
        return g.forward(local, {"__out"}).outputs.at("__out").item();
      };
      const double fp = probe(h), fm = probe(-h);
      const double fd = (fp - fm) / (2.0 * h);
      const double an = claim[j];
      if (!std::isfinite(fd) || !std::isfinite(an)) {
        rep.diagnostic = "non-finite value at parameter " + std::to_string(i) +
                         " coordinate " + std::to_string(j);
        rep.max_rel_error = std::numeric_limits<double>::infinity();
        rep.pass = false;
        return rep;
      }
      const double rel =
          std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      rep.per_parameter[i] = std::max(rep.per_parameter[i], rel);
      rep.max_rel_error = std::max(rep.max_rel_error, rel);
    }
  }
  rep.pass = rep.max_rel_error <= tol;
  return rep;
}

GradReport check_grad(const ScalarGraphFn& fn,
                      const std::vector<Tensor>& points, double tol, double h) {
  // First pass: build once to obtain the tape gradient values.
  Graph g;
  std::vector<Tensor> attached;
  for (std::size_t i = 0; i < points.size(); ++i) {
    attached.push_back(g.input("p" + std::to_string(i), points[i]));
  }
  Tensor out = fn(g, attached);
  if (!out.attached() || out.graph() != &g || out.size() != 1) {
    fail("check_grad: builder must return a scalar in the supplied graph");
  }
  std::vector<Tensor> grads = g.gradients(out, attached);
  std::vector<Tensor> claimed;
  claimed.reserve(grads.size());
  for (const Tensor& t : grads) claimed.push_back(t.detach());
  return check_grad_against(fn, points, claimed, tol, h);
}

GradReport check_grad(const std::function<Tensor(Graph&, const Tensor&)>& fn,
                      const Tensor& point, double tol, double h) {
  return check_grad(
      [&](Graph& g, const std::vector<Tensor>& ps) { return fn(g, ps[0]); },
      {point}, tol, h);
}

}  // namespace aq
