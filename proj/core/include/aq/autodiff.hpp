#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aq/error.hpp"

namespace aq {

class Graph;

using NodeId = std::size_t;
using Shape = std::vector<std::size_t>;

inline constexpr NodeId kNoNode = static_cast<NodeId>(-1);

std::size_t shape_product(const Shape& s);
std::string shape_str(const Shape& s);

// An n-dimensional f64 value. Either detached (owns its payload) or attached
// to a Graph node, in which case value() reads the node's current payload.
// Attached tensors are lightweight handles; the Graph must outlive them.
class Tensor {
public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);
  static Tensor scalar(double v);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);

  bool attached() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  NodeId node() const { return node_; }

  // Both return by value: attached tensors read out of the graph's node
  // storage, which emitting further nodes may reallocate, so handing out
  // references would dangle.
  Shape shape() const;
  std::size_t size() const { return shape_product(shape()); }
  std::vector<double> value() const;

  // Copies the current value out; the result has no graph reference and
  // contributes no gradient when used in further graph ops.
  Tensor detach() const;

  double item() const;  // value of a one-element tensor

private:
  friend class Graph;
  Tensor(Graph* g, NodeId id) : graph_(g), node_(id) {}

  Shape shape_;
  std::vector<double> data_;
  Graph* graph_ = nullptr;
  NodeId node_ = kNoNode;
};

enum class Op : std::uint8_t {
  kInput,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,      // x * attr_a
  kAddScalar,  // x + attr_a
  kMatmul,     // 2-D, with transpose flags
  kRelu,
  kGtz,  // 1 where x > 0 else 0; zero derivative
  kExp,
  kLog,
  kSquare,
  kSqrt,
  kSumAll,   // -> scalar
  kSumAxis,  // keeps the reduced axis with extent 1
  kMaxAxis,  // ties break toward the lowest index
  kOnehotArgmax,  // 1 at the (lowest-index) argmax per slice; zero derivative
  kBroadcast,     // expand to target shape (trailing-aligned, extent-1 axes)
  kSumTo,         // inverse of broadcast: sum down to target shape
  kReshape,
  kSlice,   // one axis, [start, start+len)
  kPad,     // one axis, zeros before/after
  kConcat,  // one axis, >= 1 inputs
  kSolveSpd,  // X = A^-1 B for symmetric positive definite A, via Cholesky
};

const char* op_name(Op op);

struct Node {
  Op op;
  Shape shape;
  std::vector<NodeId> inputs;
  std::vector<double> value;  // current payload, updated eagerly / on replay
  std::string name;           // set for inputs; optional elsewhere
  // op attributes
  double attr = 0.0;                      // kScale / kAddScalar
  std::size_t axis = 0;                   // axis ops
  std::size_t start = 0, len = 0;         // kSlice; kPad uses (before, after)
  bool trans_a = false, trans_b = false;  // kMatmul
};

struct ForwardResult {
  std::map<std::string, Tensor> outputs;  // detached
  bool all_finite = true;
  std::string first_nonfinite_node;  // op name + id, empty when all finite
};

// Append-only operation tape. Insertion order is topological order; every
// node's payload is computed eagerly at insertion and can be recomputed with
// replay()/forward(). Gradients are emitted as further tape nodes built from
// the same primitive set, so grad() applied to a gradient yields exact
// second-order derivatives.
//
// A Graph is single-writer. forward() is const and evaluates into local
// scratch, so concurrent read-only evaluation of a frozen graph is safe;
// replay() mutates stored payloads and must be externally serialized.
class Graph {
public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor input(const std::string& name, Shape shape, std::vector<double> data);
  Tensor input(const std::string& name, const Tensor& init);
  Tensor constant(Shape shape, std::vector<double> data);
  Tensor constant(const Tensor& t);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  Tensor tensor(NodeId id) { return Tensor(this, id); }

  // Re-evaluates the whole tape with the given input bindings (pure; stored
  // payloads untouched). Every kInput node must be fed.
  ForwardResult forward(const std::map<std::string, Tensor>& feeds,
                        const std::vector<std::string>& outputs) const;

  // Rebinds the given inputs and recomputes every node's stored payload in
  // insertion order. Inputs not mentioned keep their current value.
  void replay(const std::map<std::string, std::vector<double>>& feeds);

  // d(output)/d(wrt) for a scalar output. Results are tape nodes, so they can
  // be differentiated again. A wrt tensor the output does not depend on gets
  // an exact-zero gradient; a wrt tensor outside this graph is an error.
  std::vector<Tensor> gradients(const Tensor& output,
                                std::span<const Tensor> wrt);
  Tensor gradient(const Tensor& output, const Tensor& wrt);

  // Named non-input nodes, readable via forward().
  void mark_output(const std::string& name, const Tensor& t);

private:
  friend class Tensor;
  friend Tensor make_node(Graph& g, Node n);

  NodeId emit(Node n);
  void compute_into(const Node& n, std::span<const std::vector<double>*> in,
                    std::vector<double>& out) const;
  void check_node(const Node& n) const;  // shape/validity rules
  Shape infer_shape(const Node& n) const;

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> inputs_;
  std::map<std::string, NodeId> outputs_;
};

// ---- primitive builders ----
// Binary ops require identical shapes (broadcast explicitly). Operands may be
// attached to the same graph or detached; a detached operand becomes a
// constant node, and two detached operands produce a detached result.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
              bool trans_b = false);
Tensor relu(const Tensor& a);
Tensor gtz(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis);
Tensor max_axis(const Tensor& a, std::size_t axis);
Tensor onehot_argmax(const Tensor& a, std::size_t axis);
Tensor broadcast(const Tensor& a, const Shape& target);
Tensor sum_to(const Tensor& a, const Shape& target);
Tensor reshape(const Tensor& a, const Shape& target);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t len);
Tensor pad(const Tensor& a, std::size_t axis, std::size_t before,
           std::size_t after);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor solve_spd(const Tensor& a, const Tensor& b);

// ---- composites ----
Tensor neg(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor logsumexp(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);
Tensor softmax(const Tensor& a, std::size_t axis);

// argmax over the last axis of a [B, C] batch of values (detached math).
std::vector<int> argmax_rows(const Tensor& logits);

// ---- gradient checking ----
struct GradReport {
  double max_rel_error = 0.0;
  std::vector<double> per_parameter;  // max relative error per wrt tensor
  bool pass = false;
  std::string diagnostic;  // non-empty when something non-finite showed up
};

using ScalarGraphFn =
    std::function<Tensor(Graph&, const std::vector<Tensor>&)>;

// Central finite differences (step h) against externally supplied gradient
// values; relative error is |a-b| / max(1, |a|, |b|).
GradReport check_grad_against(const ScalarGraphFn& fn,
                              const std::vector<Tensor>& points,
                              const std::vector<Tensor>& claimed,
                              double tol, double h = 1e-5);

// Builds fn's output at `points`, differentiates it on the tape, and checks
// the result against central finite differences.
GradReport check_grad(const ScalarGraphFn& fn,
                      const std::vector<Tensor>& points, double tol,
                      double h = 1e-5);
GradReport check_grad(const std::function<Tensor(Graph&, const Tensor&)>& fn,
                      const Tensor& point, double tol, double h = 1e-5);

}  // namespace aq
