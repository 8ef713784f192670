#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dacnet/error.hpp"
#include "dacnet/tensor.hpp"

namespace dacnet {

using NodeId = std::size_t;

/// Running tally of scalar multiplies and adds executed by kernels.
struct FlopCounter {
  std::uint64_t count = 0;
  void add(std::uint64_t n) noexcept { count += n; }
};

/// Append-only tape of differentiable operations. Each node keeps its value and
/// a closure that pushes the node's gradient into its inputs.
template <class T>
class Graph {
 public:
  using TensorT = BasicTensor<T>;
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  /// Leaf that never receives a gradient unless requested.
  NodeId constant(TensorT v, bool requires_grad = false) {
    return push("const", {}, std::move(v), nullptr, requires_grad, false);
  }

  /// Trainable leaf; always receives a gradient after backward.
  NodeId parameter(TensorT v, std::string name = "param") {
    NodeId id = push("param", {}, std::move(v), nullptr, true, true);
    nodes_[id].name = std::move(name);
    return id;
  }

  /// Records an operation. The closure is dropped when no input needs a gradient.
  NodeId record(std::string op, std::vector<NodeId> inputs, TensorT value, BackwardFn bw) {
    bool rg = false;
    for (NodeId in : inputs) {
      if (in >= nodes_.size()) throw ContractError("graph input id out of range");
      rg = rg || nodes_[in].requires_grad;
    }
    return push(std::move(op), std::move(inputs), std::move(value), rg ? std::move(bw) : nullptr, rg,
                false);
  }

  const TensorT& value(NodeId id) const { return nodes_.at(id).value; }
  const std::string& op(NodeId id) const { return nodes_.at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  bool is_parameter(NodeId id) const { return nodes_.at(id).param; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient accumulator for a node, zero-initialized on first use.
  TensorT& grad_buffer(NodeId id) {
    auto& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = TensorT(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  bool has_grad(NodeId id) const { return nodes_.at(id).has_grad; }

  /// Gradient of a node after backward; zeros when nothing flowed into it.
  TensorT grad(NodeId id) const {
    const auto& n = nodes_.at(id);
    return n.has_grad ? n.grad : TensorT(n.value.shape());
  }

  /// Reverse sweep from a scalar loss node.
  void backward(NodeId loss) {
    if (loss >= nodes_.size()) throw ContractError("loss id out of range");
    if (nodes_[loss].value.size() != 1)
      throw ContractError("backward needs a scalar loss, got shape " + shape_str(nodes_[loss].value.shape()));
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = TensorT();
    }
    grad_buffer(loss)[0] = T(1);
    for (std::size_t k = loss + 1; k-- > 0;) {
      auto& n = nodes_[k];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, k);
      // Interior gradients are no longer needed once propagated.
      if (!n.param && !n.inputs.empty()) {
        nodes_[k].grad = TensorT();
        nodes_[k].has_grad = false;
      }
    }
    for (auto& n : nodes_)
      if (n.param && !n.has_grad) {
        n.grad = TensorT(n.value.shape());
        n.has_grad = true;
      }
  }

  std::vector<NodeId> parameters() const {
    std::vector<NodeId> out;
    for (NodeId i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].param) out.push_back(i);
    return out;
  }

  std::map<NodeId, TensorT> parameter_grads() const {
    std::map<NodeId, TensorT> out;
    for (NodeId i : parameters()) out.emplace(i, grad(i));
    return out;
  }

  /// Kernels add their executed multiply/add counts here when set.
  FlopCounter* flops = nullptr;

  void count(std::uint64_t n) {
    if (flops) flops->add(n);
  }

 private:
  struct Node {
    std::string op;
    std::string name;
    std::vector<NodeId> inputs;
    TensorT value;
    TensorT grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool param = false;
    bool has_grad = false;
  };

  NodeId push(std::string op, std::vector<NodeId> inputs, TensorT v, BackwardFn bw, bool rg, bool param) {
    Node n;
    n.op = std::move(op);
    n.inputs = std::move(inputs);
    n.value = std::move(v);
    n.backward = std::move(bw);
    n.requires_grad = rg;
    n.param = param;
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  std::vector<Node> nodes_;
};

/// A scalar function of one tensor expressed on a graph: receives the input node
/// and returns the scalar output node.
template <class T>
using GraphFn = std::function<NodeId(Graph<T>&, NodeId)>;

/// Maximum relative error between the taped gradient of f at x and central
/// differences with step h. Denominator is max(|analytic|, |numeric|, 1e-12).
template <class T>
T grad_check(const GraphFn<T>& f, const BasicTensor<T>& x, T h) {
  if (!(h > T(0))) throw ContractError("grad_check step must be positive");
  Graph<T> g;
  NodeId xi = g.constant(x, true);
  NodeId out = f(g, xi);
  g.backward(out);
  BasicTensor<T> analytic = g.grad(xi);

  auto eval = [&](const BasicTensor<T>& at) {
    Graph<T> ge;
    NodeId id = ge.constant(at);
    return ge.value(f(ge, id)).item();
  };
  T worst = 0;
  BasicTensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    const T xp = orig + h;
    const T xm = orig - h;
    probe[i] = xp;
    const T fp = eval(probe);
    probe[i] = xm;
    const T fm = eval(probe);
    probe[i] = orig;
    // Divide by the step actually taken after rounding of x +- h.
    const T numeric = (fp - fm) / (xp - xm);
    const T a = analytic[i];
    const T denom = std::max({std::abs(a), std::abs(numeric), T(1e-12)});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace dacnet
