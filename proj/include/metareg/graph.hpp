#ifndef METAREG_GRAPH_HPP
#define METAREG_GRAPH_HPP

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metareg/tensor.hpp"

namespace metareg::ad {

enum class Op {
  kConst,
  kParam,
  kAdd,
  kSub,
  kMul,
  kScale,      // x * c
  kAddScalar,  // x + c
  kMatmul,     // trans flags in node
  kBroadcastRows,    // [n] -> [m,n]
  kBroadcastCols,    // [m] -> [m,n]
  kBroadcastScalar,  // scalar -> shape
  kRelu,
  kReluMask,  // 1 where x > 0, else 0 (subgradient at 0 is 0)
  kTanh,
  kSin,
  kExp,
  kLog,
  kSoftplus,
  kRecip,
  kReduceSum,   // any -> scalar
  kReduceMean,  // any -> scalar
  kReduceRows,  // [m,n] -> [n], value-sorted accumulation
  kReduceCols,  // [m,n] -> [m]
  kSoftmax,     // row-wise [m,n]
  kSoftmaxXent, // (logits [m,n], onehot [m,n]) -> [m]
  kConcatCols,  // ([m,a],[m,b]) -> [m,a+b]; rank-1 pairs allowed
  kSliceCols,   // [m,n] -> [m,j1-j0]
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kConst: return "const";
    case Op::kParam: return "param";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMatmul: return "matmul";
    case Op::kBroadcastRows: return "broadcast_rows";
    case Op::kBroadcastCols: return "broadcast_cols";
    case Op::kBroadcastScalar: return "broadcast_scalar";
    case Op::kRelu: return "relu";
    case Op::kReluMask: return "relu_mask";
    case Op::kTanh: return "tanh";
    case Op::kSin: return "sin";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSoftplus: return "softplus";
    case Op::kRecip: return "recip";
    case Op::kReduceSum: return "reduce_sum";
    case Op::kReduceMean: return "reduce_mean";
    case Op::kReduceRows: return "reduce_rows";
    case Op::kReduceCols: return "reduce_cols";
    case Op::kSoftmax: return "softmax";
    case Op::kSoftmaxXent: return "softmax_xent";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSliceCols: return "slice_cols";
  }
  return "?";
}

struct Node;
using Value = std::shared_ptr<const Node>;

/// One record in the (immutable, acyclic) computation graph. Inputs always
/// carry smaller ids than the node itself, so sorting by id is a topological
/// order.
struct Node {
  Op op;
  std::vector<Value> inputs;
  Shape shape;

  Tensor literal;      // kConst
  std::string name;    // kParam
  double scalar = 0;   // kScale / kAddScalar payload
  int i0 = 0, i1 = 0;  // slice bounds; broadcast target dim
  bool trans_a = false, trans_b = false;

  std::uint64_t id;

  Node(Op o, std::vector<Value> in, Shape s) : op(o), inputs(std::move(in)), shape(std::move(s)) {
    static std::atomic<std::uint64_t> next{1};
    id = next.fetch_add(1, std::memory_order_relaxed);
  }
};

namespace detail {
inline Value make(Op op, std::vector<Value> inputs, Shape shape) {
  return std::make_shared<Node>(op, std::move(inputs), std::move(shape));
}
[[noreturn]] inline void fail(Op op, const std::string& msg) {
  throw std::invalid_argument(std::string(op_name(op)) + ": " + msg);
}
inline void require_same_shape(Op op, const Value& a, const Value& b) {
  if (a->shape != b->shape)
    fail(op, "shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
}
}  // namespace detail

// --- leaves -----------------------------------------------------------------

inline Value constant(Tensor t) {
  if (!t.all_finite()) detail::fail(Op::kConst, "non-finite constant");
  auto n = std::make_shared<Node>(Op::kConst, std::vector<Value>{}, t.shape);
  n->literal = std::move(t);
  return n;
}

inline Value scalar_const(double v) { return constant(Tensor::scalar(v)); }

inline Value param(std::string name, Shape shape) {
  auto n = std::make_shared<Node>(Op::kParam, std::vector<Value>{}, std::move(shape));
  n->name = std::move(name);
  return n;
}

// --- elementwise ------------------------------------------------------------

inline Value add(Value a, Value b) {
  detail::require_same_shape(Op::kAdd, a, b);
  Shape s = a->shape;
  return detail::make(Op::kAdd, {std::move(a), std::move(b)}, std::move(s));
}

inline Value sub(Value a, Value b) {
  detail::require_same_shape(Op::kSub, a, b);
  Shape s = a->shape;
  return detail::make(Op::kSub, {std::move(a), std::move(b)}, std::move(s));
}

inline Value mul(Value a, Value b) {
  detail::require_same_shape(Op::kMul, a, b);
  Shape s = a->shape;
  return detail::make(Op::kMul, {std::move(a), std::move(b)}, std::move(s));
}

inline Value scale(Value a, double c) {
  Shape s = a->shape;
  auto n = detail::make(Op::kScale, {std::move(a)}, std::move(s));
  const_cast<Node*>(n.get())->scalar = c;
  return n;
}

inline Value add_scalar(Value a, double c) {
  Shape s = a->shape;
  auto n = detail::make(Op::kAddScalar, {std::move(a)}, std::move(s));
  const_cast<Node*>(n.get())->scalar = c;
  return n;
}

inline Value neg(Value a) { return scale(std::move(a), -1.0); }

namespace detail {
inline Value unary(Op op, Value a) {
  Shape s = a->shape;
  return make(op, {std::move(a)}, std::move(s));
}
}  // namespace detail

inline Value relu(Value a) { return detail::unary(Op::kRelu, std::move(a)); }
inline Value relu_mask(Value a) { return detail::unary(Op::kReluMask, std::move(a)); }
inline Value tanh(Value a) { return detail::unary(Op::kTanh, std::move(a)); }
inline Value sin(Value a) { return detail::unary(Op::kSin, std::move(a)); }
inline Value exp(Value a) { return detail::unary(Op::kExp, std::move(a)); }
inline Value log(Value a) { return detail::unary(Op::kLog, std::move(a)); }
inline Value softplus(Value a) { return detail::unary(Op::kSoftplus, std::move(a)); }
inline Value recip(Value a) { return detail::unary(Op::kRecip, std::move(a)); }

/// exp(-softplus(-x)), the numerically stable logistic sigmoid.
inline Value sigmoid(Value a) { return exp(neg(softplus(neg(std::move(a))))); }

// --- structure --------------------------------------------------------------

inline Value matmul(Value a, Value b, bool trans_a = false, bool trans_b = false) {
  if (a->shape.size() != 2 || b->shape.size() != 2) detail::fail(Op::kMatmul, "rank-2 operands required");
  int am = trans_a ? a->shape[1] : a->shape[0];
  int ak = trans_a ? a->shape[0] : a->shape[1];
  int bk = trans_b ? b->shape[1] : b->shape[0];
  int bn = trans_b ? b->shape[0] : b->shape[1];
  if (ak != bk)
    detail::fail(Op::kMatmul, "inner dimensions disagree: " + shape_str(a->shape) + (trans_a ? "^T" : "") +
                                  " x " + shape_str(b->shape) + (trans_b ? "^T" : ""));
  auto n = detail::make(Op::kMatmul, {std::move(a), std::move(b)}, {am, bn});
  auto* m = const_cast<Node*>(n.get());
  m->trans_a = trans_a;
  m->trans_b = trans_b;
  return n;
}

inline Value broadcast_rows(Value v, int m) {
  if (v->shape.size() != 1) detail::fail(Op::kBroadcastRows, "rank-1 input required");
  if (m <= 0) detail::fail(Op::kBroadcastRows, "row count must be positive");
  int n = v->shape[0];
  auto node = detail::make(Op::kBroadcastRows, {std::move(v)}, {m, n});
  const_cast<Node*>(node.get())->i0 = m;
  return node;
}

inline Value broadcast_cols(Value v, int n) {
  if (v->shape.size() != 1) detail::fail(Op::kBroadcastCols, "rank-1 input required");
  if (n <= 0) detail::fail(Op::kBroadcastCols, "col count must be positive");
  int m = v->shape[0];
  auto node = detail::make(Op::kBroadcastCols, {std::move(v)}, {m, n});
  const_cast<Node*>(node.get())->i0 = n;
  return node;
}

inline Value broadcast_scalar(Value v, Shape target) {
  if (!v->shape.empty()) detail::fail(Op::kBroadcastScalar, "scalar input required");
  return detail::make(Op::kBroadcastScalar, {std::move(v)}, std::move(target));
}

inline Value reduce_sum(Value a) { return detail::make(Op::kReduceSum, {std::move(a)}, {}); }
inline Value reduce_mean(Value a) { return detail::make(Op::kReduceMean, {std::move(a)}, {}); }

inline Value reduce_rows(Value a) {
  if (a->shape.size() != 2) detail::fail(Op::kReduceRows, "rank-2 input required");
  Shape s{a->shape[1]};
  return detail::make(Op::kReduceRows, {std::move(a)}, std::move(s));
}

inline Value reduce_cols(Value a) {
  if (a->shape.size() != 2) detail::fail(Op::kReduceCols, "rank-2 input required");
  Shape s{a->shape[0]};
  return detail::make(Op::kReduceCols, {std::move(a)}, std::move(s));
}

inline Value softmax(Value a) {
  if (a->shape.size() != 2) detail::fail(Op::kSoftmax, "rank-2 input required");
  Shape s = a->shape;
  return detail::make(Op::kSoftmax, {std::move(a)}, std::move(s));
}

/// Per-row cross-entropy between softmax(logits) and a one-hot row: returns [m].
inline Value softmax_xent(Value logits, Value onehot) {
  detail::require_same_shape(Op::kSoftmaxXent, logits, onehot);
  if (logits->shape.size() != 2) detail::fail(Op::kSoftmaxXent, "rank-2 inputs required");
  Shape s{logits->shape[0]};
  return detail::make(Op::kSoftmaxXent, {std::move(logits), std::move(onehot)}, std::move(s));
}

inline Value concat_cols(Value a, Value b) {
  if (a->shape.size() != b->shape.size()) detail::fail(Op::kConcatCols, "rank mismatch");
  if (a->shape.size() == 1) {
    Shape s{a->shape[0] + b->shape[0]};
    return detail::make(Op::kConcatCols, {std::move(a), std::move(b)}, std::move(s));
  }
  if (a->shape.size() != 2 || a->shape[0] != b->shape[0])
    detail::fail(Op::kConcatCols, "row counts disagree: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
  Shape s{a->shape[0], a->shape[1] + b->shape[1]};
  return detail::make(Op::kConcatCols, {std::move(a), std::move(b)}, std::move(s));
}

inline Value slice_cols(Value a, int j0, int j1) {
  int rank = static_cast<int>(a->shape.size());
  if (rank != 1 && rank != 2) detail::fail(Op::kSliceCols, "rank-1/2 input required");
  int n = a->shape[rank - 1];
  if (j0 < 0 || j1 > n || j0 >= j1) detail::fail(Op::kSliceCols, "bad slice bounds");
  Shape s = rank == 1 ? Shape{j1 - j0} : Shape{a->shape[0], j1 - j0};
  auto node = detail::make(Op::kSliceCols, {std::move(a)}, std::move(s));
  auto* m = const_cast<Node*>(node.get());
  m->i0 = j0;
  m->i1 = j1;
  return node;
}

// --- reverse mode -----------------------------------------------------------

namespace detail {

inline Value zeros_like_cols(const Value& like, int rows, int cols) {
  if (like->shape.size() == 1) return constant(Tensor::zeros({cols}));
  (void)rows;
  return constant(Tensor::zeros({like->shape[0], cols}));
}

/// Adjoint of slice_cols: place g back into a zero tensor of the input's width.
inline Value unslice(const Value& input, Value g, int j0, int j1) {
  int n = input->shape[static_cast<int>(input->shape.size()) - 1];
  int rows = input->shape.size() == 2 ? input->shape[0] : 1;
  Value out = std::move(g);
  if (j0 > 0) out = concat_cols(zeros_like_cols(input, rows, j0), out);
  if (j1 < n) out = concat_cols(out, zeros_like_cols(input, rows, n - j1));
  return out;
}

inline void vjp(const Value& node, const Value& g, std::vector<Value>& out) {
  const auto& in = node->inputs;
  switch (node->op) {
    case Op::kConst:
    case Op::kParam:
      return;
    case Op::kAdd:
      out[0] = g;
      out[1] = g;
      return;
    case Op::kSub:
      out[0] = g;
      out[1] = neg(g);
      return;
    case Op::kMul:
      out[0] = mul(g, in[1]);
      out[1] = mul(g, in[0]);
      return;
    case Op::kScale:
      out[0] = scale(g, node->scalar);
      return;
    case Op::kAddScalar:
      out[0] = g;
      return;
    case Op::kMatmul: {
      bool ta = node->trans_a, tb = node->trans_b;
      if (!ta && !tb) {
        out[0] = matmul(g, in[1], false, true);
        out[1] = matmul(in[0], g, true, false);
      } else if (ta && !tb) {
        out[0] = matmul(in[1], g, false, true);
        out[1] = matmul(in[0], g, false, false);
      } else if (!ta && tb) {
        out[0] = matmul(g, in[1], false, false);
        out[1] = matmul(g, in[0], true, false);
      } else {
        out[0] = matmul(in[1], g, true, true);
        out[1] = matmul(g, in[0], true, true);
      }
      return;
    }
    case Op::kBroadcastRows:
      out[0] = reduce_rows(g);
      return;
    case Op::kBroadcastCols:
      out[0] = reduce_cols(g);
      return;
    case Op::kBroadcastScalar:
      out[0] = reduce_sum(g);
      return;
    case Op::kRelu:
      out[0] = mul(g, relu_mask(in[0]));
      return;
    case Op::kReluMask:
      return;  // piecewise constant
    case Op::kTanh:
      out[0] = mul(g, add_scalar(neg(mul(node, node)), 1.0));
      return;
    case Op::kSin:
      out[0] = mul(g, ad::sin(add_scalar(in[0], 1.5707963267948966)));
      return;
    case Op::kExp:
      out[0] = mul(g, node);
      return;
    case Op::kLog:
      out[0] = mul(g, recip(in[0]));
      return;
    case Op::kSoftplus:
      out[0] = mul(g, sigmoid(in[0]));
      return;
    case Op::kRecip:
      out[0] = neg(mul(g, mul(node, node)));
      return;
    case Op::kReduceSum:
      out[0] = broadcast_scalar(g, in[0]->shape);
      return;
    case Op::kReduceMean:
      out[0] = scale(broadcast_scalar(g, in[0]->shape), 1.0 / static_cast<double>(shape_size(in[0]->shape)));
      return;
    case Op::kReduceRows:
      out[0] = broadcast_rows(g, in[0]->shape[0]);
      return;
    case Op::kReduceCols:
      out[0] = broadcast_cols(g, in[0]->shape[1]);
      return;
    case Op::kSoftmax: {
      Value s{node};
      Value sg = mul(s, g);
      out[0] = mul(s, sub(g, broadcast_cols(reduce_cols(sg), node->shape[1])));
      return;
    }
    case Op::kSoftmaxXent: {
      int n = in[0]->shape[1];
      Value gb = broadcast_cols(g, n);
      out[0] = mul(gb, sub(softmax(in[0]), in[1]));
      out[1] = mul(gb, neg(in[0]));
      return;
    }
    case Op::kConcatCols: {
      int rank = static_cast<int>(node->shape.size());
      int n1 = in[0]->shape[rank - 1];
      int n2 = in[1]->shape[rank - 1];
      out[0] = slice_cols(g, 0, n1);
      out[1] = slice_cols(g, n1, n1 + n2);
      return;
    }
    case Op::kSliceCols:
      out[0] = unslice(in[0], g, node->i0, node->i1);
      return;
  }
}

inline void collect(const Value& root, std::vector<Value>& order,
                    std::unordered_map<const Node*, bool>& seen) {
  // iterative DFS; order ends up unsorted, caller sorts by id
  std::vector<Value> stack{root};
  while (!stack.empty()) {
    Value v = stack.back();
    stack.pop_back();
    auto [it, fresh] = seen.emplace(v.get(), true);
    if (!fresh) continue;
    order.push_back(v);
    for (const auto& in : v->inputs) stack.push_back(in);
  }
}

}  // namespace detail

/// Reverse-mode gradients of a scalar root with respect to `wrt`, returned as
/// graphs over the same leaves (so they can be differentiated again).
/// A `wrt` entry that is absent from the graph is an error; one that is
/// present but unreached by the backward sweep yields zeros.
inline std::vector<Value> gradients(const Value& root, std::span<const Value> wrt) {
  if (!root->shape.empty())
    throw std::invalid_argument("gradients: root must be scalar, got " + shape_str(root->shape));

  std::vector<Value> order;
  std::unordered_map<const Node*, bool> seen;
  order.reserve(256);
  detail::collect(root, order, seen);
  std::sort(order.begin(), order.end(), [](const Value& a, const Value& b) { return a->id > b->id; });

  for (const auto& w : wrt)
    if (!seen.count(w.get()))
      throw std::invalid_argument("gradients: parameter not in graph: " +
                                  (w->op == Op::kParam ? w->name : std::string(op_name(w->op))));

  std::unordered_map<const Node*, Value> adjoint;
  adjoint.reserve(order.size());
  adjoint[root.get()] = scalar_const(1.0);

  std::vector<Value> slots;
  for (const auto& node : order) {
    auto it = adjoint.find(node.get());
    if (it == adjoint.end()) continue;
    const Value& g = it->second;
    if (node->inputs.empty()) continue;
    slots.assign(node->inputs.size(), nullptr);
    detail::vjp(node, g, slots);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      if (!slots[i]) continue;
      const Node* key = node->inputs[i].get();
      auto [jt, fresh] = adjoint.emplace(key, slots[i]);
      if (!fresh) jt->second = add(jt->second, slots[i]);
    }
  }

  std::vector<Value> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = adjoint.find(w.get());
    result.push_back(it != adjoint.end() ? it->second : constant(Tensor::zeros(w->shape)));
  }
  return result;
}

inline Value gradient(const Value& root, const Value& wrt) {
  return gradients(root, std::span<const Value>(&wrt, 1))[0];
}

/// Unrolls `steps` gradient-descent updates of `theta` against the scalar
/// loss produced by `loss_of`, entirely inside the graph. The returned values
/// stay differentiable with respect to the original `theta` leaves.
template <class LossFn>
std::vector<Value> unroll_gradient_descent(LossFn&& loss_of, std::vector<Value> theta, double alpha,
                                           int steps) {
  if (alpha < 0) throw std::invalid_argument("unroll_gradient_descent: negative step size");
  if (steps < 0) throw std::invalid_argument("unroll_gradient_descent: negative step count");
  for (int s = 0; s < steps; ++s) {
    Value loss = loss_of(std::span<const Value>(theta));
    std::vector<Value> g = gradients(loss, theta);
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = sub(theta[i], scale(g[i], alpha));
  }
  return theta;
}

/// d/dtheta of outer_loss evaluated at the inner-descent-adapted parameters,
/// including the second-order term. steps = 0 or alpha = 0 degenerates to the
/// plain gradient of the outer loss at theta.
template <class InnerLoss, class OuterLoss>
std::vector<Value> grad_through_update(InnerLoss&& inner, OuterLoss&& outer,
                                       const std::vector<Value>& theta, double alpha, int steps) {
  std::vector<Value> adapted =
      unroll_gradient_descent(std::forward<InnerLoss>(inner), theta, alpha, steps);
  Value outer_loss = outer(std::span<const Value>(adapted));
  return gradients(outer_loss, theta);
}

}  // namespace metareg::ad

#endif  // METAREG_GRAPH_HPP
