#ifndef METAREG_PROGRAM_HPP
#define METAREG_PROGRAM_HPP

#include <algorithm>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "metareg/graph.hpp"
#include "metareg/tensor.hpp"

namespace metareg::ad {

using Bindings = std::unordered_map<std::string, Tensor>;

/// A graph compiled to a flat instruction list over dense value slots.
/// Compile once, evaluate many times; all slot shapes are static, so a
/// Context allocates every buffer up front and evaluation is allocation-free.
class Program {
 public:
  enum class Check {
    kOutputs,  // validate finiteness of outputs only
    kAll,      // validate every intermediate (slower; the eval() contract)
  };

  class Context {
   public:
    friend class Program;

   private:
    std::vector<Tensor> slots_;
    std::vector<double> scratch_;
  };

  static Program compile(std::span<const Value> outputs) {
    Program p;
    std::vector<Value> order;
    std::unordered_map<const Node*, bool> seen;
    for (const auto& out : outputs) detail::collect(out, order, seen);
    std::sort(order.begin(), order.end(),
              [](const Value& a, const Value& b) { return a->id < b->id; });

    std::unordered_map<const Node*, int> slot_of;
    slot_of.reserve(order.size());
    for (const auto& node : order) {
      int slot = static_cast<int>(p.nodes_.size());
      slot_of[node.get()] = slot;
      p.nodes_.push_back(node);
      switch (node->op) {
        case Op::kConst:
          p.const_slots_.push_back(slot);
          break;
        case Op::kParam:
          p.params_.push_back({node->name, slot});
          break;
        default: {
          Instr ins;
          ins.op = node->op;
          ins.out = slot;
          ins.a = slot_of.at(node->inputs[0].get());
          if (node->inputs.size() > 1) ins.b = slot_of.at(node->inputs[1].get());
          ins.scalar = node->scalar;
          ins.i0 = node->i0;
          ins.i1 = node->i1;
          ins.trans_a = node->trans_a;
          ins.trans_b = node->trans_b;
          p.code_.push_back(ins);
        }
      }
    }
    for (const auto& out : outputs) p.out_slots_.push_back(slot_of.at(out.get()));
    return p;
  }

  static Program compile(const Value& output) {
    return compile(std::span<const Value>(&output, 1));
  }

  Context make_context() const {
    Context ctx;
    ctx.slots_.reserve(nodes_.size());
    std::size_t max_rows = 1;
    for (const auto& node : nodes_) {
      ctx.slots_.push_back(Tensor::zeros(node->shape));
      if (node->shape.size() == 2) max_rows = std::max(max_rows, static_cast<std::size_t>(node->shape[0]));
    }
    for (int slot : const_slots_) ctx.slots_[static_cast<std::size_t>(slot)] = nodes_[static_cast<std::size_t>(slot)]->literal;
    ctx.scratch_.resize(max_rows);
    return ctx;
  }

  const std::vector<std::pair<std::string, int>>& params() const { return params_; }
  std::size_t size() const { return nodes_.size(); }

  /// Evaluates the program; returned pointers alias Context storage and stay
  /// valid until the next run on the same Context.
  std::vector<const Tensor*> run(const Bindings& bindings, Context& ctx,
                                 Check check = Check::kOutputs) const {
    for (const auto& [name, slot] : params_) {
      auto it = bindings.find(name);
      if (it == bindings.end()) throw std::invalid_argument("unbound parameter: " + name);
      Tensor& dst = ctx.slots_[static_cast<std::size_t>(slot)];
      if (it->second.shape != dst.shape)
        throw std::invalid_argument("parameter " + name + ": bound shape " + shape_str(it->second.shape) +
                                    " does not match declared " + shape_str(dst.shape));
      std::memcpy(dst.data.data(), it->second.data.data(), dst.data.size() * sizeof(double));
    }
    for (const auto& ins : code_) {
      exec(ins, ctx);
      if (check == Check::kAll && !ctx.slots_[static_cast<std::size_t>(ins.out)].all_finite())
        throw std::runtime_error(std::string("non-finite value after ") + op_name(ins.op));
    }
    std::vector<const Tensor*> out;
    out.reserve(out_slots_.size());
    for (int slot : out_slots_) {
      const Tensor& t = ctx.slots_[static_cast<std::size_t>(slot)];
      if (check == Check::kOutputs && !t.all_finite())
        throw std::runtime_error("non-finite program output");
      out.push_back(&t);
    }
    return out;
  }

 private:
  struct Instr {
    Op op;
    int out;
    int a = -1, b = -1;
    double scalar = 0;
    int i0 = 0, i1 = 0;
    bool trans_a = false, trans_b = false;
  };

  std::vector<Value> nodes_;
  std::vector<Instr> code_;
  std::vector<std::pair<std::string, int>> params_;
  std::vector<int> const_slots_;
  std::vector<int> out_slots_;

  static void matmul_kernel(const Tensor& A, const Tensor& B, Tensor& C, bool ta, bool tb) {
    const int m = C.shape[0], n = C.shape[1];
    const int k = ta ? A.shape[0] : A.shape[1];
    double* c = C.data.data();
    const double* a = A.data.data();
    const double* b = B.data.data();
    std::fill(C.data.begin(), C.data.end(), 0.0);
    if (!ta && !tb) {
      for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
          const double av = arow[l];
          const double* brow = b + static_cast<std::size_t>(l) * n;
          for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    } else if (!ta && tb) {
      for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
          const double* brow = b + static_cast<std::size_t>(j) * k;
          double s = 0;
          for (int l = 0; l < k; ++l) s += arow[l] * brow[l];
          crow[j] = s;
        }
      }
    } else if (ta && !tb) {
      for (int l = 0; l < k; ++l) {
        const double* arow = a + static_cast<std::size_t>(l) * m;
        const double* brow = b + static_cast<std::size_t>(l) * n;
        for (int i = 0; i < m; ++i) {
          const double av = arow[i];
          double* crow = c + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    } else {
      for (int i = 0; i < m; ++i) {
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
          const double* brow = b + static_cast<std::size_t>(j) * k;
          double s = 0;
          for (int l = 0; l < k; ++l) s += a[static_cast<std::size_t>(l) * m + i] * brow[l];
          crow[j] = s;
        }
      }
    }
  }

  void exec(const Instr& ins, Context& ctx) const {
    Tensor& out = ctx.slots_[static_cast<std::size_t>(ins.out)];
    const Tensor& A = ctx.slots_[static_cast<std::size_t>(ins.a)];
    const std::size_t na = A.data.size();
    switch (ins.op) {
      case Op::kAdd: {
        const Tensor& B = ctx.slots_[static_cast<std::size_t>(ins.b)];
        for (std::size_t i = 0; i < na; ++i) out.data[i] = A.data[i] + B.data[i];
        return;
      }
      case Op::kSub: {
        const Tensor& B = ctx.slots_[static_cast<std::size_t>(ins.b)];
        for (std::size_t i = 0; i < na; ++i) out.data[i] = A.data[i] - B.data[i];
        return;
      }
      case Op::kMul: {
        const Tensor& B = ctx.slots_[static_cast<std::size_t>(ins.b)];
        for (std::size_t i = 0; i < na; ++i) out.data[i] = A.data[i] * B.data[i];
        return;
      }
      case Op::kScale:
        for (std::size_t i = 0; i < na; ++i) out.data[i] = A.data[i] * ins.scalar;
        return;
      case Op::kAddScalar:
        for (std::size_t i = 0; i < na; ++i) out.data[i] = A.data[i] + ins.scalar;
        return;
      case Op::kMatmul:
        matmul_kernel(A, ctx.slots_[static_cast<std::size_t>(ins.b)], out, ins.trans_a, ins.trans_b);
        return;
      case Op::kBroadcastRows: {
        const int m = out.shape[0], n = out.shape[1];
        for (int i = 0; i < m; ++i)
          std::memcpy(out.data.data() + static_cast<std::size_t>(i) * n, A.data.data(), sizeof(double) * n);
        return;
      }
      case Op::kBroadcastCols: {
        const int m = out.shape[0], n = out.shape[1];
        for (int i = 0; i < m; ++i) {
          double* row = out.data.data() + static_cast<std::size_t>(i) * n;
          std::fill(row, row + n, A.data[static_cast<std::size_t>(i)]);
        }
        return;
      }
      case Op::kBroadcastScalar:
        std::fill(out.data.begin(), out.data.end(), A.data[0]);
        return;
      case Op::kRelu:
        for (std::size_t i = 0; i < na; ++i) out.data[i] = A.data[i] > 0 ? A.data[i] : 0.0;
        return;
      case Op::kReluMask:
        for (std::size_t i = 0; i < na; ++i) out.data[i] = A.data[i] > 0 ? 1.0 : 0.0;
        return;
      case Op::kTanh:
        for (std::size_t i = 0; i < na; ++i) out.data[i] = std::tanh(A.data[i]);
        return;
      case Op::kSin:
        for (std::size_t i = 0; i < na; ++i) out.data[i] = std::sin(A.data[i]);
        return;
      case Op::kExp:
        for (std::size_t i = 0; i < na; ++i) out.data[i] = std::exp(A.data[i]);
        return;
      case Op::kLog:
        for (std::size_t i = 0; i < na; ++i) out.data[i] = std::log(A.data[i]);
        return;
      case Op::kSoftplus:
        // log(1 + e^x), stably: max(x,0) + log1p(e^{-|x|})
        for (std::size_t i = 0; i < na; ++i) {
          const double x = A.data[i];
          out.data[i] = (x > 0 ? x : 0.0) + std::log1p(std::exp(-std::fabs(x)));
        }
        return;
      case Op::kRecip:
        for (std::size_t i = 0; i < na; ++i) out.data[i] = 1.0 / A.data[i];
        return;
      case Op::kReduceSum: {
        double s = 0;
        for (std::size_t i = 0; i < na; ++i) s += A.data[i];
        out.data[0] = s;
        return;
      }
      case Op::kReduceMean: {
        double s = 0;
        for (std::size_t i = 0; i < na; ++i) s += A.data[i];
        out.data[0] = s / static_cast<double>(na);
        return;
      }
      case Op::kReduceRows: {
        // value-sorted accumulation: the column sums are invariant to any
        // permutation of the input rows, bit for bit
        const int m = A.shape[0], n = A.shape[1];
        double* scratch = ctx.scratch_.data();
        for (int j = 0; j < n; ++j) {
          for (int i = 0; i < m; ++i) scratch[i] = A.data[static_cast<std::size_t>(i) * n + j];
          std::sort(scratch, scratch + m);
          double s = 0;
          for (int i = 0; i < m; ++i) s += scratch[i];
          out.data[static_cast<std::size_t>(j)] = s;
        }
        return;
      }
      case Op::kReduceCols: {
        const int m = A.shape[0], n = A.shape[1];
        for (int i = 0; i < m; ++i) {
          const double* row = A.data.data() + static_cast<std::size_t>(i) * n;
          double s = 0;
          for (int j = 0; j < n; ++j) s += row[j];
          out.data[static_cast<std::size_t>(i)] = s;
        }
        return;
      }
      case Op::kSoftmax: {
        const int m = A.shape[0], n = A.shape[1];
        for (int i = 0; i < m; ++i) {
          const double* row = A.data.data() + static_cast<std::size_t>(i) * n;
          double* orow = out.data.data() + static_cast<std::size_t>(i) * n;
          double mx = row[0];
          for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
          double s = 0;
          for (int j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            s += orow[j];
          }
          for (int j = 0; j < n; ++j) orow[j] /= s;
        }
        return;
      }
      case Op::kSoftmaxXent: {
        const Tensor& Y = ctx.slots_[static_cast<std::size_t>(ins.b)];
        const int m = A.shape[0], n = A.shape[1];
        for (int i = 0; i < m; ++i) {
          const double* row = A.data.data() + static_cast<std::size_t>(i) * n;
          const double* yrow = Y.data.data() + static_cast<std::size_t>(i) * n;
          double mx = row[0];
          for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
          double s = 0, dot = 0;
          for (int j = 0; j < n; ++j) {
            s += std::exp(row[j] - mx);
            dot += yrow[j] * row[j];
          }
          out.data[static_cast<std::size_t>(i)] = mx + std::log(s) - dot;
        }
        return;
      }
      case Op::kConcatCols: {
        const Tensor& B = ctx.slots_[static_cast<std::size_t>(ins.b)];
        const int m = out.rank() == 2 ? out.shape[0] : 1;
        const int n1 = A.cols(), n2 = B.cols(), n = n1 + n2;
        for (int i = 0; i < m; ++i) {
          std::memcpy(out.data.data() + static_cast<std::size_t>(i) * n,
                      A.data.data() + static_cast<std::size_t>(i) * n1, sizeof(double) * n1);
          std::memcpy(out.data.data() + static_cast<std::size_t>(i) * n + n1,
                      B.data.data() + static_cast<std::size_t>(i) * n2, sizeof(double) * n2);
        }
        return;
      }
      case Op::kSliceCols: {
        const int m = out.rank() == 2 ? out.shape[0] : 1;
        const int n = A.cols(), w = ins.i1 - ins.i0;
        for (int i = 0; i < m; ++i)
          std::memcpy(out.data.data() + static_cast<std::size_t>(i) * w,
                      A.data.data() + static_cast<std::size_t>(i) * n + ins.i0, sizeof(double) * w);
        return;
      }
      case Op::kConst:
      case Op::kParam:
        return;
    }
  }
};

/// One-shot evaluation with full intermediate validation. For hot paths,
/// compile once and reuse a Context instead.
inline Tensor eval(const Value& root, const Bindings& bindings) {
  Program p = Program::compile(root);
  Program::Context ctx = p.make_context();
  return *p.run(bindings, ctx, Program::Check::kAll)[0];
}

}  // namespace metareg::ad

#endif  // METAREG_PROGRAM_HPP
