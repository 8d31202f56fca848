#ifndef METAREG_LEARNERS_HPP
#define METAREG_LEARNERS_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "metareg/nets.hpp"
#include "metareg/program.hpp"
#include "metareg/tasks.hpp"

namespace metareg {

enum class Variant { kMaml, kMrMamlA, kMrMamlW, kCnp, kMrCnpA, kMrCnpW, kFinetune };
enum class Placement { kEncoderOnly, kAllWeights };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kMaml: return "maml";
    case Variant::kMrMamlA: return "mr_maml_a";
    case Variant::kMrMamlW: return "mr_maml_w";
    case Variant::kCnp: return "cnp";
    case Variant::kMrCnpA: return "mr_cnp_a";
    case Variant::kMrCnpW: return "mr_cnp_w";
    case Variant::kFinetune: return "finetune";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  for (Variant v : {Variant::kMaml, Variant::kMrMamlA, Variant::kMrMamlW, Variant::kCnp,
                    Variant::kMrCnpA, Variant::kMrCnpW, Variant::kFinetune})
    if (s == variant_name(v)) return v;
  throw std::invalid_argument("unknown learner variant: " + s);
}

struct LearnerConfig {
  Variant variant = Variant::kMaml;
  double beta = 0.0;
  double alpha = 0.01;
  int inner_steps_train = 5;
  int inner_steps_test = 20;
  double outer_lr = 1e-3;
  int meta_batch = 10;
  int test_samples = 10;  // S in the averaged-prediction rule
  Placement placement = Placement::kEncoderOnly;
  double weight_decay = 0.0;

  bool is_cnp() const {
    return variant == Variant::kCnp || variant == Variant::kMrCnpA || variant == Variant::kMrCnpW;
  }
  bool is_maml() const {
    return variant == Variant::kMaml || variant == Variant::kMrMamlA || variant == Variant::kMrMamlW;
  }
  bool regularizes_weights() const {
    return variant == Variant::kMrMamlW || variant == Variant::kMrCnpW;
  }
  bool regularizes_activations() const {
    return variant == Variant::kMrMamlA || variant == Variant::kMrCnpA;
  }

  void validate() const {
    if (beta < 0) throw std::invalid_argument("learner: beta must be >= 0");
    if (alpha <= 0) throw std::invalid_argument("learner: alpha must be > 0");
    if (inner_steps_train < 0 || inner_steps_test < 0)
      throw std::invalid_argument("learner: negative inner step count");
    if (outer_lr <= 0) throw std::invalid_argument("learner: outer_lr must be > 0");
    if (meta_batch < 1) throw std::invalid_argument("learner: meta_batch must be >= 1");
    if (test_samples < 1) throw std::invalid_argument("learner: test_samples must be >= 1");
    if (weight_decay < 0) throw std::invalid_argument("learner: weight_decay must be >= 0");
    if (placement == Placement::kAllWeights && !regularizes_weights())
      throw std::invalid_argument("learner: all_weights placement requires a weights regularizer");
  }
};

enum class Family { kSinusoid, kClassification };

/// Architecture bound to a task family. Encoder/decoder widths follow the
/// family; (A) variants replace the deterministic encoder output with a
/// sampled bottleneck of dimension `bottleneck_dim`.
struct TaskSpec {
  Family family = Family::kSinusoid;
  int input_dim = 21;
  int n_way = 0;  // classification only
  int encoder_width = 100;
  int bottleneck_dim = 20;
  int feature_width = 128;
  int decoder_hidden = 100;

  static TaskSpec sinusoid(int input_dim = 21) {
    TaskSpec t;
    t.family = Family::kSinusoid;
    t.input_dim = input_dim;
    return t;
  }
  static TaskSpec classification(int input_dim = 16, int n_way = 5) {
    TaskSpec t;
    t.family = Family::kClassification;
    t.input_dim = input_dim;
    t.n_way = n_way;
    t.encoder_width = 64;
    t.bottleneck_dim = 16;
    t.decoder_hidden = 64;
    return t;
  }

  int out_width() const { return family == Family::kSinusoid ? 1 : n_way; }
  int y_dim() const { return family == Family::kSinusoid ? 1 : n_way; }
};

struct TrainStepReport {
  std::int64_t step = 0;
  double nll = 0;
  double kl = 0;  // weights KL for (W); mean per-example bottleneck KL for (A)
  double weight_decay_term = 0;
  double total = 0;
  std::map<std::string, double> grad_norms;  // per parameter block

  nlohmann::json to_json() const {
    return {{"step", step}, {"nll", nll}, {"kl", kl}, {"total", total}, {"grad_norms", grad_norms}};
  }
};

class TrainingFault : public std::runtime_error {
 public:
  TrainingFault(const std::string& what, nlohmann::json diagnostic)
      : std::runtime_error(what), diagnostic_(std::move(diagnostic)) {}
  const nlohmann::json& diagnostic() const { return diagnostic_; }

 private:
  nlohmann::json diagnostic_;
};

struct EvalResult {
  double mean = 0;
  double se = 0;
  int n_tasks = 0;
};

// --- shared small pieces -----------------------------------------------

struct AdamState {
  std::vector<double> m, v;
  std::int64_t t = 0;
};

inline void adam_update(Tensor& w, const Tensor& grad, AdamState& st, double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (st.m.empty()) {
    st.m.assign(w.data.size(), 0.0);
    st.v.assign(w.data.size(), 0.0);
  }
  st.t += 1;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < w.data.size(); ++i) {
    const double g = grad.data[i];
    st.m[i] = b1 * st.m[i] + (1 - b1) * g;
    st.v[i] = b2 * st.v[i] + (1 - b2) * g * g;
    w.data[i] -= lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps);
  }
}

/// Per-task metric on raw targets: MSE for regression, accuracy for
/// classification (argmax of averaged probabilities, lowest index on ties).
inline int argmax_row_of(const Tensor& probs, int row) {
  int best = 0;
  for (int j = 1; j < probs.cols(); ++j)
    if (probs.at(row, j) > probs.at(row, best)) best = j;
  return best;
}

inline double task_metric(Family family, const Tensor& pred, std::span<const Example> test) {
  if (family == Family::kSinusoid) {
    double mse = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const double d = pred.at(static_cast<int>(i), 0) - test[i].y;
      mse += d * d;
    }
    return mse / static_cast<double>(test.size());
  }
  int hits = 0;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (argmax_row_of(pred, static_cast<int>(i)) == static_cast<int>(test[i].y)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(test.size());
}

inline EvalResult summarize_metrics(const std::vector<double>& metrics) {
  EvalResult r;
  r.n_tasks = static_cast<int>(metrics.size());
  for (double m : metrics) r.mean += m;
  r.mean /= static_cast<double>(r.n_tasks);
  if (r.n_tasks > 1) {
    double ss = 0;
    for (double m : metrics) ss += (m - r.mean) * (m - r.mean);
    r.se = std::sqrt(ss / (r.n_tasks - 1)) / std::sqrt(static_cast<double>(r.n_tasks));
  }
  return r;
}

/// Evaluation loop over a task stream with an arbitrary predictor
/// (TaskView, queries) -> predictions. Learners plug in meta_test_predict;
/// tests plug in oracles.
template <class PredictFn>
EvalResult evaluate_with(const TaskGenerator& gen, int n_tasks, Family family, int input_dim,
                         PredictFn&& predict, StreamRng& rng,
                         const std::function<void(const Task&, const Tensor&)>& observer = {}) {
  if (n_tasks < 1) throw std::invalid_argument("evaluate: n_tasks must be >= 1");
  std::vector<double> metrics;
  metrics.reserve(static_cast<std::size_t>(n_tasks));
  for (int i = 0; i < n_tasks; ++i) {
    Task task = gen.sample(rng);
    Tensor queries = examples_x(task.test, input_dim);
    Tensor pred = predict(view_of(task), queries);
    metrics.push_back(task_metric(family, pred, task.test));
    if (observer) observer(task, pred);
  }
  return summarize_metrics(metrics);
}

/// CNP summary: mean over task-training examples of the feature head applied
/// to (z_i, y_i). Exactly permutation invariant (value-sorted reduction).
inline ad::Value cnp_summary_graph(const LayerNodes& feature, const ad::Value& z,
                                   const ad::Value& y) {
  if (z->shape.empty() || z->shape[0] != y->shape[0])
    throw std::invalid_argument("cnp_summary: z and y row counts disagree (empty task set?)");
  const int k = z->shape[0];
  ad::Value h = ad::relu(dense(ad::concat_cols(z, y), feature));
  return ad::scale(ad::reduce_rows(h), 1.0 / static_cast<double>(k));
}

/// `steps` descent updates of `theta` on the mean per-example loss. The
/// result is a graph differentiable with respect to the initial theta (the
/// second-order MAML path).
template <class LossFn>
std::vector<ad::Value> inner_adapt_graph(LossFn&& loss_of, std::vector<ad::Value> theta,
                                         double alpha, int steps) {
  return ad::unroll_gradient_descent(std::forward<LossFn>(loss_of), std::move(theta), alpha, steps);
}

namespace detail {

inline double tensor_l2(const Tensor& t) { return l2_norm(t.data); }

struct Leaves {
  std::unordered_map<std::string, ad::Value> map;
  ad::Value operator()(const std::string& name, const Shape& shape) {
    auto it = map.find(name);
    if (it != map.end()) return it->second;
    ad::Value v = ad::param(name, shape);
    map.emplace(name, v);
    return v;
  }
};

}  // namespace detail

// --- the learner -------------------------------------------------------

/// One meta-learner: parameter blocks, outer optimizer state, and a cache of
/// compiled programs keyed by episode shape. Single writer for training;
/// prediction paths are read-only over the numeric state.
class Learner {
 public:
  Learner(TaskSpec task, LearnerConfig cfg, std::uint64_t seed)
      : task_(task), cfg_(cfg) {
    cfg_.validate();
    if (task_.family == Family::kClassification && task_.n_way < 2)
      throw std::invalid_argument("learner: classification needs n_way >= 2");
    StreamRng init_rng(seed, "init");
    build_blocks(init_rng);
  }

  const TaskSpec& task_spec() const { return task_; }
  const LearnerConfig& config() const { return cfg_; }
  std::vector<ParamBlock>& blocks() { return blocks_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  std::int64_t step_count() const { return step_; }

  /// KL(q(theta)||N(0,I)) summed over variational blocks; 0 when none.
  double kl_weights() const {
    double kl = 0;
    for (const auto& b : blocks_)
      if (b.kind == BlockKind::kVariational) kl += kl_to_std(b.vw);
    return kl;
  }

  /// Total dimension of the variational block (for bound audits).
  std::int64_t variational_dim() const {
    std::int64_t n = 0;
    for (const auto& b : blocks_)
      if (b.kind == BlockKind::kVariational) n += b.size();
    return n;
  }

  /// FNV-1a over the numeric state (weights + optimizer moments).
  std::uint64_t state_hash() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto mix = [&h](const std::vector<double>& v) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
      for (std::size_t i = 0; i < v.size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001B3ULL;
      }
    };
    for (const auto& b : blocks_) {
      if (b.kind == BlockKind::kVariational) {
        mix(b.vw.mu.data);
        mix(b.vw.rho.data);
      } else {
        mix(b.value.data);
      }
    }
    for (const auto& t : trainables_) {
      mix(t.adam.m);
      mix(t.adam.v);
    }
    return h;
  }

  // --- training ---------------------------------------------------------

  /// One outer update on a meta-batch (Alg. 1 / Alg. 2 step).
  TrainStepReport meta_train_step(std::span<const Task> batch, StreamRng& noise) {
    if (batch.empty()) throw std::invalid_argument("meta_train_step: empty batch");
    TrainStepReport rep;
    rep.step = ++step_;

    ad::Bindings& b = bindings_;
    bind_parameters(b);
    draw_weight_noise(b, noise);

    std::vector<Tensor> grad_acc;
    double nll_sum = 0, klact_sum = 0, inner0_max = 0;

    if (cfg_.variant == Variant::kFinetune) {
      auto& entry = pooled_entry(batch);
      bind_pooled(b, batch);
      auto out = entry.prog.run(b, entry.ctx);
      nll_sum = out[0]->item() * static_cast<double>(batch.size());
      grad_acc.reserve(trainables_.size());
      for (std::size_t t = 0; t < trainables_.size(); ++t) grad_acc.push_back(*out[1 + t]);
    } else {
      const int k_train = static_cast<int>(batch[0].train.size());
      const int k_test = static_cast<int>(batch[0].test.size());
      auto& entry = train_entry(k_train, k_test);
      for (const Task& task : batch) {
        bind_task(b, view_of(task), noise);
        auto out = entry.prog.run(b, entry.ctx);
        const double nll = out[0]->item();
        const double klact = out[1]->item();
        const double inner0 = out[2]->item();
        nll_sum += nll;
        klact_sum += klact;
        inner0_max = std::max(inner0_max, inner0);
        if (grad_acc.empty()) {
          grad_acc.reserve(trainables_.size());
          for (std::size_t t = 0; t < trainables_.size(); ++t) grad_acc.push_back(*out[3 + t]);
        } else {
          for (std::size_t t = 0; t < trainables_.size(); ++t) {
            const Tensor& g = *out[3 + t];
            for (std::size_t i = 0; i < g.data.size(); ++i) grad_acc[t].data[i] += g.data[i];
          }
        }
      }
    }

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (auto& g : grad_acc)
      for (auto& v : g.data) v *= inv_b;
    rep.nll = nll_sum * inv_b;

    if (cfg_.regularizes_activations()) {
      rep.kl = klact_sum * inv_b;
    } else if (cfg_.regularizes_weights()) {
      auto& klentry = kl_entry();
      auto out = klentry.prog.run(b, klentry.ctx);
      rep.kl = out[0]->item();
      for (std::size_t t = 0; t < trainables_.size(); ++t) {
        const Tensor& g = *out[1 + t];
        for (std::size_t i = 0; i < g.data.size(); ++i)
          grad_acc[t].data[i] += cfg_.beta * g.data[i];
      }
    }

    // weight decay on point weights and variational means
    if (cfg_.weight_decay > 0) {
      for (std::size_t t = 0; t < trainables_.size(); ++t) {
        if (trainables_[t].part == Part::kRho) continue;
        const Tensor& w = tensor_of(trainables_[t]);
        rep.weight_decay_term += cfg_.weight_decay * tensor_l2_sq(w);
        for (std::size_t i = 0; i < w.data.size(); ++i)
          grad_acc[t].data[i] += 2.0 * cfg_.weight_decay * w.data[i];
      }
    }

    rep.total = rep.nll + cfg_.beta * rep.kl + rep.weight_decay_term;

    if (!std::isfinite(rep.total))
      throw TrainingFault("non-finite training loss", rep.to_json());
    if (rep.total > 1e6 || inner0_max > 1e6)
      throw TrainingFault("training diverged (loss > 1e6)", rep.to_json());

    for (std::size_t t = 0; t < trainables_.size(); ++t) {
      const std::string& blk = blocks_[static_cast<std::size_t>(trainables_[t].block)].name;
      double& norm = rep.grad_norms[blk];
      norm = std::sqrt(norm * norm + tensor_l2_sq(grad_acc[t]));
    }
    for (std::size_t t = 0; t < trainables_.size(); ++t)
      adam_update(tensor_of(trainables_[t]), grad_acc[t], trainables_[t].adam, cfg_.outer_lr);
    return rep;
  }

  // --- prediction (Alg. 3) ----------------------------------------------

  /// Averaged prediction over S posterior samples: regression returns [Q,1]
  /// outputs, classification returns [Q,N] averaged class probabilities.
  Tensor meta_test_predict(const TaskView& task, const Tensor& queries, int S, StreamRng& rng,
                           int inner_steps_override = -1) const {
    if (S < 1) throw std::invalid_argument("meta_test_predict: S must be >= 1");
    if (task.train.empty()) throw std::invalid_argument("meta_test_predict: empty task training set");
    const int k = static_cast<int>(task.train.size());
    const int q = queries.shape[0];
    const int steps = inner_steps_override >= 0 ? inner_steps_override : cfg_.inner_steps_test;
    auto& entry = predict_entry(k, q, steps);
    std::lock_guard<std::mutex> lock(entry.mutex);

    ad::Bindings b;
    bind_parameters(b);
    b["x"] = examples_x(task.train, task_.input_dim);
    b["y"] = label_tensor(task.train);
    b["xq"] = queries;

    Tensor acc = Tensor::zeros({q, out_cols()});
    for (int s = 0; s < S; ++s) {
      draw_weight_noise(b, rng);
      draw_bottleneck_noise(b, "zeps", k, rng);
      draw_bottleneck_noise(b, "zeps_q", q, rng);
      auto out = entry.prog.run(b, entry.ctx);
      for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += out[0]->data[i];
    }
    for (auto& v : acc.data) v /= static_cast<double>(S);
    return acc;
  }

  /// Prediction with zero adaptation: MAML-family uses the unadapted head;
  /// CNP substitutes the empty-task summary (zero vector) for phi.
  Tensor predict_pre_update(const Tensor& queries, int S, StreamRng& rng) const {
    if (S < 1) throw std::invalid_argument("predict_pre_update: S must be >= 1");
    const int q = queries.shape[0];
    auto& entry = preupdate_entry(q);
    std::lock_guard<std::mutex> lock(entry.mutex);

    ad::Bindings b;
    bind_parameters(b);
    b["xq"] = queries;

    Tensor acc = Tensor::zeros({q, out_cols()});
    for (int s = 0; s < S; ++s) {
      draw_weight_noise(b, rng);
      draw_bottleneck_noise(b, "zeps_q", q, rng);
      auto out = entry.prog.run(b, entry.ctx);
      for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += out[0]->data[i];
    }
    for (auto& v : acc.data) v /= static_cast<double>(S);
    return acc;
  }

  /// Mean task metric (MSE on raw targets, or accuracy) with standard error.
  /// The observer sees each task and its predictions (diagnostics hooks);
  /// learner code itself never reads Task.meta.
  EvalResult evaluate(const TaskGenerator& gen, int n_tasks, int S, StreamRng& rng,
                      const std::function<void(const Task&, const Tensor&)>& observer = {}) const {
    return evaluate_with(
        gen, n_tasks, task_.family, task_.input_dim,
        [&](const TaskView& task, const Tensor& queries) {
          return meta_test_predict(task, queries, S, rng);
        },
        rng, observer);
  }

  // --- checkpointing ------------------------------------------------------

  nlohmann::json to_checkpoint(nlohmann::json spec) const {
    spec["step"] = step_;
    return checkpoint_to_json(std::move(spec), blocks_);
  }

  void restore_blocks(std::vector<ParamBlock> blocks) {
    if (blocks.size() != blocks_.size()) throw std::invalid_argument("restore: block count mismatch");
    for (std::size_t i = 0; i < blocks.size(); ++i)
      if (blocks[i].name != blocks_[i].name || blocks[i].shape != blocks_[i].shape ||
          blocks[i].kind != blocks_[i].kind)
        throw std::invalid_argument("restore: block layout mismatch at " + blocks[i].name);
    blocks_ = std::move(blocks);
  }

 private:
  enum class Part { kValue, kMu, kRho };

  struct Trainable {
    std::string leaf;  // graph parameter name
    int block;
    Part part;
    AdamState adam;
  };

  struct Entry {
    ad::Program prog;
    ad::Program::Context ctx;
    mutable std::mutex mutex;
  };

  TaskSpec task_;
  LearnerConfig cfg_;
  std::vector<ParamBlock> blocks_;
  std::vector<Trainable> trainables_;
  std::int64_t step_ = 0;
  ad::Bindings bindings_;

  mutable std::map<std::string, std::unique_ptr<Entry>> cache_;
  mutable std::mutex cache_mutex_;

  static double tensor_l2_sq(const Tensor& t) {
    double s = 0;
    for (double v : t.data) s += v * v;
    return s;
  }

  Tensor& tensor_of(const Trainable& t) {
    ParamBlock& b = blocks_[static_cast<std::size_t>(t.block)];
    switch (t.part) {
      case Part::kValue: return b.value;
      case Part::kMu: return b.vw.mu;
      case Part::kRho: return b.vw.rho;
    }
    throw std::logic_error("unreachable");
  }

  int z_width() const {
    return cfg_.regularizes_activations() ? task_.bottleneck_dim : task_.encoder_width;
  }
  int enc_out() const { return cfg_.regularizes_activations() ? 2 * task_.bottleneck_dim : task_.encoder_width; }
  int out_cols() const { return task_.out_width(); }

  Tensor label_tensor(std::span<const Example> ex) const {
    return task_.family == Family::kSinusoid ? examples_y(ex) : examples_y_onehot(ex, task_.n_way);
  }

  void build_blocks(StreamRng& rng) {
    const bool all_var = cfg_.regularizes_weights() && cfg_.placement == Placement::kAllWeights;
    const bool enc_var = cfg_.regularizes_weights();
    auto kind = [&](bool encoder) {
      if (all_var) return BlockKind::kVariational;
      return (encoder && enc_var) ? BlockKind::kVariational : BlockKind::kDeterministic;
    };
    auto push = [&](const std::string& name, Shape shape, bool encoder) {
      blocks_.push_back(make_block(name, std::move(shape), kind(encoder), rng));
    };

    push("enc.W", {task_.input_dim, enc_out()}, true);
    push("enc.b", {enc_out()}, true);
    if (cfg_.is_cnp()) {
      push("feat.W", {z_width() + task_.y_dim(), task_.feature_width}, false);
      push("feat.b", {task_.feature_width}, false);
      push("dec0.W", {task_.feature_width + z_width(), task_.decoder_hidden}, false);
      push("dec0.b", {task_.decoder_hidden}, false);
      push("dec1.W", {task_.decoder_hidden, out_cols()}, false);
      push("dec1.b", {out_cols()}, false);
    } else {
      push("head0.W", {z_width(), task_.decoder_hidden}, false);
      push("head0.b", {task_.decoder_hidden}, false);
      push("head1.W", {task_.decoder_hidden, out_cols()}, false);
      push("head1.b", {out_cols()}, false);
    }

    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      if (blocks_[i].kind == BlockKind::kVariational) {
        trainables_.push_back({blocks_[i].name + ".mu", static_cast<int>(i), Part::kMu, {}});
        trainables_.push_back({blocks_[i].name + ".rho", static_cast<int>(i), Part::kRho, {}});
      } else {
        trainables_.push_back({blocks_[i].name, static_cast<int>(i), Part::kValue, {}});
      }
    }
  }

  void bind_parameters(ad::Bindings& b) const {
    for (const auto& blk : blocks_) {
      if (blk.kind == BlockKind::kVariational) {
        b[blk.name + ".mu"] = blk.vw.mu;
        b[blk.name + ".rho"] = blk.vw.rho;
      } else {
        b[blk.name] = blk.value;
      }
    }
  }

  void draw_weight_noise(ad::Bindings& b, StreamRng& rng) const {
    for (const auto& blk : blocks_) {
      if (blk.kind != BlockKind::kVariational) continue;
      Tensor eps = Tensor::zeros(blk.shape);
      for (auto& v : eps.data) v = rng.normal();
      b[blk.name + ".eps"] = std::move(eps);
    }
  }

  void draw_bottleneck_noise(ad::Bindings& b, const std::string& name, int rows, StreamRng& rng) const {
    if (!cfg_.regularizes_activations()) return;
    Tensor eps = Tensor::zeros({rows, task_.bottleneck_dim});
    for (auto& v : eps.data) v = rng.normal();
    b[name] = std::move(eps);
  }

  void bind_task(ad::Bindings& b, const TaskView& task, StreamRng& noise) const {
    b["x"] = examples_x(task.train, task_.input_dim);
    b["y"] = label_tensor(task.train);
    b["xs"] = examples_x(task.test, task_.input_dim);
    b["ys"] = label_tensor(task.test);
    draw_bottleneck_noise(b, "zeps", static_cast<int>(task.train.size()), noise);
    draw_bottleneck_noise(b, "zeps_star", static_cast<int>(task.test.size()), noise);
  }

  void bind_pooled(ad::Bindings& b, std::span<const Task> batch) const {
    std::vector<Example> pooled;
    for (const Task& t : batch) {
      pooled.insert(pooled.end(), t.train.begin(), t.train.end());
      pooled.insert(pooled.end(), t.test.begin(), t.test.end());
    }
    b["px"] = examples_x(pooled, task_.input_dim);
    b["py"] = label_tensor(pooled);
  }

  // --- graph assembly -----------------------------------------------------

  /// Weight nodes per block: parameter leaves, or reparameterized samples for
  /// variational blocks.
  std::unordered_map<std::string, ad::Value> weight_nodes(detail::Leaves& leaves) const {
    std::unordered_map<std::string, ad::Value> w;
    for (const auto& blk : blocks_) {
      if (blk.kind == BlockKind::kVariational) {
        w[blk.name] = sample_weights_graph(leaves(blk.name + ".mu", blk.shape),
                                           leaves(blk.name + ".rho", blk.shape),
                                           leaves(blk.name + ".eps", blk.shape));
      } else {
        w[blk.name] = leaves(blk.name, blk.shape);
      }
    }
    return w;
  }

  struct Encoded {
    ad::Value z;
    ad::Value kl_rows;  // null unless the bottleneck is stochastic
  };

  Encoded encode(const std::unordered_map<std::string, ad::Value>& w, detail::Leaves& leaves,
                 const ad::Value& x, const std::string& eps_name) const {
    ad::Value head = ad::add(ad::matmul(x, w.at("enc.W")),
                             ad::broadcast_rows(w.at("enc.b"), x->shape[0]));
    if (!cfg_.regularizes_activations()) return {ad::relu(head), nullptr};
    ad::Value eps = leaves(eps_name, {x->shape[0], task_.bottleneck_dim});
    BottleneckNodes bn = bottleneck_encode_graph(head, eps);
    return {bn.z, bn.kl_rows};
  }

  ad::Value head_loss(std::span<const ad::Value> head, const ad::Value& z, const ad::Value& y) const {
    ad::Value h = ad::relu(ad::add(ad::matmul(z, head[0]), ad::broadcast_rows(head[1], z->shape[0])));
    ad::Value out = ad::add(ad::matmul(h, head[2]), ad::broadcast_rows(head[3], z->shape[0]));
    if (task_.family == Family::kSinusoid) return ad::reduce_mean(gaussian_nll(out, y));
    return ad::reduce_mean(ad::softmax_xent(out, y));
  }

  ad::Value head_output(std::span<const ad::Value> head, const ad::Value& z, bool probs) const {
    ad::Value h = ad::relu(ad::add(ad::matmul(z, head[0]), ad::broadcast_rows(head[1], z->shape[0])));
    ad::Value out = ad::add(ad::matmul(h, head[2]), ad::broadcast_rows(head[3], z->shape[0]));
    if (task_.family == Family::kClassification && probs) return ad::softmax(out);
    return out;
  }

  std::vector<ad::Value> head_tensors(const std::unordered_map<std::string, ad::Value>& w) const {
    return {w.at("head0.W"), w.at("head0.b"), w.at("head1.W"), w.at("head1.b")};
  }

  ad::Value decoder_output(const std::unordered_map<std::string, ad::Value>& w, const ad::Value& phi,
                           const ad::Value& zq, bool probs) const {
    ad::Value din = ad::concat_cols(ad::broadcast_rows(phi, zq->shape[0]), zq);
    ad::Value h = ad::relu(ad::add(ad::matmul(din, w.at("dec0.W")),
                                   ad::broadcast_rows(w.at("dec0.b"), zq->shape[0])));
    ad::Value out = ad::add(ad::matmul(h, w.at("dec1.W")),
                            ad::broadcast_rows(w.at("dec1.b"), zq->shape[0]));
    if (task_.family == Family::kClassification && probs) return ad::softmax(out);
    return out;
  }

  ad::Value output_loss(const ad::Value& out, const ad::Value& y) const {
    if (task_.family == Family::kSinusoid) return ad::reduce_mean(gaussian_nll(out, y));
    return ad::reduce_mean(ad::softmax_xent(out, y));
  }

  std::vector<ad::Value> trainable_leaves(detail::Leaves& leaves) const {
    std::vector<ad::Value> out;
    out.reserve(trainables_.size());
    for (const auto& t : trainables_)
      out.push_back(leaves(t.leaf, blocks_[static_cast<std::size_t>(t.block)].shape));
    return out;
  }

  /// Per-task training objective: outputs [test NLL, activation KL,
  /// step-0 inner loss, d(NLL + beta*KL_act)/d(trainable)...].
  Entry& train_entry(int k_train, int k_test) const {
    const std::string key = "train/" + std::to_string(k_train) + "/" + std::to_string(k_test);
    return cached(key, [&] {
      detail::Leaves leaves;
      auto w = weight_nodes(leaves);
      ad::Value x = leaves("x", {k_train, task_.input_dim});
      ad::Value y = leaves("y", {k_train, task_.y_dim()});
      ad::Value xs = leaves("xs", {k_test, task_.input_dim});
      ad::Value ys = leaves("ys", {k_test, task_.y_dim()});

      Encoded ztr = encode(w, leaves, x, "zeps");
      Encoded zte = encode(w, leaves, xs, "zeps_star");

      ad::Value nll;
      ad::Value inner0;
      if (cfg_.is_cnp()) {
        ad::Value phi = cnp_summary_graph({w.at("feat.W"), w.at("feat.b")}, ztr.z, y);
        nll = output_loss(decoder_output(w, phi, zte.z, false), ys);
        inner0 = nll;
      } else {
        auto head = head_tensors(w);
        auto loss_fn = [&](std::span<const ad::Value> h) { return head_loss(h, ztr.z, y); };
        inner0 = head_loss(head, ztr.z, y);
        auto adapted = inner_adapt_graph(loss_fn, head, cfg_.alpha, cfg_.inner_steps_train);
        nll = head_loss(adapted, zte.z, ys);
      }

      ad::Value kl_act = cfg_.regularizes_activations() ? ad::reduce_mean(zte.kl_rows)
                                                        : ad::scalar_const(0.0);
      ad::Value objective = cfg_.regularizes_activations()
                                ? ad::add(nll, ad::scale(kl_act, cfg_.beta))
                                : nll;

      auto wrt = trainable_leaves(leaves);
      auto grads = ad::gradients(objective, wrt);
      std::vector<ad::Value> outputs{nll, kl_act, inner0};
      outputs.insert(outputs.end(), grads.begin(), grads.end());
      return ad::Program::compile(outputs);
    });
  }

  /// KL of the variational blocks with gradients (evaluated once per step).
  Entry& kl_entry() const {
    return cached("klw", [&] {
      detail::Leaves leaves;
      ad::Value total = ad::scalar_const(0.0);
      for (const auto& blk : blocks_)
        if (blk.kind == BlockKind::kVariational)
          total = ad::add(total, kl_std_normal_graph(leaves(blk.name + ".mu", blk.shape),
                                                     leaves(blk.name + ".rho", blk.shape)));
      auto wrt = trainable_leaves(leaves);
      // deterministic leaves are absent from the KL graph; emit zeros for them
      std::vector<ad::Value> outputs{total};
      for (std::size_t i = 0; i < wrt.size(); ++i) {
        const auto& t = trainables_[i];
        if (blocks_[static_cast<std::size_t>(t.block)].kind == BlockKind::kVariational)
          outputs.push_back(ad::gradients(total, std::span<const ad::Value>(&wrt[i], 1))[0]);
        else
          outputs.push_back(ad::constant(Tensor::zeros(blocks_[static_cast<std::size_t>(t.block)].shape)));
      }
      return ad::Program::compile(outputs);
    });
  }

  /// Pooled supervised step for the fine-tuning baseline.
  Entry& pooled_entry(std::span<const Task> batch) const {
    int m = 0;
    for (const Task& t : batch) m += static_cast<int>(t.train.size() + t.test.size());
    const std::string key = "pooled/" + std::to_string(m);
    return cached(key, [&] {
      detail::Leaves leaves;
      auto w = weight_nodes(leaves);
      ad::Value px = leaves("px", {m, task_.input_dim});
      ad::Value py = leaves("py", {m, task_.y_dim()});
      Encoded z = encode(w, leaves, px, "zeps");
      ad::Value nll = head_loss(head_tensors(w), z.z, py);
      auto wrt = trainable_leaves(leaves);
      auto grads = ad::gradients(nll, wrt);
      std::vector<ad::Value> outputs{nll};
      outputs.insert(outputs.end(), grads.begin(), grads.end());
      return ad::Program::compile(outputs);
    });
  }

  /// Adapt on (x, y), answer queries xq. Output: [Q, 1] or [Q, N] probabilities.
  Entry& predict_entry(int k, int q, int steps) const {
    const std::string key = "pred/" + std::to_string(k) + "/" + std::to_string(q) + "/" + std::to_string(steps);
    return cached(key, [&] {
      detail::Leaves leaves;
      auto w = weight_nodes(leaves);
      ad::Value x = leaves("x", {k, task_.input_dim});
      ad::Value y = leaves("y", {k, task_.y_dim()});
      ad::Value xq = leaves("xq", {q, task_.input_dim});

      Encoded ztr = encode(w, leaves, x, "zeps");
      Encoded zq = encode(w, leaves, xq, "zeps_q");

      ad::Value out;
      if (cfg_.is_cnp()) {
        ad::Value phi = cnp_summary_graph({w.at("feat.W"), w.at("feat.b")}, ztr.z, y);
        out = decoder_output(w, phi, zq.z, true);
      } else if (cfg_.variant == Variant::kFinetune) {
        // fine-tuning adapts every weight on the task training set
        std::vector<ad::Value> all{w.at("enc.W"), w.at("enc.b"), w.at("head0.W"), w.at("head0.b"),
                                   w.at("head1.W"), w.at("head1.b")};
        auto loss_fn = [&](std::span<const ad::Value> t) {
          ad::Value ez = ad::relu(ad::add(ad::matmul(x, t[0]), ad::broadcast_rows(t[1], k)));
          return head_loss(t.subspan(2), ez, y);
        };
        auto adapted = inner_adapt_graph(loss_fn, all, cfg_.alpha, steps);
        ad::Value ezq = ad::relu(ad::add(ad::matmul(xq, adapted[0]), ad::broadcast_rows(adapted[1], q)));
        out = head_output(std::span<const ad::Value>(adapted).subspan(2), ezq, true);
      } else {
        auto head = head_tensors(w);
        auto loss_fn = [&](std::span<const ad::Value> h) { return head_loss(h, ztr.z, y); };
        auto adapted = inner_adapt_graph(loss_fn, head, cfg_.alpha, steps);
        out = head_output(adapted, zq.z, true);
      }
      return ad::Program::compile(out);
    });
  }

  /// Zero-adaptation prediction: unadapted head (MAML family) or zero summary
  /// vector (CNP family).
  Entry& preupdate_entry(int q) const {
    const std::string key = "pre/" + std::to_string(q);
    return cached(key, [&] {
      detail::Leaves leaves;
      auto w = weight_nodes(leaves);
      ad::Value xq = leaves("xq", {q, task_.input_dim});
      Encoded zq = encode(w, leaves, xq, "zeps_q");
      ad::Value out;
      if (cfg_.is_cnp()) {
        ad::Value phi = ad::constant(Tensor::zeros({task_.feature_width}));
        out = decoder_output(w, phi, zq.z, true);
      } else {
        out = head_output(head_tensors(w), zq.z, true);
      }
      return ad::Program::compile(out);
    });
  }

  template <class Build>
  Entry& cached(const std::string& key, Build&& build) const {
    std::lock_guard<std::mutex> lock(cache_mutex_);
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      auto entry = std::make_unique<Entry>();
      entry->prog = build();
      entry->ctx = entry->prog.make_context();
      it = cache_.emplace(key, std::move(entry)).first;
    }
    return *it->second;
  }
};

}  // namespace metareg

#endif  // METAREG_LEARNERS_HPP
