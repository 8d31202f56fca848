#ifndef METAREG_DIAGNOSTICS_HPP
#define METAREG_DIAGNOSTICS_HPP

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "metareg/learners.hpp"

namespace metareg {

// --- pre-update metric (Table-5 style) -----------------------------------

/// Accuracy or MSE using unadapted parameters: zero inner steps for the
/// MAML family, the empty-task (zero) summary for the CNP family.
inline double pre_update_metric(const Learner& learner, std::span<const Task> tasks, int S,
                                StreamRng& rng) {
  if (tasks.empty()) throw std::invalid_argument("pre_update_metric: no tasks");
  const Family family = learner.task_spec().family;
  double acc = 0;
  for (const auto& task : tasks) {
    Tensor queries = examples_x(task.test, learner.task_spec().input_dim);
    Tensor pred = learner.predict_pre_update(queries, S, rng);
    acc += task_metric(family, pred, task.test);
  }
  return acc / static_cast<double>(tasks.size());
}

// --- task-training-data swap sensitivity -----------------------------------

/// Mean prediction shift at fixed query inputs when the task training set is
/// exchanged between two tasks. Regression: mean |y_i - y_j|; classification:
/// total variation between averaged class probabilities. A gap near zero is
/// the operational signature of complete memorization.
template <class PredictFn>
double d_swap_gap_with(PredictFn&& predict, std::span<const Task> tasks, int input_dim,
                       Family family, int n_pairs, int n_queries, StreamRng& rng) {
  if (tasks.size() < 2) throw std::invalid_argument("d_swap_gap: need at least 2 tasks");
  if (n_pairs < 1 || n_queries < 1) throw std::invalid_argument("d_swap_gap: bad pair/query counts");

  double total = 0;
  for (int p = 0; p < n_pairs; ++p) {
    const int i = rng.uniform_int(static_cast<int>(tasks.size()));
    int j = rng.uniform_int(static_cast<int>(tasks.size()) - 1);
    if (j >= i) ++j;

    // shared query inputs, recycled from task i's test set
    Tensor queries = Tensor::zeros({n_queries, input_dim});
    const auto& pool = tasks[static_cast<std::size_t>(i)].test;
    for (int q = 0; q < n_queries; ++q) {
      const auto& x = pool[static_cast<std::size_t>(q) % pool.size()].x;
      for (int d = 0; d < input_dim; ++d) queries.at(q, d) = x[static_cast<std::size_t>(d)];
    }

    Tensor pi = predict(view_of(tasks[static_cast<std::size_t>(i)]), queries);
    Tensor pj = predict(view_of(tasks[static_cast<std::size_t>(j)]), queries);

    double gap = 0;
    if (family == Family::kSinusoid) {
      for (int q = 0; q < n_queries; ++q) gap += std::fabs(pi.at(q, 0) - pj.at(q, 0));
      gap /= n_queries;
    } else {
      for (int q = 0; q < n_queries; ++q) {
        double tv = 0;
        for (int c = 0; c < pi.cols(); ++c) tv += std::fabs(pi.at(q, c) - pj.at(q, c));
        gap += 0.5 * tv;
      }
      gap /= n_queries;
    }
    total += gap;
  }
  return total / n_pairs;
}

inline double d_swap_gap(const Learner& learner, std::span<const Task> tasks, int S, int n_pairs,
                         int n_queries, StreamRng& rng) {
  StreamRng pick = rng;  // pair/query selection must not disturb prediction noise
  return d_swap_gap_with(
      [&](const TaskView& task, const Tensor& queries) {
        return learner.meta_test_predict(task, queries, S, rng);
      },
      tasks, learner.task_spec().input_dim, learner.task_spec().family, n_pairs, n_queries, pick);
}

// --- first-layer weight mass on the hint inputs -----------------------------

struct HintNorms {
  double hint_columns = 0;  // mean |W| over the one-hot rows of the input layer
  double u_column = 0;      // mean |W| over the raw-input row
};

/// Sinusoid-with-hint architectures only: input layout (u, one-hot).
/// Variational encoders are read through theta_mu.
inline HintNorms hint_weight_norms(const Learner& learner) {
  const TaskSpec& spec = learner.task_spec();
  if (spec.family != Family::kSinusoid || spec.input_dim < 2)
    throw std::invalid_argument("hint_weight_norms: needs the (u, one-hot) sinusoid architecture");
  for (const auto& b : learner.blocks()) {
    if (b.name != "enc.W") continue;
    const Tensor& w = b.kind == BlockKind::kVariational ? b.vw.mu : b.value;
    HintNorms out;
    const int rows = w.shape[0], cols = w.shape[1];
    for (int j = 0; j < cols; ++j) out.u_column += std::fabs(w.at(0, j));
    out.u_column /= cols;
    for (int i = 1; i < rows; ++i)
      for (int j = 0; j < cols; ++j) out.hint_columns += std::fabs(w.at(i, j));
    out.hint_columns /= static_cast<double>((rows - 1) * cols);
    return out;
  }
  throw std::logic_error("hint_weight_norms: encoder block missing");
}

// --- aggregate report -------------------------------------------------------

struct MemorizationReport {
  double pre_update_metric = 0;
  double post_update_metric = 0;
  double d_swap_gap = 0;
  std::optional<HintNorms> hint_norms;

  nlohmann::json to_json() const {
    nlohmann::json j{{"pre_update_metric", pre_update_metric},
                     {"post_update_metric", post_update_metric},
                     {"d_swap_gap", d_swap_gap}};
    if (hint_norms) {
      j["hint_weight_norm"] = hint_norms->hint_columns;
      j["u_weight_norm"] = hint_norms->u_column;
    }
    return j;
  }
};

inline MemorizationReport memorization_report(const Learner& learner, std::span<const Task> tasks,
                                              int S, int n_pairs, int n_queries, StreamRng& rng) {
  MemorizationReport rep;
  rep.pre_update_metric = pre_update_metric(learner, tasks, S, rng);
  double post = 0;
  for (const auto& task : tasks) {
    Tensor queries = examples_x(task.test, learner.task_spec().input_dim);
    Tensor pred = learner.meta_test_predict(view_of(task), queries, S, rng);
    post += task_metric(learner.task_spec().family, pred, task.test);
  }
  rep.post_update_metric = post / static_cast<double>(tasks.size());
  rep.d_swap_gap = d_swap_gap(learner, tasks, S, n_pairs, n_queries, rng);
  if (learner.task_spec().family == Family::kSinusoid && learner.task_spec().input_dim > 1)
    rep.hint_norms = hint_weight_norms(learner);
  return rep;
}

// --- beta sweep (Figure-3 style) ---------------------------------------

struct BetaSweepRow {
  double beta = 0;
  double metric_mean = 0, metric_sd = 0;
  double pre_update_mean = 0, pre_update_sd = 0;
  double d_swap_gap_mean = 0;
};

struct SweepSettings {
  int outer_steps = 1000;
  int eval_tasks = 100;
  int diag_tasks = 40;
  int swap_pairs = 200;
  int swap_queries = 20;
};

/// Alg. 1/2 training loop; per-step reports go to the optional callback.
inline Learner train_learner(const TaskSpec& spec, const LearnerConfig& cfg,
                             const TaskGenerator& train_gen, int outer_steps, std::uint64_t seed,
                             const std::function<void(const TrainStepReport&)>& on_step = {}) {
  Learner learner(spec, cfg, seed);
  StreamRng task_rng(seed, "train.tasks");
  StreamRng noise_rng(seed, "train.noise");
  for (int s = 0; s < outer_steps; ++s) {
    auto batch = meta_batch(train_gen, cfg.meta_batch, task_rng);
    TrainStepReport rep = learner.meta_train_step(batch, noise_rng);
    if (on_step) on_step(rep);
  }
  return learner;
}

/// Trains one learner per (beta, seed); rows come back sorted by beta with
/// per-beta mean and standard deviation across seeds.
inline std::vector<BetaSweepRow> beta_sweep(const TaskSpec& spec, LearnerConfig base,
                                            const TaskGenerator& train_gen,
                                            const TaskGenerator& eval_gen,
                                            std::vector<double> betas,
                                            std::span<const std::uint64_t> seeds,
                                            const SweepSettings& settings) {
  if (betas.empty()) throw std::invalid_argument("beta_sweep: empty beta list");
  if (seeds.empty()) throw std::invalid_argument("beta_sweep: empty seed list");
  std::sort(betas.begin(), betas.end());
  betas.erase(std::unique(betas.begin(), betas.end()), betas.end());

  std::vector<BetaSweepRow> rows;
  for (double beta : betas) {
    LearnerConfig cfg = base;
    cfg.beta = beta;
    std::vector<double> metric, pre, gap;
    for (std::uint64_t seed : seeds) {
      Learner learner = train_learner(spec, cfg, train_gen, settings.outer_steps, seed);
      StreamRng eval_rng(seed, "sweep.eval");
      metric.push_back(learner.evaluate(eval_gen, settings.eval_tasks, cfg.test_samples, eval_rng).mean);

      StreamRng diag_rng(seed, "sweep.diag");
      std::vector<Task> tasks;
      for (int i = 0; i < settings.diag_tasks; ++i) tasks.push_back(train_gen.sample(diag_rng));
      pre.push_back(pre_update_metric(learner, tasks, cfg.test_samples, diag_rng));
      gap.push_back(d_swap_gap(learner, tasks, cfg.test_samples, settings.swap_pairs,
                               settings.swap_queries, diag_rng));
    }
    BetaSweepRow row;
    row.beta = beta;
    const auto n = static_cast<double>(seeds.size());
    for (double m : metric) row.metric_mean += m / n;
    for (double m : pre) row.pre_update_mean += m / n;
    for (double m : gap) row.d_swap_gap_mean += m / n;
    if (seeds.size() > 1) {
      double sm = 0, sp = 0;
      for (double m : metric) sm += (m - row.metric_mean) * (m - row.metric_mean);
      for (double m : pre) sp += (m - row.pre_update_mean) * (m - row.pre_update_mean);
      row.metric_sd = std::sqrt(sm / (n - 1));
      row.pre_update_sd = std::sqrt(sp / (n - 1));
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace metareg

#endif  // METAREG_DIAGNOSTICS_HPP
