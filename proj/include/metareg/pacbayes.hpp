#ifndef METAREG_PACBAYES_HPP
#define METAREG_PACBAYES_HPP

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>

#include <json.hpp>

#include "metareg/learners.hpp"

namespace metareg {

struct BoundInputs {
  std::int64_t n = 2;  // meta-training tasks
  std::int64_t k = 2;  // per-task validation points
  double delta = 0.05;
  double kl = 0;
  double empirical_error = 0;

  void validate() const {
    if (n < 2 || k < 2) throw std::invalid_argument("bound: n and K must be >= 2");
    if (!(delta > 0) || delta > 1) throw std::invalid_argument("bound: delta must be in (0, 1]");
    if (kl < 0) throw std::invalid_argument("bound: kl must be >= 0");
    if (empirical_error < 0 || empirical_error > 1)
      throw std::invalid_argument("bound: empirical error must be in [0, 1]");
  }
};

struct BoundReport {
  double empirical_error = 0;
  double kl = 0;
  double complexity = 0;
  double bound = 0;
  double beta = 0;

  nlohmann::json to_json() const {
    return {{"empirical_error", empirical_error},
            {"kl", kl},
            {"complexity", complexity},
            {"bound", bound},
            {"beta", beta}};
  }
};

namespace detail {
inline double coefficient(std::int64_t n, std::int64_t k) {
  return std::sqrt(1.0 / (2.0 * (static_cast<double>(k) - 1))) +
         std::sqrt(1.0 / (2.0 * (static_cast<double>(n) - 1)));
}
inline double log_term(std::int64_t n, std::int64_t k, double delta) {
  return std::log(static_cast<double>(n) * (static_cast<double>(k) + 1) / delta);
}
}  // namespace detail

/// High-probability bound on novel-task error:
///   empirical + (sqrt(1/(2(K-1))) + sqrt(1/(2(n-1)))) sqrt(kl + log(n(K+1)/delta)).
inline BoundReport bound_value(const BoundInputs& b) {
  b.validate();
  BoundReport r;
  r.empirical_error = b.empirical_error;
  r.kl = b.kl;
  const double c = detail::coefficient(b.n, b.k);
  const double lg = detail::log_term(b.n, b.k, b.delta);
  r.complexity = c * std::sqrt(b.kl + lg);
  r.bound = b.empirical_error + r.complexity;
  r.beta = c / (2.0 * std::sqrt(lg));
  return r;
}

/// First-order coefficient of the KL term in the expanded bound.
inline double beta_from_bound(std::int64_t n, std::int64_t k, double delta) {
  BoundInputs b;
  b.n = n;
  b.k = k;
  b.delta = delta;
  b.validate();
  return detail::coefficient(n, k) / (2.0 * std::sqrt(detail::log_term(n, k, delta)));
}

/// Empirical Theorem-2 audit for a trained weights-regularized learner:
/// Monte-Carlo estimate of the bounded per-task error over `theta_samples`
/// posterior draws, with the KL read from the learner's variational blocks.
/// Losses are clipped to [0, 1]: 0-1 loss for classification, per-example
/// squared error capped at 1 for regression.
inline BoundReport empirical_bound_audit(const Learner& learner, std::span<const Task> tasks,
                                         double delta, int theta_samples, StreamRng& rng) {
  if (!learner.config().regularizes_weights())
    throw std::invalid_argument("bound audit: learner must be a weights-regularized (W) variant");
  if (tasks.size() < 2) throw std::invalid_argument("bound audit: need at least 2 tasks");
  if (theta_samples < 1) throw std::invalid_argument("bound audit: need at least 1 theta sample");

  const std::size_t k = tasks[0].test.size();
  for (const auto& t : tasks)
    if (t.test.size() != k)
      throw std::invalid_argument("bound audit: per-task validation sizes must match");

  const Family family = learner.task_spec().family;
  const int input_dim = learner.task_spec().input_dim;

  double acc = 0;
  for (int s = 0; s < theta_samples; ++s) {
    double task_mean = 0;
    for (const auto& task : tasks) {
      Tensor queries = examples_x(task.test, input_dim);
      Tensor pred = learner.meta_test_predict(view_of(task), queries, 1, rng);
      double loss = 0;
      if (family == Family::kSinusoid) {
        for (std::size_t i = 0; i < task.test.size(); ++i) {
          const double d = pred.at(static_cast<int>(i), 0) - task.test[i].y;
          loss += std::min(d * d, 1.0);
        }
      } else {
        for (std::size_t i = 0; i < task.test.size(); ++i)
          if (argmax_row_of(pred, static_cast<int>(i)) != static_cast<int>(task.test[i].y)) loss += 1.0;
      }
      task_mean += loss / static_cast<double>(task.test.size());
    }
    acc += task_mean / static_cast<double>(tasks.size());
  }

  BoundInputs b;
  b.n = static_cast<std::int64_t>(tasks.size());
  b.k = static_cast<std::int64_t>(k);
  b.delta = delta;
  b.kl = learner.kl_weights();
  b.empirical_error = acc / static_cast<double>(theta_samples);
  return bound_value(b);
}

}  // namespace metareg

#endif  // METAREG_PACBAYES_HPP
