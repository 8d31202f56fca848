#ifndef METAREG_TASKS_HPP
#define METAREG_TASKS_HPP

#include <cmath>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "metareg/rng.hpp"
#include "metareg/tensor.hpp"

namespace metareg {

struct Example {
  std::vector<double> x;
  double y;  // regression target, or label index for classification
};

/// A supervised episode: task training set D and task test set D*. The meta
/// field records the hidden ground truth (amplitude, class assignment) and is
/// for diagnostics only; learners receive (train, test) views and never meta.
struct Task {
  std::string split;
  std::vector<Example> train;
  std::vector<Example> test;
  nlohmann::json meta;
};

/// What learner operations are allowed to see.
struct TaskView {
  std::span<const Example> train;
  std::span<const Example> test;
};

inline TaskView view_of(const Task& t) { return {t.train, t.test}; }

enum class Split { kMetaTrain, kMetaTest };

inline const char* split_name(Split s) { return s == Split::kMetaTrain ? "meta_train" : "meta_test"; }

// --- sinusoid regression ------------------------------------------------

enum class SinusoidInput { kNmeOnehot, kNoHint };

struct SinusoidConfig {
  int k_train = 5;
  int k_test = 5;
  int grid_size = 20;          // amplitude grid for meta-training
  SinusoidInput input = SinusoidInput::kNmeOnehot;
  Split split = Split::kMetaTrain;
  double noise = 0.1;

  void validate() const {
    if (grid_size < 1) throw std::invalid_argument("sinusoid: grid_size must be >= 1");
    if (k_train < 1 || k_test < 1) throw std::invalid_argument("sinusoid: shot counts must be >= 1");
    if (noise < 0) throw std::invalid_argument("sinusoid: negative noise");
  }
  int input_dim() const { return input == SinusoidInput::kNmeOnehot ? 1 + grid_size : 1; }
};

/// 20 equally spaced amplitudes on [0.1, 4.0].
inline std::vector<double> amplitude_grid(int grid_size) {
  std::vector<double> g(static_cast<std::size_t>(grid_size));
  if (grid_size == 1) {
    g[0] = 0.1;
    return g;
  }
  const double step = (4.0 - 0.1) / (grid_size - 1);
  for (int i = 0; i < grid_size; ++i) g[static_cast<std::size_t>(i)] = 0.1 + step * i;
  return g;
}

/// Meta-train: A on the grid, one-hot bound to A's grid index. Meta-test:
/// A continuous on [0.1, 4], one-hot drawn independently of A.
inline Task sample_sinusoid_task(const SinusoidConfig& cfg, StreamRng& rng) {
  cfg.validate();
  const std::vector<double> grid = amplitude_grid(cfg.grid_size);

  double amplitude;
  int hint;
  if (cfg.split == Split::kMetaTrain) {
    hint = rng.uniform_int(cfg.grid_size);
    amplitude = grid[static_cast<std::size_t>(hint)];
  } else {
    amplitude = rng.uniform(0.1, 4.0);
    hint = rng.uniform_int(cfg.grid_size);
  }

  auto draw = [&](int count, std::vector<Example>& out) {
    for (int k = 0; k < count; ++k) {
      Example e;
      const double u = rng.uniform(-5.0, 5.0);
      e.x.push_back(u);
      if (cfg.input == SinusoidInput::kNmeOnehot) {
        e.x.resize(1 + static_cast<std::size_t>(cfg.grid_size), 0.0);
        e.x[1 + static_cast<std::size_t>(hint)] = 1.0;
      }
      e.y = amplitude * std::sin(u) + cfg.noise * rng.normal();
      out.push_back(std::move(e));
    }
  };

  Task t;
  t.split = split_name(cfg.split);
  draw(cfg.k_train, t.train);
  draw(cfg.k_test, t.test);
  t.meta = {{"kind", "sinusoid"}, {"amplitude", amplitude}, {"hint_index", hint}};
  return t;
}

// --- synthetic few-shot classification ---------------------------------

struct ClassFamilyConfig {
  int classes = 40;         // total classes, split across label pools
  int dim = 16;             // prototype dimensionality
  int n_way = 5;            // labels per task
  double noise = 0.35;      // isotropic within-class scatter
  int test_classes_per_label = 2;
  bool mutually_exclusive = false;  // per-task random label bijection

  void validate() const {
    if (n_way < 2) throw std::invalid_argument("class family: n_way must be >= 2");
    if (classes % n_way != 0) throw std::invalid_argument("class family: classes must divide evenly across labels");
    const int per_label = classes / n_way;
    if (test_classes_per_label < 1 || test_classes_per_label >= per_label)
      throw std::invalid_argument("class family: each label needs meta-train and meta-test classes");
    if (dim < 1) throw std::invalid_argument("class family: dim must be >= 1");
  }
};

/// A fixed universe of Gaussian-blob classes. Every class carries a fixed
/// label; per label, the class list is split into disjoint meta-train and
/// meta-test pools.
class ClassFamily {
 public:
  ClassFamily(ClassFamilyConfig cfg, StreamRng& rng) : cfg_(cfg) {
    cfg_.validate();
    prototypes_.reserve(static_cast<std::size_t>(cfg_.classes));
    for (int c = 0; c < cfg_.classes; ++c) {
      std::vector<double> p(static_cast<std::size_t>(cfg_.dim));
      for (auto& v : p) v = rng.normal();
      prototypes_.push_back(std::move(p));
    }
    // fixed, balanced class -> label assignment
    std::vector<int> order(static_cast<std::size_t>(cfg_.classes));
    for (int c = 0; c < cfg_.classes; ++c) order[static_cast<std::size_t>(c)] = c;
    rng.shuffle(order);
    label_of_.resize(static_cast<std::size_t>(cfg_.classes));
    train_pool_.resize(static_cast<std::size_t>(cfg_.n_way));
    test_pool_.resize(static_cast<std::size_t>(cfg_.n_way));
    const int per_label = cfg_.classes / cfg_.n_way;
    for (int i = 0; i < cfg_.classes; ++i) {
      const int label = i / per_label;
      const int c = order[static_cast<std::size_t>(i)];
      label_of_[static_cast<std::size_t>(c)] = label;
      const int rank = i % per_label;
      if (rank < per_label - cfg_.test_classes_per_label)
        train_pool_[static_cast<std::size_t>(label)].push_back(c);
      else
        test_pool_[static_cast<std::size_t>(label)].push_back(c);
    }
  }

  const ClassFamilyConfig& config() const { return cfg_; }
  int label_of(int cls) const { return label_of_[static_cast<std::size_t>(cls)]; }
  const std::vector<std::vector<int>>& train_pools() const { return train_pool_; }
  const std::vector<std::vector<int>>& test_pools() const { return test_pool_; }
  std::span<const double> prototype(int cls) const { return prototypes_[static_cast<std::size_t>(cls)]; }

  /// One class per label from the split's pool; K shots for D and D* each;
  /// ME mode shuffles the label assignment per task.
  Task sample_task(int k_shot, Split split, StreamRng& rng) const {
    if (k_shot < 1) throw std::invalid_argument("class family: k_shot must be >= 1");
    const auto& pools = split == Split::kMetaTrain ? train_pool_ : test_pool_;
    for (const auto& p : pools)
      if (p.empty()) throw std::invalid_argument("class family: empty class pool");

    std::vector<int> label_map(static_cast<std::size_t>(cfg_.n_way));
    for (int l = 0; l < cfg_.n_way; ++l) label_map[static_cast<std::size_t>(l)] = l;
    if (cfg_.mutually_exclusive) rng.shuffle(label_map);

    std::vector<int> chosen(static_cast<std::size_t>(cfg_.n_way));
    for (int l = 0; l < cfg_.n_way; ++l) {
      const auto& pool = pools[static_cast<std::size_t>(l)];
      chosen[static_cast<std::size_t>(l)] = pool[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(pool.size())))];
    }

    auto draw = [&](int count, std::vector<Example>& out) {
      for (int l = 0; l < cfg_.n_way; ++l) {
        const int cls = chosen[static_cast<std::size_t>(l)];
        const auto& proto = prototypes_[static_cast<std::size_t>(cls)];
        for (int k = 0; k < count; ++k) {
          Example e;
          e.x.resize(static_cast<std::size_t>(cfg_.dim));
          for (int d = 0; d < cfg_.dim; ++d)
            e.x[static_cast<std::size_t>(d)] = proto[static_cast<std::size_t>(d)] + cfg_.noise * rng.normal();
          e.y = static_cast<double>(label_map[static_cast<std::size_t>(l)]);
          out.push_back(std::move(e));
        }
      }
    };

    Task t;
    t.split = split_name(split);
    draw(k_shot, t.train);
    draw(k_shot, t.test);
    t.meta = {{"kind", "classification"}, {"classes", chosen}, {"label_map", label_map}};
    return t;
  }

 private:
  ClassFamilyConfig cfg_;
  std::vector<std::vector<double>> prototypes_;
  std::vector<int> label_of_;
  std::vector<std::vector<int>> train_pool_, test_pool_;
};

// --- generator interface -------------------------------------------------

class TaskGenerator {
 public:
  virtual ~TaskGenerator() = default;
  virtual Task sample(StreamRng& rng) const = 0;
  virtual int input_dim() const = 0;
};

class SinusoidGenerator final : public TaskGenerator {
 public:
  explicit SinusoidGenerator(SinusoidConfig cfg) : cfg_(cfg) { cfg_.validate(); }
  Task sample(StreamRng& rng) const override { return sample_sinusoid_task(cfg_, rng); }
  int input_dim() const override { return cfg_.input_dim(); }
  const SinusoidConfig& config() const { return cfg_; }

 private:
  SinusoidConfig cfg_;
};

class ClassificationGenerator final : public TaskGenerator {
 public:
  ClassificationGenerator(std::shared_ptr<const ClassFamily> family, int k_shot, Split split)
      : family_(std::move(family)), k_shot_(k_shot), split_(split) {}
  Task sample(StreamRng& rng) const override { return family_->sample_task(k_shot_, split_, rng); }
  int input_dim() const override { return family_->config().dim; }
  const ClassFamily& family() const { return *family_; }

 private:
  std::shared_ptr<const ClassFamily> family_;
  int k_shot_;
  Split split_;
};

inline std::vector<Task> meta_batch(const TaskGenerator& gen, int batch_size, StreamRng& rng) {
  if (batch_size < 1) throw std::invalid_argument("meta_batch: batch_size must be >= 1");
  std::vector<Task> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) out.push_back(gen.sample(rng));
  return out;
}

// --- matrix views for the learners ---------------------------------------

inline Tensor examples_x(std::span<const Example> ex, int dim) {
  Tensor t = Tensor::zeros({static_cast<int>(ex.size()), dim});
  for (std::size_t i = 0; i < ex.size(); ++i) {
    if (static_cast<int>(ex[i].x.size()) != dim)
      throw std::invalid_argument("examples_x: input width mismatch");
    for (int j = 0; j < dim; ++j) t.at(static_cast<int>(i), j) = ex[i].x[static_cast<std::size_t>(j)];
  }
  return t;
}

inline Tensor examples_y(std::span<const Example> ex) {
  Tensor t = Tensor::zeros({static_cast<int>(ex.size()), 1});
  for (std::size_t i = 0; i < ex.size(); ++i) t.at(static_cast<int>(i), 0) = ex[i].y;
  return t;
}

inline Tensor examples_y_onehot(std::span<const Example> ex, int n_way) {
  Tensor t = Tensor::zeros({static_cast<int>(ex.size()), n_way});
  for (std::size_t i = 0; i < ex.size(); ++i) {
    const int label = static_cast<int>(ex[i].y);
    if (label < 0 || label >= n_way) throw std::invalid_argument("examples_y_onehot: label out of range");
    t.at(static_cast<int>(i), label) = 1.0;
  }
  return t;
}

// --- JSONL serialization ---------------------------------------------------

/// One task per line: {split, x: [[...]], y: [...], meta}; x and y hold the
/// task training rows followed by the task test rows, with the boundary
/// recorded in meta.k_train / meta.k_test.
inline nlohmann::json task_to_json(const Task& t) {
  nlohmann::json jx = nlohmann::json::array();
  nlohmann::json jy = nlohmann::json::array();
  for (const auto* part : {&t.train, &t.test})
    for (const auto& e : *part) {
      jx.push_back(e.x);
      jy.push_back(e.y);
    }
  nlohmann::json meta = t.meta;
  meta["k_train"] = t.train.size();
  meta["k_test"] = t.test.size();
  return {{"split", t.split}, {"x", jx}, {"y", jy}, {"meta", meta}};
}

inline Task task_from_json(const nlohmann::json& j) {
  Task t;
  t.split = j.at("split").get<std::string>();
  t.meta = j.at("meta");
  const auto k_train = t.meta.at("k_train").get<std::size_t>();
  const auto k_test = t.meta.at("k_test").get<std::size_t>();
  const auto& jx = j.at("x");
  const auto& jy = j.at("y");
  if (jx.size() != k_train + k_test || jy.size() != jx.size())
    throw std::invalid_argument("task_from_json: row counts disagree with meta");
  for (std::size_t i = 0; i < jx.size(); ++i) {
    Example e{jx[i].get<std::vector<double>>(), jy[i].get<double>()};
    (i < k_train ? t.train : t.test).push_back(std::move(e));
  }
  t.meta.erase("k_train");
  t.meta.erase("k_test");
  return t;
}

}  // namespace metareg

#endif  // METAREG_TASKS_HPP
