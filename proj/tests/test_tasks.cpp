#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "metareg/tasks.hpp"

using namespace metareg;

TEST_CASE("meta-train amplitude is bound to the one-hot index") {
  SinusoidConfig cfg;
  StreamRng rng(1, "tasks.grid");
  const auto grid = amplitude_grid(cfg.grid_size);
  for (int t = 0; t < 200; ++t) {
    Task task = sample_sinusoid_task(cfg, rng);
    const int hint = task.meta.at("hint_index").get<int>();
    const double amp = task.meta.at("amplitude").get<double>();
    CHECK(amp == grid[static_cast<std::size_t>(hint)]);
    for (const auto& e : task.train) {
      CHECK(e.x.size() == 21);
      CHECK(e.x[1 + static_cast<std::size_t>(hint)] == 1.0);
      double sum = 0;
      for (std::size_t j = 1; j < e.x.size(); ++j) sum += e.x[j];
      CHECK(sum == 1.0);
    }
  }
}

TEST_CASE("sinusoid noise scale is 0.1") {
  SinusoidConfig cfg;
  cfg.k_train = 25;
  cfg.k_test = 25;
  StreamRng rng(2, "tasks.noise");
  double sum = 0, sumsq = 0;
  long n = 0;
  while (n < 100000) {
    Task task = sample_sinusoid_task(cfg, rng);
    const double amp = task.meta.at("amplitude").get<double>();
    for (const auto* part : {&task.train, &task.test})
      for (const auto& e : *part) {
        const double r = e.y - amp * std::sin(e.x[0]);
        sum += r;
        sumsq += r * r;
        ++n;
      }
  }
  const double mean = sum / static_cast<double>(n);
  const double sd = std::sqrt(sumsq / static_cast<double>(n) - mean * mean);
  CHECK(sd > 0.095);
  CHECK(sd < 0.105);
}

TEST_CASE("meta-test amplitude is independent of the one-hot hint") {
  SinusoidConfig cfg;
  cfg.split = Split::kMetaTest;
  cfg.k_train = 1;
  cfg.k_test = 1;
  StreamRng rng(3, "tasks.indep");
  const int n = 100000;
  double sa = 0, sh = 0, saa = 0, shh = 0, sah = 0;
  double amin = 1e9, amax = -1e9;
  for (int t = 0; t < n; ++t) {
    Task task = sample_sinusoid_task(cfg, rng);
    const double a = task.meta.at("amplitude").get<double>();
    const double h = task.meta.at("hint_index").get<int>();
    sa += a;
    sh += h;
    saa += a * a;
    shh += h * h;
    sah += a * h;
    amin = std::min(amin, a);
    amax = std::max(amax, a);
  }
  const double cov = sah / n - (sa / n) * (sh / n);
  const double corr = cov / std::sqrt((saa / n - (sa / n) * (sa / n)) * (shh / n - (sh / n) * (sh / n)));
  CHECK(std::fabs(corr) < 0.02);
  // amplitude range covers [0.1, 4]
  CHECK(amin < 0.2);
  CHECK(amax > 3.9);
}

TEST_CASE("no-hint mode produces 1-d inputs") {
  SinusoidConfig cfg;
  cfg.input = SinusoidInput::kNoHint;
  StreamRng rng(4, "tasks.nohint");
  Task t = sample_sinusoid_task(cfg, rng);
  CHECK(t.train[0].x.size() == 1);
  CHECK(cfg.input_dim() == 1);
}

TEST_CASE("classification family: NME keeps class-label binding fixed") {
  StreamRng setup(5, "tasks.family");
  ClassFamilyConfig fc;
  auto fam = std::make_shared<ClassFamily>(fc, setup);

  StreamRng rng(6, "tasks.nme");
  std::vector<int> seen_label(40, -1);
  for (int t = 0; t < 1000; ++t) {
    Task task = fam->sample_task(1, Split::kMetaTrain, rng);
    const auto classes = task.meta.at("classes").get<std::vector<int>>();
    const auto label_map = task.meta.at("label_map").get<std::vector<int>>();
    for (int l = 0; l < 5; ++l) {
      const int cls = classes[static_cast<std::size_t>(l)];
      const int assigned = label_map[static_cast<std::size_t>(l)];
      CHECK(assigned == l);  // NME: identity assignment
      if (seen_label[static_cast<std::size_t>(cls)] < 0) seen_label[static_cast<std::size_t>(cls)] = assigned;
      CHECK(seen_label[static_cast<std::size_t>(cls)] == assigned);
      CHECK(fam->label_of(cls) == assigned);
    }
  }
}

TEST_CASE("classification family: ME label permutation is uniform") {
  StreamRng setup(7, "tasks.family_me");
  ClassFamilyConfig fc;
  fc.mutually_exclusive = true;
  auto fam = std::make_shared<ClassFamily>(fc, setup);

  StreamRng rng(8, "tasks.me");
  // counts[class][label]
  std::vector<std::vector<int>> counts(40, std::vector<int>(5, 0));
  std::vector<int> appearances(40, 0);
  const int n_tasks = 10000;
  for (int t = 0; t < n_tasks; ++t) {
    Task task = fam->sample_task(1, Split::kMetaTrain, rng);
    const auto classes = task.meta.at("classes").get<std::vector<int>>();
    const auto label_map = task.meta.at("label_map").get<std::vector<int>>();
    // per-task bijection
    std::set<int> uniq(label_map.begin(), label_map.end());
    CHECK(uniq.size() == 5);
    for (int l = 0; l < 5; ++l) {
      const int cls = classes[static_cast<std::size_t>(l)];
      counts[static_cast<std::size_t>(cls)][static_cast<std::size_t>(label_map[static_cast<std::size_t>(l)])]++;
      appearances[static_cast<std::size_t>(cls)]++;
    }
  }
  for (int c = 0; c < 40; ++c) {
    if (appearances[static_cast<std::size_t>(c)] == 0) continue;  // meta-test pool class
    for (int l = 0; l < 5; ++l) {
      const double freq = static_cast<double>(counts[static_cast<std::size_t>(c)][static_cast<std::size_t>(l)]) /
                          appearances[static_cast<std::size_t>(c)];
      CHECK(std::fabs(freq - 0.2) < 0.05);
    }
  }
}

TEST_CASE("classification task cardinality and pools") {
  StreamRng setup(9, "tasks.card");
  ClassFamilyConfig fc;
  auto fam = std::make_shared<ClassFamily>(fc, setup);
  StreamRng rng(10, "tasks.card2");

  Task t = fam->sample_task(1, Split::kMetaTrain, rng);
  CHECK(t.train.size() == 5);
  CHECK(t.test.size() == 5);
  for (const auto& e : t.train) {
    CHECK(e.x.size() == 16);
    CHECK(e.y >= 0);
    CHECK(e.y < 5);
  }

  // disjoint pools, every label served on both splits
  for (int l = 0; l < 5; ++l) {
    const auto& tp = fam->train_pools()[static_cast<std::size_t>(l)];
    const auto& sp = fam->test_pools()[static_cast<std::size_t>(l)];
    CHECK(!tp.empty());
    CHECK(!sp.empty());
    for (int c : tp)
      for (int c2 : sp) CHECK(c != c2);
    for (int c : tp) CHECK(fam->label_of(c) == l);
    for (int c : sp) CHECK(fam->label_of(c) == l);
  }

  // meta-test tasks draw only from test pools
  Task mt = fam->sample_task(2, Split::kMetaTest, rng);
  for (int cls : mt.meta.at("classes").get<std::vector<int>>()) {
    bool in_test_pool = false;
    for (const auto& pool : fam->test_pools())
      for (int c : pool) in_test_pool |= (c == cls);
    CHECK(in_test_pool);
  }
}

TEST_CASE("meta_batch determinism and seed sensitivity") {
  SinusoidConfig cfg;
  SinusoidGenerator gen(cfg);

  StreamRng r1(42, "tasks.batch");
  auto b1 = meta_batch(gen, 1, r1);
  CHECK(b1.size() == 1);

  StreamRng r2(42, "tasks.batch");
  StreamRng r3(42, "tasks.batch");
  auto a = meta_batch(gen, 6, r2);
  auto b = meta_batch(gen, 6, r3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(task_to_json(a[i]) == task_to_json(b[i]));

  StreamRng r4(43, "tasks.batch");
  auto c = meta_batch(gen, 6, r4);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i)
    any_diff |= (a[i].meta.at("amplitude") != c[i].meta.at("amplitude"));
  CHECK(any_diff);

  CHECK_THROWS_AS(meta_batch(gen, 0, r4), std::invalid_argument);
}

TEST_CASE("meta-train amplitudes sit exactly on the grid") {
  SinusoidConfig cfg;
  StreamRng rng(11, "tasks.ongrid");
  const auto grid = amplitude_grid(cfg.grid_size);
  for (int t = 0; t < 2000; ++t) {
    Task task = sample_sinusoid_task(cfg, rng);
    const double amp = task.meta.at("amplitude").get<double>();
    bool on_grid = false;
    for (double g : grid) on_grid |= (amp == g);
    CHECK(on_grid);
  }
}

TEST_CASE("jsonl roundtrip") {
  SinusoidConfig cfg;
  StreamRng rng(12, "tasks.jsonl");
  Task t = sample_sinusoid_task(cfg, rng);
  nlohmann::json j = task_to_json(t);
  CHECK(j.contains("split"));
  CHECK(j.at("x").size() == t.train.size() + t.test.size());

  Task back = task_from_json(j);
  CHECK(back.split == t.split);
  REQUIRE(back.train.size() == t.train.size());
  REQUIRE(back.test.size() == t.test.size());
  for (std::size_t i = 0; i < t.train.size(); ++i) {
    CHECK(back.train[i].x == t.train[i].x);
    CHECK(back.train[i].y == t.train[i].y);
  }
  CHECK(back.meta.at("amplitude") == t.meta.at("amplitude"));
}

TEST_CASE("matrix views") {
  SinusoidConfig cfg;
  StreamRng rng(13, "tasks.mat");
  Task t = sample_sinusoid_task(cfg, rng);
  Tensor x = examples_x(t.train, cfg.input_dim());
  CHECK(x.shape == Shape{5, 21});
  Tensor y = examples_y(t.train);
  CHECK(y.shape == Shape{5, 1});
  CHECK(y.at(2, 0) == t.train[2].y);

  StreamRng setup(14, "tasks.mat2");
  ClassFamily fam(ClassFamilyConfig{}, setup);
  Task ct = fam.sample_task(1, Split::kMetaTrain, rng);
  Tensor oh = examples_y_onehot(ct.train, 5);
  CHECK(oh.shape == Shape{5, 5});
  for (int i = 0; i < 5; ++i) {
    double s = 0;
    for (int j = 0; j < 5; ++j) s += oh.at(i, j);
    CHECK(s == 1.0);
  }
}
