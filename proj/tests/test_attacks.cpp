#include <doctest.h>

#include <epicache/attacks.hpp>
#include <epicache/cache.hpp>
#include <epicache/dataset.hpp>

#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "oracles.hpp"

using namespace epicache;

namespace {

// Analytic two-class model on the pixel mean: p = softmax(s, -s) with
// s = mean(x) - 0.5. Fully controllable for attack tests.
PredictFn mean_model() {
  return [](const Vector& x) {
    const double s = x.mean() - 0.5;
    Vector p(2);
    const double e0 = std::exp(s), e1 = std::exp(-s);
    p << e0 / (e0 + e1), e1 / (e0 + e1);
    return p;
  };
}

TargetGradFn mean_model_grad() {
  return [](const Vector& x, Index target) {
    // -log p_t differentiated through the two-logit softmax.
    const double s = x.mean() - 0.5;
    const double p0 = 1.0 / (1.0 + std::exp(-2.0 * s));
    const double dLds = target == 0 ? -(1.0 - p0) : (1.0 - p0);
    return Vector(Vector::Constant(x.size(), dLds / static_cast<double>(x.size())));
  };
}

DataSplits attack_data(Index per_class = 20, std::uint64_t seed = 40) {
  DataConfig dc;
  dc.num_classes = 3;
  dc.width = 8;
  dc.per_class = per_class;
  dc.seed = seed;
  return generate_dataset(dc);
}

}  // namespace

TEST_CASE("target selection avoids the true class and covers the others") {
  std::set<Index> seen;
  for (std::uint64_t s = 0; s < 64; ++s) {
    const Index t = target_selection(2, 5, s);
    CHECK(t != 2);
    CHECK(t >= 0);
    CHECK(t < 5);
    seen.insert(t);
  }
  CHECK(seen.size() == 4);
  CHECK(target_selection(1, 4, 9) == target_selection(1, 4, 9));
  CHECK(target_selection(0, 2, 12345) == 1);  // only one wrong class
  CHECK_THROWS_AS(target_selection(0, 1, 0), ParamError);
  CHECK_THROWS_AS(target_selection(5, 4, 0), ParamError);
}

TEST_CASE("attack config domain") {
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ParamError);
  cfg.epsilon = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ParamError);
  cfg = AttackConfig{};
  cfg.iterations = 0;
  CHECK_THROWS_AS(cfg.validate(), ParamError);
  cfg = AttackConfig{};
  cfg.stepsize = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ParamError);
  cfg = AttackConfig{};
  CHECK(cfg.stepsize == 2.0 / 225.0);
  CHECK(cfg.iterations == 10);
  CHECK(cfg.random_start);
  cfg.validate();
}

TEST_CASE("successful attack lands inside the normalized ball") {
  AttackConfig cfg;
  cfg.epsilon = 0.2;
  cfg.iterations = 10;
  cfg.random_start = false;
  cfg.seed = 1;
  const Vector x = Vector::Constant(16, 0.55);
  const AttackOutcome out =
      pgd_targeted(mean_model(), mean_model_grad(), x, 1, cfg);
  CHECK(out.success);
  CHECK(out.target == 1);
  const double radius = cfg.epsilon * x.lpNorm<Eigen::Infinity>();
  CHECK((out.x_adv - x).lpNorm<Eigen::Infinity>() <= radius + 1e-9);
  CHECK(out.x_adv.minCoeff() >= 0.0);
  CHECK(out.x_adv.maxCoeff() <= 1.0);
  CHECK(argmax(mean_model()(out.x_adv)) == 1);
}

TEST_CASE("failed attacks return the clean input bit for bit") {
  // Constant predictor: argmax is always class 0, target 1 can never win.
  PredictFn stubborn = [](const Vector&) {
    Vector p(2);
    p << 0.9, 0.1;
    return p;
  };
  TargetGradFn g = [](const Vector& x, Index) {
    return Vector(Vector::Constant(x.size(), 0.5));
  };
  AttackConfig cfg;
  cfg.epsilon = 0.3;
  cfg.seed = 5;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  Vector x(25);
  for (Index i = 0; i < 25; ++i) x(i) = u(rng);
  const AttackOutcome out = pgd_targeted(stubborn, g, x, 1, cfg);
  CHECK_FALSE(out.success);
  CHECK(out.x_adv == x);  // bitwise
}

TEST_CASE("non-finite gradients abort the attack as a failure") {
  PredictFn pred = mean_model();
  TargetGradFn nan_grad = [](const Vector& x, Index) {
    return Vector(Vector::Constant(x.size(),
                                   std::numeric_limits<double>::quiet_NaN()));
  };
  AttackConfig cfg;
  cfg.epsilon = 0.2;
  cfg.seed = 3;
  const Vector x = Vector::Constant(9, 0.5);
  const AttackOutcome out = pgd_targeted(pred, nan_grad, x, 1, cfg);
  CHECK_FALSE(out.success);
  CHECK(out.x_adv == x);
}

TEST_CASE("random starts are seeded and reproducible") {
  AttackConfig cfg;
  cfg.epsilon = 0.1;
  cfg.iterations = 2;
  cfg.seed = 11;
  const Vector x = Vector::Constant(16, 0.5);
  const AttackOutcome a = pgd_targeted(mean_model(), mean_model_grad(), x, 1, cfg);
  const AttackOutcome b = pgd_targeted(mean_model(), mean_model_grad(), x, 1, cfg);
  CHECK(a.x_adv == b.x_adv);
  CHECK(a.success == b.success);
}

TEST_CASE("attack input outside the pixel box is rejected") {
  AttackConfig cfg;
  Vector x = Vector::Constant(4, 1.2);
  CHECK_THROWS_AS(pgd_targeted(mean_model(), mean_model_grad(), x, 1, cfg),
                  ParamError);
}

TEST_CASE("attack_dataset stays in-ball for every sample and epsilon") {
  const DataSplits s = attack_data();
  const Backbone m = random_init(s.test.pixels(), 12, 3, 91);
  AttackConfig cfg;
  cfg.seed = 17;
  for (double eps : default_epsilon_sweep()) {
    cfg.epsilon = eps;
    const auto outcomes = attack_dataset(backbone_predict_fn(m),
                                         backbone_grad_fn(m), s.test, cfg);
    REQUIRE(outcomes.size() == static_cast<std::size_t>(s.test.size()));
    for (Index i = 0; i < s.test.size(); ++i) {
      const Vector x = s.test.images.row(i).transpose();
      const auto& out = outcomes[static_cast<std::size_t>(i)];
      const double radius = eps * x.lpNorm<Eigen::Infinity>();
      CHECK((out.x_adv - x).lpNorm<Eigen::Infinity>() <= radius + 1e-9);
      CHECK(out.x_adv.minCoeff() >= 0.0);
      CHECK(out.x_adv.maxCoeff() <= 1.0);
      CHECK(out.target != s.test.labels(i));
    }
  }
}

TEST_CASE("attack_dataset is independent of the worker count") {
  const DataSplits s = attack_data(10, 41);
  const Backbone m = random_init(s.test.pixels(), 10, 3, 92);
  AttackConfig cfg;
  cfg.epsilon = 0.06;
  cfg.seed = 23;
  const auto a =
      attack_dataset(backbone_predict_fn(m), backbone_grad_fn(m), s.test, cfg, 1);
  const auto b =
      attack_dataset(backbone_predict_fn(m), backbone_grad_fn(m), s.test, cfg, 4);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].x_adv == b[i].x_adv);
    CHECK(a[i].success == b[i].success);
    CHECK(a[i].target == b[i].target);
  }
}

TEST_CASE("gray-box reuses the backbone's adversarial examples bitwise") {
  DataConfig dc;
  dc.num_classes = 3;
  dc.width = 8;
  dc.per_class = 30;
  dc.seed = 50;
  const DataSplits s = generate_dataset(dc);
  TrainConfig tc;
  tc.hidden_dim = 12;
  tc.epochs = 10;
  tc.seed = 51;
  const Backbone m = train(s.train, tc).model;
  const LabeledEmbeddings e =
      extract_embeddings(m, s.train, EmbeddingLayer::HiddenRelu);
  const Cache cache = build_cache(e, 50.0, EmbeddingLayer::HiddenRelu);

  AttackConfig cfg;
  cfg.seed = 52;
  const std::vector<double> eps = {0.06};
  ThreatModel gray{ThreatKind::Gray, nullptr};
  const AccuracyTable table = run_threat_scenario(
      gray, m, &cache, Continuous{}, s.test, eps, cfg);

  // Recompute by hand: attack the backbone, evaluate the cache.
  cfg.epsilon = 0.06;
  const auto outcomes =
      attack_dataset(backbone_predict_fn(m), backbone_grad_fn(m), s.test, cfg);
  Index hits = 0;
  for (Index i = 0; i < s.test.size(); ++i)
    if (argmax(cache_predict(cache, m, outcomes[static_cast<std::size_t>(i)].x_adv,
                             Continuous{})) == s.test.labels(i))
      ++hits;
  const double want = static_cast<double>(hits) / static_cast<double>(s.test.size());
  CHECK(table.lookup("cache", "gray", 0.06) == want);

  // Gray-box tables cover only the cache.
  for (const auto& row : table.rows) CHECK(row.model == "cache");
}

TEST_CASE("white-box scenario reports clean rows and attacked rows per model") {
  const DataSplits s = attack_data(40, 60);
  TrainConfig tc;
  tc.hidden_dim = 10;
  tc.epochs = 240;
  tc.learning_rate = 0.05;
  tc.seed = 63;
  const Backbone m = train(s.train, tc).model;
  const LabeledEmbeddings e =
      extract_embeddings(m, s.train, EmbeddingLayer::HiddenRelu);
  const Cache cache = build_cache(e, 50.0, EmbeddingLayer::HiddenRelu);

  AttackConfig cfg;
  cfg.seed = 62;
  ThreatModel white{ThreatKind::White, nullptr};
  const AccuracyTable t = run_threat_scenario(white, m, &cache, Knn{5}, s.test,
                                              {0.02, 0.06}, cfg);
  // 2 clean rows + 2 epsilons x 2 models.
  CHECK(t.rows.size() == 6);
  const double clean_bb = t.lookup("backbone", "white", 0.0);
  const double adv_bb = t.lookup("backbone", "white", 0.06);
  CHECK(clean_bb >= adv_bb);  // attacks cannot help the model
  CHECK(t.lookup("cache", "white", 0.0) > 0.5);
  CHECK_THROWS_AS(t.lookup("cache", "white", 0.3), ParamError);
}

TEST_CASE("black-box needs a distinct surrogate") {
  const DataSplits s = attack_data(10, 70);
  TrainConfig tc;
  tc.hidden_dim = 10;
  tc.epochs = 6;
  tc.seed = 71;
  const Backbone m = train(s.train, tc).model;
  AttackConfig cfg;
  cfg.seed = 72;

  ThreatModel black{ThreatKind::Black, nullptr};
  CHECK_THROWS_WITH_AS(
      run_threat_scenario(black, m, nullptr, Continuous{}, s.test, {0.06}, cfg),
      doctest::Contains("surrogate"), ParamError);

  black.surrogate = &m;  // same weights: not an independent model
  CHECK_THROWS_WITH_AS(
      run_threat_scenario(black, m, nullptr, Continuous{}, s.test, {0.06}, cfg),
      doctest::Contains("identical"), ParamError);

  tc.seed = 73;
  const Backbone surrogate = train(s.train, tc).model;
  black.surrogate = &surrogate;
  const AccuracyTable t =
      run_threat_scenario(black, m, nullptr, Continuous{}, s.test, {0.06}, cfg);
  CHECK(t.rows.size() == 2);  // clean + one epsilon, backbone only
  CHECK(t.lookup("backbone", "black", 0.06) <= t.lookup("backbone", "black", 0.0));
}

TEST_CASE("gray-box without a cache is rejected") {
  const DataSplits s = attack_data(10, 80);
  const Backbone m = random_init(s.test.pixels(), 8, 3, 81);
  AttackConfig cfg;
  ThreatModel gray{ThreatKind::Gray, nullptr};
  CHECK_THROWS_WITH_AS(
      run_threat_scenario(gray, m, nullptr, Continuous{}, s.test, {0.06}, cfg),
      doctest::Contains("cache"), ParamError);
}

TEST_CASE("empty epsilon list is rejected") {
  const DataSplits s = attack_data(10, 82);
  const Backbone m = random_init(s.test.pixels(), 8, 3, 83);
  AttackConfig cfg;
  ThreatModel white{ThreatKind::White, nullptr};
  CHECK_THROWS_AS(
      run_threat_scenario(white, m, nullptr, Continuous{}, s.test, {}, cfg),
      ParamError);
}

TEST_CASE("accuracy table CSV has the fixed column layout") {
  oracles::TempDir tmp;
  AccuracyTable t;
  t.rows = {{"backbone", "white", 0.0, 0.9375}, {"cache", "gray", 0.06, 0.5}};
  const auto path = tmp.path() / "acc.csv";
  t.write_csv(path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "model,threat,epsilon,top1");
  std::getline(in, line);
  CHECK(line == "backbone,white,0,0.9375");
  std::getline(in, line);
  CHECK(line == "cache,gray,0.059999999999999998,0.5");

  t.write_json(tmp.path() / "acc.json", R"({"epsilon":[0.06]})");
  CHECK(std::filesystem::file_size(tmp.path() / "acc.json") > 0);
}

TEST_CASE("default epsilon sweep is the documented six-point grid") {
  const auto eps = default_epsilon_sweep();
  REQUIRE(eps.size() == 6);
  CHECK(eps == std::vector<double>{0.01, 0.02, 0.04, 0.06, 0.08, 0.1});
}

TEST_CASE("cache gradient adapter matches the jacobian row") {
  DataConfig dc;
  dc.num_classes = 3;
  dc.width = 4;
  dc.per_class = 20;
  dc.seed = 90;
  const DataSplits s = generate_dataset(dc);
  TrainConfig tc;
  tc.hidden_dim = 8;
  tc.epochs = 6;
  tc.seed = 91;
  const Backbone m = train(s.train, tc).model;
  const LabeledEmbeddings e =
      extract_embeddings(m, s.train, EmbeddingLayer::HiddenRelu);
  const Cache cache = build_cache(e, 30.0, EmbeddingLayer::HiddenRelu);

  const Vector x = s.val.images.row(0).transpose();
  const Vector g = cache_grad_fn(cache, m)(x, 2);
  const Matrix j = prediction_jacobian(cache, m, x);
  const double pt = cache_predict(cache, m, x, Continuous{})(2);
  const Vector want = -j.row(2).transpose() / pt;
  CHECK(oracles::max_rel_err(g, want) < 1e-12);
}
