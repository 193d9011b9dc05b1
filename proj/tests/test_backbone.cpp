#include <doctest.h>

#include <epicache/backbone.hpp>
#include <epicache/dataset.hpp>

#include <cmath>
#include <fstream>
#include <random>

#include "oracles.hpp"

using namespace epicache;

namespace {

Vector random_unit_box(Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vector x(n);
  for (Index i = 0; i < n; ++i) x(i) = u(rng);
  return x;
}

// A point whose hidden pre-activations are all safely away from the ReLU
// kink, so finite differences are trustworthy.
Vector kink_free_point(const Backbone& m, std::mt19937_64& rng,
                       double margin = 1e-3) {
  for (int tries = 0; tries < 200; ++tries) {
    Vector x = random_unit_box(m.input_dim(), rng);
    if (forward_trace(m, x).preact.cwiseAbs().minCoeff() > margin) return x;
  }
  REQUIRE_MESSAGE(false, "no kink-free point found");
  return Vector();
}

}  // namespace

TEST_CASE("random init stays inside the fan-in bounds and is seeded") {
  const Backbone m = random_init(12, 7, 4, 5);
  const double bound1 = 1.0 / std::sqrt(12.0);
  const double bound2 = 1.0 / std::sqrt(7.0);
  CHECK(m.w1.cwiseAbs().maxCoeff() <= bound1);
  CHECK(m.b1.cwiseAbs().maxCoeff() <= bound1);
  CHECK(m.w2.cwiseAbs().maxCoeff() <= bound2);
  CHECK(m.b2.cwiseAbs().maxCoeff() <= bound2);

  const Backbone same = random_init(12, 7, 4, 5);
  CHECK(m.w1 == same.w1);
  const Backbone other = random_init(12, 7, 4, 6);
  CHECK(m.w1 != other.w1);
}

TEST_CASE("forward probabilities are a distribution matching a long-double oracle") {
  std::mt19937_64 rng(11);
  const Backbone m = random_init(10, 8, 5, 1);
  for (int rep = 0; rep < 20; ++rep) {
    const Vector x = random_unit_box(10, rng);
    const ForwardTrace t = forward_trace(m, x);
    CHECK(t.probs.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(t.probs.minCoeff() > 0.0);
    const Vector ref = oracles::softmax(t.logits);
    CHECK(oracles::max_rel_err(t.probs, ref) < 1e-13);
  }
}

TEST_CASE("zero weights give the uniform distribution") {
  Backbone m;
  m.w1 = Matrix::Zero(4, 6);
  m.b1 = Vector::Zero(4);
  m.w2 = Matrix::Zero(5, 4);
  m.b2 = Vector::Zero(5);
  const Vector p = forward(m, Vector::Constant(6, 0.3));
  for (Index c = 0; c < 5; ++c)
    CHECK(p(c) == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("embed returns the requested layer") {
  std::mt19937_64 rng(2);
  const Backbone m = random_init(9, 6, 3, 7);
  const Vector x = random_unit_box(9, rng);
  const ForwardTrace t = forward_trace(m, x);
  CHECK(embed(m, x, EmbeddingLayer::HiddenRelu) == t.hidden);
  CHECK(embed(m, x, EmbeddingLayer::SoftmaxProbs) == t.probs);
  CHECK(t.hidden.minCoeff() >= 0.0);
}

TEST_CASE("input gradient matches central finite differences") {
  std::mt19937_64 rng(31);
  for (int rep = 0; rep < 10; ++rep) {
    const Backbone m = random_init(8, 6, 4, 100 + rep);
    const Vector x = kink_free_point(m, rng);
    LossSpec loss;
    loss.target = Vector::Zero(4);
    loss.target(rep % 4) = 1.0;
    loss.scale = 1.0;

    const Vector analytic = input_gradient(m, x, loss);
    const Vector fd = oracles::fd_gradient(
        [&](const Vector& v) {
          const Vector p = forward(m, v);
          double acc = 0.0;
          for (Index c = 0; c < 4; ++c) acc += loss.target(c) * -std::log(p(c));
          return loss.scale * acc;
        },
        x, 1e-5);
    CHECK(oracles::max_rel_err(analytic, fd) < 1e-6);
  }
}

TEST_CASE("gradient of a loss targeting the model's own output is zero") {
  std::mt19937_64 rng(5);
  const Backbone m = random_init(8, 5, 3, 9);
  const Vector x = random_unit_box(8, rng);
  LossSpec loss;
  loss.target = forward(m, x);  // distribution equals the prediction
  const Vector g = input_gradient(m, x, loss);
  CHECK(g.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gradient scales linearly with the loss scale") {
  std::mt19937_64 rng(6);
  const Backbone m = random_init(8, 5, 3, 10);
  const Vector x = random_unit_box(8, rng);
  LossSpec loss;
  loss.target = Vector::Zero(3);
  loss.target(1) = 1.0;
  const Vector g1 = input_gradient(m, x, loss);
  loss.scale = 2.0;
  const Vector g2 = input_gradient(m, x, loss);
  CHECK((g2 - 2.0 * g1).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("softmax jacobian matches finite differences and has zero row sums") {
  std::mt19937_64 rng(13);
  const Backbone m = random_init(7, 6, 4, 21);
  const Vector x = kink_free_point(m, rng);
  const Matrix j = softmax_jacobian(m, x);
  REQUIRE(j.rows() == 4);
  REQUIRE(j.cols() == 7);
  // Columns of the jacobian sum to zero: probabilities stay normalized.
  CHECK(j.colwise().sum().cwiseAbs().maxCoeff() < 1e-12);
  const Matrix fd = oracles::fd_jacobian(
      [&](const Vector& v) { return forward(m, v); }, x, 1e-5);
  CHECK(oracles::max_rel_err(j, fd) < 1e-6);
}

TEST_CASE("training separable data drives the loss down and accuracy up") {
  DataConfig dc;
  dc.num_classes = 3;
  dc.width = 8;
  dc.per_class = 40;
  dc.seed = 3;
  const DataSplits s = generate_dataset(dc);
  TrainConfig tc;
  tc.hidden_dim = 16;
  tc.epochs = 240;
  tc.batch_size = 16;
  tc.learning_rate = 0.05;
  tc.seed = 4;
  const TrainResult r = train(s.train, tc);
  REQUIRE(r.epoch_loss.size() == 240);
  CHECK(r.epoch_loss.back() < 0.5 * r.epoch_loss.front());
  CHECK(top1_accuracy(r.model, s.train) > 0.9);
  CHECK(top1_accuracy(r.model, s.test) > 0.8);
  CHECK(mean_cross_entropy(r.model, s.train) < 1.0);
}

TEST_CASE("training is bitwise deterministic in the seed") {
  DataConfig dc;
  dc.num_classes = 2;
  dc.width = 8;
  dc.per_class = 12;
  dc.seed = 8;
  const DataSplits s = generate_dataset(dc);
  TrainConfig tc;
  tc.hidden_dim = 8;
  tc.epochs = 3;
  tc.seed = 9;
  const TrainResult a = train(s.train, tc);
  const TrainResult b = train(s.train, tc);
  CHECK(a.model.w1 == b.model.w1);
  CHECK(a.model.w2 == b.model.w2);
  CHECK(a.epoch_loss == b.epoch_loss);
  tc.seed = 10;
  const TrainResult c = train(s.train, tc);
  CHECK(a.model.w1 != c.model.w1);
}

TEST_CASE("augmented training takes a different path than clean training") {
  DataConfig dc;
  dc.num_classes = 2;
  dc.width = 8;
  dc.per_class = 12;
  dc.seed = 12;
  const DataSplits s = generate_dataset(dc);
  TrainConfig tc;
  tc.hidden_dim = 8;
  tc.epochs = 2;
  tc.seed = 13;
  const TrainResult clean = train(s.train, tc);
  tc.augmentation = CorruptionSuite::defaults(1);
  const TrainResult aug = train(s.train, tc);
  CHECK(clean.model.w1 != aug.model.w1);
  // Same config twice stays reproducible.
  const TrainResult aug2 = train(s.train, tc);
  CHECK(aug.model.w1 == aug2.model.w1);
}

TEST_CASE("a runaway learning rate fails loudly") {
  DataConfig dc;
  dc.num_classes = 3;
  dc.width = 8;
  dc.per_class = 10;
  dc.seed = 14;
  const DataSplits s = generate_dataset(dc);
  TrainConfig tc;
  tc.hidden_dim = 8;
  tc.epochs = 5;
  tc.learning_rate = 1e8;
  tc.seed = 15;
  CHECK_THROWS_WITH_AS(train(s.train, tc), doctest::Contains("learning rate"),
                       NumericError);
}

TEST_CASE("train config is validated") {
  DataConfig dc;
  dc.num_classes = 2;
  dc.width = 8;
  dc.per_class = 6;
  dc.seed = 1;
  const DataSplits s = generate_dataset(dc);
  TrainConfig tc;
  tc.epochs = 0;
  CHECK_THROWS_AS(train(s.train, tc), ParamError);
  tc = TrainConfig{};
  tc.learning_rate = 0.0;
  CHECK_THROWS_AS(train(s.train, tc), ParamError);
}

TEST_CASE("checkpoint round trip is the f32 cast and byte-stable") {
  oracles::TempDir tmp;
  const Backbone m = random_init(6, 5, 3, 77);
  const auto path = tmp.path() / "m.bb";
  save_backbone(m, path);
  const Backbone back = load_backbone(path);
  for (Index r = 0; r < m.w1.rows(); ++r)
    for (Index c = 0; c < m.w1.cols(); ++c)
      CHECK(back.w1(r, c) ==
            static_cast<double>(static_cast<float>(m.w1(r, c))));

  const auto path2 = tmp.path() / "m2.bb";
  save_backbone(back, path2);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  const std::string bytes_a{std::istreambuf_iterator<char>(a), {}};
  const std::string bytes_b{std::istreambuf_iterator<char>(b), {}};
  CHECK(bytes_a == bytes_b);

  CHECK(backbone_digest(back) == backbone_digest(load_backbone(path)));
  Backbone tweaked = back;
  tweaked.b2(0) += 0.25;
  CHECK(backbone_digest(tweaked) != backbone_digest(back));
}

TEST_CASE("shape mismatches are rejected") {
  const Backbone m = random_init(6, 5, 3, 1);
  CHECK_THROWS_AS(forward(m, Vector::Zero(7)), ShapeError);
  LossSpec loss;
  loss.target = Vector::Zero(4);
  CHECK_THROWS_AS(input_gradient(m, Vector::Zero(6), loss), ShapeError);
  Backbone bad = m;
  bad.b1 = Vector::Zero(2);
  CHECK_THROWS_AS(bad.validate(), ShapeError);
}
