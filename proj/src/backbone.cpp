#include <epicache/backbone.hpp>

#include <epicache/io.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace epicache {

namespace {

void check_input(const Backbone& m, const Vector& x) {
  if (x.size() != m.input_dim())
    throw ShapeError("input of size " + std::to_string(x.size()) +
                     " does not match backbone input dim " +
                     std::to_string(m.input_dim()));
}

Vector softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp();
  return e / e.sum();
}

}  // namespace

void Backbone::validate() const {
  if (input_dim() < 1 || hidden_dim() < 1 || num_classes() < 1)
    throw ShapeError("backbone dimensions must be positive");
  if (b1.size() != hidden_dim() || w2.cols() != hidden_dim() ||
      b2.size() != num_classes())
    throw ShapeError("backbone weight shapes are inconsistent");
  if (!w1.allFinite() || !b1.allFinite() || !w2.allFinite() || !b2.allFinite())
    throw NumericError("backbone weights contain non-finite values");
}

std::string layer_name(EmbeddingLayer layer) {
  return layer == EmbeddingLayer::HiddenRelu ? "hidden_relu" : "softmax_probs";
}

EmbeddingLayer layer_from_name(std::string_view name) {
  if (name == "hidden_relu") return EmbeddingLayer::HiddenRelu;
  if (name == "softmax_probs") return EmbeddingLayer::SoftmaxProbs;
  throw ParamError("unknown embedding layer '" + std::string(name) + "'");
}

Backbone random_init(Index input_dim, Index hidden_dim, Index num_classes,
                     std::uint64_t seed) {
  if (input_dim < 1 || hidden_dim < 1 || num_classes < 1)
    throw ParamError("backbone dimensions must be positive");
  std::mt19937_64 rng(mix_seed({seed, seed_stream::init}));
  // Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), filled row by row.
  auto fill = [&rng](Matrix& m, Index fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = u(rng);
  };
  Backbone m;
  m.w1.resize(hidden_dim, input_dim);
  m.b1.resize(hidden_dim);
  m.w2.resize(num_classes, hidden_dim);
  m.b2.resize(num_classes);
  fill(m.w1, input_dim);
  Matrix b1m = Matrix::Zero(hidden_dim, 1);
  fill(b1m, input_dim);
  m.b1 = b1m.col(0);
  fill(m.w2, hidden_dim);
  Matrix b2m = Matrix::Zero(num_classes, 1);
  fill(b2m, hidden_dim);
  m.b2 = b2m.col(0);
  return m;
}

ForwardTrace forward_trace(const Backbone& m, const Vector& x) {
  check_input(m, x);
  ForwardTrace t;
  t.preact = m.w1 * x + m.b1;
  if (!t.preact.allFinite())
    throw NumericError("hidden pre-activation is non-finite");
  t.hidden = t.preact.cwiseMax(0.0);
  t.logits = m.w2 * t.hidden + m.b2;
  if (!t.logits.allFinite()) throw NumericError("logits are non-finite");
  t.probs = softmax(t.logits);
  return t;
}

Vector forward(const Backbone& m, const Vector& x) {
  return forward_trace(m, x).probs;
}

Vector embed(const Backbone& m, const Vector& x, EmbeddingLayer layer) {
  const ForwardTrace t = forward_trace(m, x);
  return layer == EmbeddingLayer::HiddenRelu ? t.hidden : t.probs;
}

Vector input_gradient(const Backbone& m, const Vector& x, const LossSpec& loss) {
  if (loss.target.size() != m.num_classes())
    throw ShapeError("loss target length " + std::to_string(loss.target.size()) +
                     " does not match class count " +
                     std::to_string(m.num_classes()));
  if (!loss.target.allFinite() || loss.target.minCoeff() < 0.0)
    throw ParamError("loss target weights must be finite and nonnegative");
  if (!std::isfinite(loss.scale)) throw ParamError("loss scale must be finite");

  const ForwardTrace t = forward_trace(m, x);
  // d/dz of scale * sum_c target_c * (-log softmax(z)_c).
  const double mass = loss.target.sum();
  const Vector dz = loss.scale * (mass * t.probs - loss.target);
  const Vector dh = m.w2.transpose() * dz;
  // ReLU subgradient: zero at the kink.
  const Vector da = (t.preact.array() > 0.0).select(dh, 0.0);
  return m.w1.transpose() * da;
}

Matrix softmax_jacobian(const Backbone& m, const Vector& x) {
  const ForwardTrace t = forward_trace(m, x);
  const Vector mask = (t.preact.array() > 0.0).cast<double>();
  const Matrix inner = m.w2 * mask.asDiagonal() * m.w1;  // classes x input
  const Vector p = t.probs;
  return p.asDiagonal() * inner - p * (p.transpose() * inner);
}

TrainResult train(const Dataset& data, const TrainConfig& cfg) {
  data.validate();
  if (data.size() < 1) throw ParamError("training set is empty");
  if (cfg.hidden_dim < 1 || cfg.epochs < 1 || cfg.batch_size < 1)
    throw ParamError("train config requires positive hidden/epochs/batch");
  if (!(cfg.learning_rate > 0.0))
    throw ParamError("learning rate must be positive");
  if (cfg.augmentation) cfg.augmentation->validate();

  const Index n = data.pixels();
  const Index num_classes = data.num_classes;
  const Index count = data.size();
  Backbone m = random_init(n, cfg.hidden_dim, num_classes, cfg.seed);

  std::vector<Index> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), Index{0});

  TrainResult result;
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(mix_seed({cfg.seed, seed_stream::shuffle,
                                          static_cast<std::uint64_t>(epoch)}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_nll = 0.0;
    for (Index start = 0; start < count; start += cfg.batch_size) {
      const Index bsz = std::min<Index>(cfg.batch_size, count - start);
      Matrix x(n, bsz);
      std::vector<Index> y(static_cast<std::size_t>(bsz));
      for (Index b = 0; b < bsz; ++b) {
        const Index idx = order[static_cast<std::size_t>(start + b)];
        Vector img = data.images.row(idx).transpose();
        if (cfg.augmentation) {
          std::mt19937_64 aug(mix_seed({cfg.seed, seed_stream::augment,
                                        static_cast<std::uint64_t>(epoch),
                                        static_cast<std::uint64_t>(idx)}));
          std::uniform_real_distribution<double> u(0.0, 1.0);
          if (u(aug) < cfg.augment_prob) {
            const auto& suite = *cfg.augmentation;
            std::uniform_int_distribution<std::size_t> pick(
                0, suite.corruptions.size() - 1);
            std::uniform_int_distribution<int> sev(1, 5);
            const auto& corr = suite.corruptions[pick(aug)];
            img = apply_corruption(suite, img, data.width, corr.name,
                                   sev(aug), aug());
          }
        }
        x.col(b) = img;
        y[static_cast<std::size_t>(b)] = data.labels(idx);
      }

      Matrix a1 = (m.w1 * x).colwise() + m.b1;
      Matrix h = a1.cwiseMax(0.0);
      Matrix z = (m.w2 * h).colwise() + m.b2;
      // Column-wise stable softmax.
      Eigen::RowVectorXd mx = z.colwise().maxCoeff();
      Matrix e = (z.rowwise() - mx).array().exp();
      Eigen::RowVectorXd sums = e.colwise().sum();
      Matrix p = e.array().rowwise() / sums.array();

      double batch_nll = 0.0;
      Matrix dz = p;
      for (Index b = 0; b < bsz; ++b) {
        batch_nll += -std::log(p(y[static_cast<std::size_t>(b)], b));
        dz(y[static_cast<std::size_t>(b)], b) -= 1.0;
      }
      if (!std::isfinite(batch_nll))
        throw NumericError(
            "training loss became non-finite at epoch " +
            std::to_string(epoch) +
            "; the learning rate may be too large for this data");
      epoch_nll += batch_nll;
      dz /= static_cast<double>(bsz);

      const Matrix gw2 = dz * h.transpose();
      const Vector gb2 = dz.rowwise().sum();
      Matrix dh = m.w2.transpose() * dz;
      const Matrix da = (a1.array() > 0.0).select(dh, Matrix::Zero(dh.rows(), dh.cols()));
      const Matrix gw1 = da * x.transpose();
      const Vector gb1 = da.rowwise().sum();

      m.w2 -= cfg.learning_rate * gw2;
      m.b2 -= cfg.learning_rate * gb2;
      m.w1 -= cfg.learning_rate * gw1;
      m.b1 -= cfg.learning_rate * gb1;
    }
    result.epoch_loss.push_back(epoch_nll / static_cast<double>(count));
  }
  m.validate();
  result.model = std::move(m);
  return result;
}

double mean_cross_entropy(const Backbone& m, const Dataset& data) {
  data.validate();
  if (data.size() == 0) throw ParamError("cross-entropy over empty dataset");
  double total = 0.0;
  for (Index i = 0; i < data.size(); ++i) {
    const Vector p = forward(m, data.images.row(i).transpose());
    total += -std::log(p(data.labels(i)));
  }
  return total / static_cast<double>(data.size());
}

double top1_accuracy(const Backbone& m, const Dataset& data) {
  data.validate();
  if (data.size() == 0) throw ParamError("accuracy over empty dataset");
  Index hits = 0;
  for (Index i = 0; i < data.size(); ++i)
    if (argmax(forward(m, data.images.row(i).transpose())) == data.labels(i))
      ++hits;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

namespace {

void serialize_backbone(BinaryWriter& w, const Backbone& m) {
  w.magic("EPBB");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(m.input_dim()));
  w.u32(static_cast<std::uint32_t>(m.hidden_dim()));
  w.u32(static_cast<std::uint32_t>(m.num_classes()));
  w.f32_matrix(m.w1);
  w.f32_matrix(m.b1);
  w.f32_matrix(m.w2);
  w.f32_matrix(m.b2);
}

}  // namespace

void save_backbone(const Backbone& m, const std::filesystem::path& path) {
  m.validate();
  BinaryWriter w;
  serialize_backbone(w, m);
  w.save(path);
}

Backbone load_backbone(const std::filesystem::path& path) {
  BinaryReader r = BinaryReader::from_file(path);
  r.expect_magic("EPBB", "backbone checkpoint");
  r.expect_version(1, "backbone checkpoint");
  const Index n = static_cast<Index>(r.u32());
  const Index h = static_cast<Index>(r.u32());
  const Index c = static_cast<Index>(r.u32());
  Backbone m;
  m.w1 = r.f32_matrix(h, n);
  m.b1 = r.f32_matrix(h, 1).col(0);
  m.w2 = r.f32_matrix(c, h);
  m.b2 = r.f32_matrix(c, 1).col(0);
  m.validate();
  return m;
}

std::string backbone_digest(const Backbone& m) {
  BinaryWriter w;
  serialize_backbone(w, m);
  return "fnv64:" + hex64(fnv1a64(w.buffer().data(), w.buffer().size()));
}

}  // namespace epicache
