#include <epicache/cache.hpp>

#include <epicache/io.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace epicache {

namespace {

constexpr double kNormTol = 1e-6;

void check_query(const Cache& c, const Vector& query) {
  if (query.size() != c.dim())
    throw ShapeError("query of size " + std::to_string(query.size()) +
                     " does not match cache key dimension " +
                     std::to_string(c.dim()));
  if (std::abs(query.norm() - 1.0) > kNormTol)
    throw ParamError("cache queries must be unit-norm");
}

}  // namespace

void Cache::validate() const {
  if (size() < 1) throw ShapeError("cache has no entries");
  if (dim() < 1 || num_classes() < 1)
    throw ShapeError("cache key/value dimensions must be positive");
  if (values.rows() != size())
    throw ShapeError("cache has " + std::to_string(size()) + " keys but " +
                     std::to_string(values.rows()) + " value rows");
  if (!(theta > 0.0) || !std::isfinite(theta))
    throw ParamError("cache theta must be positive and finite");
  if (!keys.allFinite() || !values.allFinite())
    throw NumericError("cache contains non-finite entries");
  for (Index k = 0; k < size(); ++k) {
    if (std::abs(keys.row(k).norm() - 1.0) > kNormTol)
      throw NumericError("cache key " + std::to_string(k) +
                         " is not unit-norm");
    if (values.row(k).minCoeff() < 0.0 ||
        std::abs(values.row(k).sum() - 1.0) > kNormTol)
      throw NumericError("cache value row " + std::to_string(k) +
                         " is not a distribution");
  }
  if (key_transform) {
    key_transform->validate();
    if (key_transform->out_dim() != dim())
      throw ShapeError("key transform output dimension does not match keys");
  }
}

Vector normalize_query(const Vector& v) {
  const double norm = v.norm();
  if (norm < 1e-12)
    throw NumericError("zero-norm embedding has no unit direction");
  return v / norm;
}

Cache build_cache(const LabeledEmbeddings& embeddings, double theta,
                  EmbeddingLayer layer) {
  embeddings.validate();
  if (embeddings.layer != layer)
    throw ParamError("embeddings came from layer '" +
                     layer_name(embeddings.layer) +
                     "' but the cache was requested for '" +
                     layer_name(layer) + "'");
  if (!(theta > 0.0) || !std::isfinite(theta))
    throw ParamError("cache theta must be positive and finite");
  if (embeddings.size() < 1) throw ParamError("cannot build an empty cache");

  Cache c;
  c.theta = theta;
  c.layer = layer;
  c.keys.resize(embeddings.size(), embeddings.dim());
  for (Index k = 0; k < embeddings.size(); ++k) {
    const double norm = embeddings.vectors.row(k).norm();
    if (norm < 1e-12)
      throw ParamError("embedding row " + std::to_string(k) +
                       " has zero norm and cannot become a key");
    c.keys.row(k) = embeddings.vectors.row(k) / norm;
  }
  c.values.setZero(embeddings.size(), embeddings.num_classes);
  for (Index k = 0; k < embeddings.size(); ++k)
    c.values(k, embeddings.labels(k)) = 1.0;
  c.validate();
  return c;
}

Vector similarity_scores(const Cache& c, const Vector& query) {
  check_query(c, query);
  const Vector dots = c.keys * query;
  const double mx = dots.maxCoeff();
  return ((dots.array() - mx) * c.theta).exp();
}

Vector predict(const Cache& c, const Vector& query,
               const RetrievalMethod& method) {
  const Vector scores = similarity_scores(c, query);

  std::vector<Index> selected;
  if (std::holds_alternative<Knn>(method)) {
    const Index k = std::get<Knn>(method).k;
    if (k < 1)
      throw ParamError("k-NN retrieval needs k >= 1");
    if (k > c.size())
      throw ParamError("k-NN retrieval with k = " + std::to_string(k) +
                       " exceeds cache size " + std::to_string(c.size()));
    selected.resize(static_cast<std::size_t>(c.size()));
    std::iota(selected.begin(), selected.end(), Index{0});
    // Ties on similarity resolve toward the lower key index.
    std::sort(selected.begin(), selected.end(), [&](Index a, Index b) {
      if (scores(a) != scores(b)) return scores(a) > scores(b);
      return a < b;
    });
    selected.resize(static_cast<std::size_t>(k));
    std::sort(selected.begin(), selected.end());
  } else {
    selected.resize(static_cast<std::size_t>(c.size()));
    std::iota(selected.begin(), selected.end(), Index{0});
  }

  // Fixed ascending-index accumulation keeps k = K bitwise equal to the
  // continuous read-out.
  Vector acc = Vector::Zero(c.num_classes());
  double total = 0.0;
  for (Index idx : selected) {
    acc += scores(idx) * c.values.row(idx).transpose();
    total += scores(idx);
  }
  if (!(total > 0.0) || !std::isfinite(total))
    throw NumericError("similarity mass degenerated to zero");
  return acc / total;
}

Vector cache_query(const Cache& c, const Backbone& m, const Vector& x) {
  const Vector e = embed(m, x, c.layer);
  return c.key_transform ? apply_pca(*c.key_transform, e) : normalize_query(e);
}

Vector cache_predict(const Cache& c, const Backbone& m, const Vector& x,
                     const RetrievalMethod& method) {
  return predict(c, cache_query(c, m, x), method);
}

std::vector<double> default_theta_grid() {
  return {10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0};
}

double tune_theta(const Cache& c, const Backbone& m, const Dataset& val,
                  const std::vector<double>& grid, unsigned workers) {
  if (grid.empty()) throw ParamError("theta grid is empty");
  for (double g : grid)
    if (!(g > 0.0) || !std::isfinite(g))
      throw ParamError("theta grid entries must be positive and finite");
  c.validate();
  val.validate();
  if (val.size() == 0) throw ParamError("theta tuning needs validation data");
  if (val.num_classes != c.num_classes())
    throw ShapeError("validation class count does not match the cache");

  const auto n_grid = static_cast<Index>(grid.size());
  // hits(g, i): grid point g classifies sample i correctly. The argmax of
  // the read-out is insensitive to the 1/sum normalization, so it is
  // skipped here.
  Matrix hits = Matrix::Zero(n_grid, val.size());
  parallel_for(
      val.size(),
      [&](Index i) {
        const Vector q = cache_query(c, m, val.images.row(i).transpose());
        const Vector dots = c.keys * q;
        const double mx = dots.maxCoeff();
        for (Index g = 0; g < n_grid; ++g) {
          const Vector scores =
              ((dots.array() - mx) * grid[static_cast<std::size_t>(g)]).exp();
          const Vector acc = c.values.transpose() * scores;
          if (argmax(acc) == val.labels(i)) hits(g, i) = 1.0;
        }
      },
      workers);

  double best_theta = 0.0;
  double best_acc = -1.0;
  for (Index g = 0; g < n_grid; ++g) {
    const double acc = hits.row(g).sum() / static_cast<double>(val.size());
    const double theta = grid[static_cast<std::size_t>(g)];
    const bool better =
        acc > best_acc || (acc == best_acc && theta < best_theta);
    if (better) {
      best_acc = acc;
      best_theta = theta;
    }
  }
  return best_theta;
}

Matrix prediction_jacobian(const Cache& c, const Backbone& m, const Vector& x) {
  const ForwardTrace t = forward_trace(m, x);
  const Vector e =
      c.layer == EmbeddingLayer::HiddenRelu ? t.hidden : t.probs;

  const Vector raw = c.key_transform ? pca_project(*c.key_transform, e) : e;
  const double nv = raw.norm();
  if (nv < 1e-12)
    throw NumericError("degenerate query: embedding projects to zero norm");
  const Vector q = raw / nv;

  const Vector dots = c.keys * q;
  const double mx = dots.maxCoeff();
  const Vector scores = ((dots.array() - mx) * c.theta).exp();
  const Vector w = scores / scores.sum();
  const Vector p = c.values.transpose() * w;

  // dp/dq = theta * (V^T diag(w) M - p (M^T w)^T) with M the key matrix.
  const Matrix weighted = c.keys.array().colwise() * w.array();
  const Matrix u = c.values.transpose() * weighted;
  const Vector mbar = weighted.colwise().sum().transpose();
  Matrix g = c.theta * (u - p * mbar.transpose());

  // Through the l2 normalization: dq/draw = (I - q q^T)/|raw|.
  g = (g - (g * q) * q.transpose()) / nv;

  if (c.key_transform) g = g * c.key_transform->components;

  // Down through the backbone to the pixels.
  if (c.layer == EmbeddingLayer::SoftmaxProbs) {
    const Vector pb = t.probs;
    g = g * pb.asDiagonal() - (g * pb) * pb.transpose();
    g = g * m.w2;
  }
  const Vector mask = (t.preact.array() > 0.0).cast<double>();
  g = g * mask.asDiagonal() * m.w1;

  if (!g.allFinite())
    throw NumericError("cache prediction jacobian is non-finite");
  return g;
}

void save_cache(const Cache& c, const std::filesystem::path& path) {
  c.validate();
  BinaryWriter w;
  w.magic("EPCH");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(c.size()));
  w.u32(static_cast<std::uint32_t>(c.dim()));
  w.u32(static_cast<std::uint32_t>(c.num_classes()));
  w.f64(c.theta);
  w.u8(static_cast<std::uint8_t>(c.layer));
  w.u8(c.key_transform ? 1 : 0);
  if (c.key_transform) serialize_pca(w, *c.key_transform);
  w.f32_matrix(c.keys);
  w.f32_matrix(c.values);
  w.save(path);
}

Cache load_cache(const std::filesystem::path& path) {
  BinaryReader r = BinaryReader::from_file(path);
  r.expect_magic("EPCH", "cache");
  r.expect_version(1, "cache");
  const Index k = static_cast<Index>(r.u32());
  const Index d = static_cast<Index>(r.u32());
  const Index classes = static_cast<Index>(r.u32());
  Cache c;
  c.theta = r.f64();
  const std::uint8_t layer = r.u8();
  if (layer > 1)
    throw FormatError("cache file has unknown layer tag " +
                      std::to_string(layer));
  c.layer = static_cast<EmbeddingLayer>(layer);
  const std::uint8_t has_transform = r.u8();
  if (has_transform > 1)
    throw FormatError("cache file has a bad key-transform flag");
  if (has_transform == 1) c.key_transform = deserialize_pca(r);
  c.keys = r.f32_matrix(k, d);
  c.values = r.f32_matrix(k, classes);
  c.validate();
  return c;
}

}  // namespace epicache
