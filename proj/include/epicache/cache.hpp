#pragma once

#include <epicache/backbone.hpp>
#include <epicache/common.hpp>
#include <epicache/dataset.hpp>
#include <epicache/embeddings.hpp>
#include <epicache/pca.hpp>

#include <filesystem>
#include <optional>
#include <variant>
#include <vector>

namespace epicache {

// Episodic memory: unit-norm keys with per-key class distributions.
// Fresh caches hold one-hot values; compressed ones may hold soft rows.
struct Cache {
  Matrix keys;    // K x dim, rows unit l2 norm
  Matrix values;  // K x classes, rows nonnegative, sum 1
  double theta = 50.0;  // similarity sharpness
  EmbeddingLayer layer = EmbeddingLayer::HiddenRelu;
  // Set when keys live in a PCA subspace; queries must pass through it.
  std::optional<PcaTransform> key_transform;

  Index size() const { return keys.rows(); }
  Index dim() const { return keys.cols(); }
  Index num_classes() const { return values.cols(); }
  void validate() const;
};

struct Continuous {};
struct Knn {
  Index k = 50;
};
using RetrievalMethod = std::variant<Continuous, Knn>;

Cache build_cache(const LabeledEmbeddings& embeddings, double theta,
                  EmbeddingLayer layer);

// l2 normalization; zero-norm input throws NumericError.
Vector normalize_query(const Vector& v);

// exp(theta * key . query) per key, up to one shared positive factor
// (the max dot is subtracted before exponentiation for stability).
Vector similarity_scores(const Cache& c, const Vector& query);

// Class distribution: similarity-weighted mean of the value rows, over all
// keys (Continuous) or the top-k by dot product (Knn; ties favor lower key
// index). Query must be unit-norm.
Vector predict(const Cache& c, const Vector& query, const RetrievalMethod& method);

// Embeds x with the cache's layer, applies the key transform if any, and
// normalizes. The canonical image-to-query path.
Vector cache_query(const Cache& c, const Backbone& m, const Vector& x);

Vector cache_predict(const Cache& c, const Backbone& m, const Vector& x,
                     const RetrievalMethod& method);

std::vector<double> default_theta_grid();  // 10, 20, ..., 90

// Picks the grid theta with the best top-1 accuracy of the continuous
// read-out on `val`; ties resolve to the smaller theta.
double tune_theta(const Cache& c, const Backbone& m, const Dataset& val,
                  const std::vector<double>& grid, unsigned workers = 0);

// d(cache probs)/d(input image) via the continuous read-out, classes x pixels.
Matrix prediction_jacobian(const Cache& c, const Backbone& m, const Vector& x);

void save_cache(const Cache& c, const std::filesystem::path& path);
Cache load_cache(const std::filesystem::path& path);

}  // namespace epicache
