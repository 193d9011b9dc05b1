#pragma once

#include <epicache/cache.hpp>
#include <epicache/common.hpp>

#include <cstdint>
#include <variant>

namespace epicache {

struct KMeansConfig {
  Index n_clusters = 0;
  Index batch_size = 256;
  Index iterations = 100;  // mini-batch steps
  std::uint64_t seed = 0;
};

struct KMeansResult {
  Matrix centroids;      // n_clusters x dim
  IntVector assignment;  // rows -> centroid index, from the final full pass
};

// Mini-batch k-means with k-means++ seeding and per-centroid 1/count
// learning rates. Clusters left empty by the final pass are reseeded once
// from the farthest point; a second failure is an error.
KMeansResult minibatch_kmeans(const Matrix& rows, const KMeansConfig& cfg);

// Compression strategies for an existing cache.
struct PcaCompression {
  Index out_dim = 0;
  Index batch_size = 256;
};
struct ClusterCompression {
  KMeansConfig kmeans;
  // Split the budget across classes proportionally to class mass (each
  // class keyed by its value-row argmax) instead of clustering globally.
  bool per_class = true;
};
using CompressionMethod = std::variant<PcaCompression, ClusterCompression>;

// PCA compression keeps one entry per key but shrinks the key dimension
// (queries then pass through the stored transform). Cluster compression
// keeps the dimension but replaces keys with renormalized centroids whose
// values average the member rows (per-class: exactly the one-hot class).
Cache compress_cache(const Cache& c, const CompressionMethod& method);

}  // namespace epicache
