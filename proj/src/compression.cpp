#include <epicache/compression.hpp>

#include <epicache/pca.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace epicache {

namespace {

Index nearest_centroid(const Matrix& centroids, const Eigen::RowVectorXd& row) {
  Index best = 0;
  double best_d2 = (centroids.row(0) - row).squaredNorm();
  for (Index k = 1; k < centroids.rows(); ++k) {
    const double d2 = (centroids.row(k) - row).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = k;
    }
  }
  return best;
}

}  // namespace

KMeansResult minibatch_kmeans(const Matrix& rows, const KMeansConfig& cfg) {
  const Index n = rows.rows();
  const Index d = rows.cols();
  if (n < 1 || d < 1) throw ParamError("k-means needs a nonempty row matrix");
  if (cfg.n_clusters < 1 || cfg.n_clusters > n)
    throw ParamError("k-means cluster count " + std::to_string(cfg.n_clusters) +
                     " must lie in [1, " + std::to_string(n) + "]");
  if (cfg.batch_size < 1) throw ParamError("k-means batch size must be positive");
  if (cfg.iterations < 0) throw ParamError("k-means iterations must be >= 0");
  if (!rows.allFinite()) throw NumericError("k-means input has non-finite values");

  std::mt19937_64 rng(mix_seed({cfg.seed, seed_stream::kmeans}));
  const Index kc = cfg.n_clusters;
  Matrix centroids(kc, d);
  std::vector<char> chosen(static_cast<std::size_t>(n), 0);

  // k-means++ seeding: first pick uniform, the rest d^2-weighted. A fully
  // collapsed weight vector falls back to the first unchosen row.
  std::uniform_int_distribution<Index> first(0, n - 1);
  Index pick = first(rng);
  centroids.row(0) = rows.row(pick);
  chosen[static_cast<std::size_t>(pick)] = 1;
  Vector d2(n);
  for (Index i = 0; i < n; ++i)
    d2(i) = (rows.row(i) - centroids.row(0)).squaredNorm();

  for (Index k = 1; k < kc; ++k) {
    const double total = d2.sum();
    pick = -1;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      const double cut = u(rng);
      double acc = 0.0;
      for (Index i = 0; i < n; ++i) {
        acc += d2(i);
        if (acc >= cut && d2(i) > 0.0) {
          pick = i;
          break;
        }
      }
      if (pick < 0) {  // floating-point tail: take the last positive weight
        for (Index i = n - 1; i >= 0; --i)
          if (d2(i) > 0.0) {
            pick = i;
            break;
          }
      }
    }
    if (pick < 0) {
      for (Index i = 0; i < n; ++i)
        if (!chosen[static_cast<std::size_t>(i)]) {
          pick = i;
          break;
        }
    }
    centroids.row(k) = rows.row(pick);
    chosen[static_cast<std::size_t>(pick)] = 1;
    for (Index i = 0; i < n; ++i)
      d2(i) = std::min(d2(i), (rows.row(i) - centroids.row(k)).squaredNorm());
  }

  // Mini-batch passes: assignments are frozen per batch, then centroids
  // take 1/count steps toward their members.
  std::vector<Index> counts(static_cast<std::size_t>(kc), 0);
  std::uniform_int_distribution<Index> pick_row(0, n - 1);
  std::vector<Index> batch_idx(static_cast<std::size_t>(cfg.batch_size));
  std::vector<Index> batch_assign(static_cast<std::size_t>(cfg.batch_size));
  for (Index it = 0; it < cfg.iterations; ++it) {
    for (auto& b : batch_idx) b = pick_row(rng);
    for (std::size_t j = 0; j < batch_idx.size(); ++j)
      batch_assign[j] = nearest_centroid(centroids, rows.row(batch_idx[j]));
    for (std::size_t j = 0; j < batch_idx.size(); ++j) {
      const Index a = batch_assign[j];
      counts[static_cast<std::size_t>(a)]++;
      const double eta = 1.0 / static_cast<double>(counts[static_cast<std::size_t>(a)]);
      centroids.row(a) += eta * (rows.row(batch_idx[j]) - centroids.row(a));
    }
  }

  auto full_assign = [&](IntVector& assignment) {
    assignment.resize(n);
    for (Index i = 0; i < n; ++i)
      assignment(i) = static_cast<int>(nearest_centroid(centroids, rows.row(i)));
  };

  IntVector assignment;
  full_assign(assignment);

  std::vector<Index> members(static_cast<std::size_t>(kc), 0);
  for (Index i = 0; i < n; ++i) members[static_cast<std::size_t>(assignment(i))]++;
  const bool any_empty =
      std::any_of(members.begin(), members.end(), [](Index m) { return m == 0; });
  if (any_empty) {
    // One repair round: each empty cluster reseeds from the farthest point
    // not already consumed by this round.
    std::vector<char> used(static_cast<std::size_t>(n), 0);
    Vector dist2(n);
    for (Index i = 0; i < n; ++i)
      dist2(i) = (rows.row(i) - centroids.row(assignment(i))).squaredNorm();
    for (Index k = 0; k < kc; ++k) {
      if (members[static_cast<std::size_t>(k)] > 0) continue;
      Index far = -1;
      for (Index i = 0; i < n; ++i) {
        if (used[static_cast<std::size_t>(i)]) continue;
        if (far < 0 || dist2(i) > dist2(far)) far = i;
      }
      if (far < 0)
        throw NumericError("cluster " + std::to_string(k) +
                           " cannot be reseeded: no points left");
      centroids.row(k) = rows.row(far);
      used[static_cast<std::size_t>(far)] = 1;
    }
    full_assign(assignment);
    std::fill(members.begin(), members.end(), 0);
    for (Index i = 0; i < n; ++i)
      members[static_cast<std::size_t>(assignment(i))]++;
    for (Index k = 0; k < kc; ++k)
      if (members[static_cast<std::size_t>(k)] == 0)
        throw NumericError("cluster " + std::to_string(k) +
                           " is still empty after farthest-point reseeding");
  }

  return {std::move(centroids), std::move(assignment)};
}

namespace {

Matrix renormalized_rows(const Matrix& rows) {
  Matrix out = rows;
  for (Index k = 0; k < out.rows(); ++k) {
    const double norm = out.row(k).norm();
    if (norm < 1e-12)
      throw NumericError("centroid " + std::to_string(k) +
                         " has zero norm and cannot be a cache key");
    out.row(k) /= norm;
  }
  return out;
}

// Largest-remainder split of the cluster budget across the classes present
// in the cache, at least one cluster each, never more than a class's
// population.
std::vector<Index> class_budgets(const std::vector<Index>& counts,
                                 Index total_budget) {
  const auto n_cls = static_cast<Index>(counts.size());
  Index total_rows = 0;
  Index present = 0;
  for (Index c = 0; c < n_cls; ++c) {
    total_rows += counts[static_cast<std::size_t>(c)];
    if (counts[static_cast<std::size_t>(c)] > 0) ++present;
  }
  if (total_budget < present)
    throw ParamError("cluster budget " + std::to_string(total_budget) +
                     " is smaller than the number of populated classes (" +
                     std::to_string(present) + ")");

  std::vector<Index> budget(static_cast<std::size_t>(n_cls), 0);
  std::vector<std::pair<double, Index>> rema;
  Index assigned = 0;
  for (Index c = 0; c < n_cls; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) continue;
    const double exact = static_cast<double>(total_budget) *
                         static_cast<double>(counts[static_cast<std::size_t>(c)]) /
                         static_cast<double>(total_rows);
    budget[static_cast<std::size_t>(c)] = static_cast<Index>(std::floor(exact));
    assigned += budget[static_cast<std::size_t>(c)];
    rema.emplace_back(exact - std::floor(exact), c);
  }
  std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (std::size_t i = 0; assigned < total_budget; ++assigned, ++i)
    budget[static_cast<std::size_t>(rema[i % rema.size()].second)]++;

  // Clamp into [1, count] while keeping the total fixed.
  auto donate = [&](Index needed) {
    while (needed > 0) {
      Index donor = -1;
      for (Index c = 0; c < n_cls; ++c)
        if (budget[static_cast<std::size_t>(c)] > 1 &&
            (donor < 0 || budget[static_cast<std::size_t>(c)] >
                              budget[static_cast<std::size_t>(donor)]))
          donor = c;
      if (donor < 0)
        throw ParamError("cluster budget cannot cover every populated class");
      budget[static_cast<std::size_t>(donor)]--;
      --needed;
    }
  };
  Index pool = 0;
  for (Index c = 0; c < n_cls; ++c) {
    if (budget[static_cast<std::size_t>(c)] > counts[static_cast<std::size_t>(c)]) {
      pool += budget[static_cast<std::size_t>(c)] - counts[static_cast<std::size_t>(c)];
      budget[static_cast<std::size_t>(c)] = counts[static_cast<std::size_t>(c)];
    }
  }
  for (Index c = 0; c < n_cls; ++c) {
    if (counts[static_cast<std::size_t>(c)] > 0 &&
        budget[static_cast<std::size_t>(c)] == 0) {
      if (pool > 0)
        --pool;
      else
        donate(1);
      budget[static_cast<std::size_t>(c)] = 1;
    }
  }
  while (pool > 0) {
    Index taker = -1;
    double best_ratio = -1.0;
    for (Index c = 0; c < n_cls; ++c) {
      if (budget[static_cast<std::size_t>(c)] >=
          counts[static_cast<std::size_t>(c)])
        continue;
      const double ratio = static_cast<double>(counts[static_cast<std::size_t>(c)]) /
                           static_cast<double>(budget[static_cast<std::size_t>(c)]);
      if (ratio > best_ratio) {
        best_ratio = ratio;
        taker = c;
      }
    }
    if (taker < 0)
      throw ParamError("cluster budget exceeds the cache population");
    budget[static_cast<std::size_t>(taker)]++;
    --pool;
  }
  return budget;
}

Cache cluster_compress(const Cache& c, const ClusterCompression& method) {
  const KMeansConfig& base = method.kmeans;
  if (base.n_clusters < 1 || base.n_clusters > c.size())
    throw ParamError("cluster budget must lie in [1, cache size]");

  Cache out;
  out.theta = c.theta;
  out.layer = c.layer;
  out.key_transform = c.key_transform;

  if (method.per_class) {
    // Row class = value-row argmax; compressed rows are exact one-hots.
    std::vector<Index> row_class(static_cast<std::size_t>(c.size()));
    std::vector<Index> counts(static_cast<std::size_t>(c.num_classes()), 0);
    for (Index k = 0; k < c.size(); ++k) {
      const Index cls = argmax(c.values.row(k).transpose());
      row_class[static_cast<std::size_t>(k)] = cls;
      counts[static_cast<std::size_t>(cls)]++;
    }
    const std::vector<Index> budget = class_budgets(counts, base.n_clusters);

    out.keys.resize(base.n_clusters, c.dim());
    out.values.setZero(base.n_clusters, c.num_classes());
    Index row = 0;
    for (Index cls = 0; cls < c.num_classes(); ++cls) {
      const Index b = budget[static_cast<std::size_t>(cls)];
      if (b == 0) continue;
      Matrix members(counts[static_cast<std::size_t>(cls)], c.dim());
      Index mi = 0;
      for (Index k = 0; k < c.size(); ++k)
        if (row_class[static_cast<std::size_t>(k)] == cls)
          members.row(mi++) = c.keys.row(k);
      KMeansConfig kcfg = base;
      kcfg.n_clusters = b;
      kcfg.seed = mix_seed({base.seed, static_cast<std::uint64_t>(cls)});
      const KMeansResult res = minibatch_kmeans(members, kcfg);
      out.keys.middleRows(row, b) = renormalized_rows(res.centroids);
      for (Index j = 0; j < b; ++j) out.values(row + j, cls) = 1.0;
      row += b;
    }
  } else {
    const KMeansResult res = minibatch_kmeans(c.keys, base);
    out.keys = renormalized_rows(res.centroids);
    out.values.setZero(base.n_clusters, c.num_classes());
    IntVector members = IntVector::Zero(base.n_clusters);
    for (Index k = 0; k < c.size(); ++k) {
      out.values.row(res.assignment(k)) += c.values.row(k);
      members(res.assignment(k))++;
    }
    for (Index j = 0; j < base.n_clusters; ++j)
      out.values.row(j) /= static_cast<double>(members(j));
  }

  out.validate();
  return out;
}

}  // namespace

Cache compress_cache(const Cache& c, const CompressionMethod& method) {
  c.validate();
  if (std::holds_alternative<PcaCompression>(method)) {
    const auto& pca = std::get<PcaCompression>(method);
    if (c.key_transform)
      throw ParamError(
          "cache keys already live in a PCA subspace; refusing to stack "
          "projections");
    const PcaTransform t = fit_pca(c.keys, pca.out_dim, pca.batch_size);
    Cache out;
    out.theta = c.theta;
    out.layer = c.layer;
    out.key_transform = t;
    out.values = c.values;
    out.keys.resize(c.size(), pca.out_dim);
    for (Index k = 0; k < c.size(); ++k)
      out.keys.row(k) = apply_pca(t, c.keys.row(k).transpose()).transpose();
    out.validate();
    return out;
  }
  return cluster_compress(c, std::get<ClusterCompression>(method));
}

}  // namespace epicache
