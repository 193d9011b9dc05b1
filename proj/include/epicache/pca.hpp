#pragma once

#include <epicache/common.hpp>
#include <epicache/io.hpp>

namespace epicache {

// Affine projection learned by incremental PCA. Component rows are
// orthonormal; signs are fixed so each row's largest-magnitude entry is
// positive.
struct PcaTransform {
  Vector mean;        // input dim
  Matrix components;  // out_dim x input dim

  Index input_dim() const { return components.cols(); }
  Index out_dim() const { return components.rows(); }
  void validate() const;
};

// Mini-batch PCA over `rows` (samples x dim). Batches are consumed in row
// order; each step merges the batch into the running SVD-based model, so
// memory stays O(batch + out_dim * dim). Requires rows.rows() > out_dim.
PcaTransform fit_pca(const Matrix& rows, Index out_dim, Index batch_size = 256);

// Centered projection, no normalization.
Vector pca_project(const PcaTransform& t, const Vector& v);

// Projection followed by l2 normalization; a near-zero projection (norm
// below 1e-12) is a degenerate query and throws NumericError.
Vector apply_pca(const PcaTransform& t, const Vector& v);

void serialize_pca(BinaryWriter& w, const PcaTransform& t);
PcaTransform deserialize_pca(BinaryReader& r);

}  // namespace epicache
