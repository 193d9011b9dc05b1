#include <epicache/pca.hpp>

#include <Eigen/SVD>

#include <cmath>
#include <string>

namespace epicache {

void PcaTransform::validate() const {
  if (out_dim() < 1 || input_dim() < 1)
    throw ShapeError("PCA transform has empty shape");
  if (out_dim() > input_dim())
    throw ShapeError("PCA cannot expand dimensionality");
  if (mean.size() != input_dim())
    throw ShapeError("PCA mean length does not match component width");
  if (!mean.allFinite() || !components.allFinite())
    throw NumericError("PCA transform contains non-finite values");
  const Matrix gram = components * components.transpose();
  const double err =
      (gram - Matrix::Identity(out_dim(), out_dim())).cwiseAbs().maxCoeff();
  if (err > 1e-6)
    throw NumericError("PCA components are not orthonormal (max deviation " +
                       std::to_string(err) + ")");
}

namespace {

// Largest-magnitude entry of each component made positive, so the SVD's
// arbitrary sign choice cannot leak into downstream artifacts.
void fix_signs(Matrix& components) {
  for (Index r = 0; r < components.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < components.cols(); ++c)
      if (std::abs(components(r, c)) > std::abs(components(r, best))) best = c;
    if (components(r, best) < 0.0) components.row(r) *= -1.0;
  }
}

}  // namespace

PcaTransform fit_pca(const Matrix& rows, Index out_dim, Index batch_size) {
  const Index n = rows.rows();
  const Index d = rows.cols();
  if (out_dim < 1) throw ParamError("PCA output dimension must be positive");
  if (out_dim > d)
    throw ParamError("PCA output dimension " + std::to_string(out_dim) +
                     " exceeds input dimension " + std::to_string(d));
  if (n <= out_dim)
    throw ParamError("PCA needs more than out_dim rows (" +
                     std::to_string(n) + " <= " + std::to_string(out_dim) + ")");
  if (batch_size < 1) throw ParamError("PCA batch size must be positive");
  if (n > batch_size && batch_size <= out_dim)
    throw ParamError("mini-batch PCA needs batch size > output dimension");
  if (!rows.allFinite()) throw NumericError("PCA input has non-finite values");

  Vector mean = Vector::Zero(d);
  Vector sing;
  Matrix comps;
  Index seen = 0;

  for (Index start = 0; start < n; start += batch_size) {
    const Index b = std::min<Index>(batch_size, n - start);
    const Matrix batch = rows.middleRows(start, b);
    const Vector bmean = batch.colwise().mean().transpose();
    const Matrix centered = batch.rowwise() - bmean.transpose();

    Matrix stack;
    if (seen == 0) {
      stack = centered;
    } else {
      // Merge the running model with the new batch: scaled old components,
      // the centered batch, and a mean-shift correction row.
      const double corr = std::sqrt(static_cast<double>(seen) *
                                    static_cast<double>(b) /
                                    static_cast<double>(seen + b));
      stack.resize(out_dim + b + 1, d);
      stack.topRows(out_dim) = sing.asDiagonal() * comps;
      stack.middleRows(out_dim, b) = centered;
      stack.row(out_dim + b) = corr * (mean - bmean).transpose();
    }

    Eigen::BDCSVD<Matrix> svd(stack, Eigen::ComputeThinV);
    const Matrix v = svd.matrixV();  // d x rank, columns by descending sigma
    comps = v.leftCols(out_dim).transpose();
    sing = svd.singularValues().head(out_dim);

    mean = (static_cast<double>(seen) * mean + static_cast<double>(b) * bmean) /
           static_cast<double>(seen + b);
    seen += b;
  }

  fix_signs(comps);
  PcaTransform t{mean, comps};
  t.validate();
  return t;
}

Vector pca_project(const PcaTransform& t, const Vector& v) {
  if (v.size() != t.input_dim())
    throw ShapeError("PCA input of size " + std::to_string(v.size()) +
                     " does not match transform dimension " +
                     std::to_string(t.input_dim()));
  return t.components * (v - t.mean);
}

Vector apply_pca(const PcaTransform& t, const Vector& v) {
  const Vector p = pca_project(t, v);
  const double norm = p.norm();
  if (norm < 1e-12)
    throw NumericError(
        "degenerate query: PCA projection has near-zero norm, no unit "
        "direction exists");
  return p / norm;
}

void serialize_pca(BinaryWriter& w, const PcaTransform& t) {
  w.u32(static_cast<std::uint32_t>(t.input_dim()));
  w.u32(static_cast<std::uint32_t>(t.out_dim()));
  w.f64_vector(t.mean);
  w.f64_matrix(t.components);
}

PcaTransform deserialize_pca(BinaryReader& r) {
  const Index d = static_cast<Index>(r.u32());
  const Index out = static_cast<Index>(r.u32());
  PcaTransform t;
  t.mean = r.f64_vector(d);
  t.components = r.f64_matrix(out, d);
  t.validate();
  return t;
}

}  // namespace epicache
