#include <epicache/dataset.hpp>

#include <epicache/io.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <bit>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace epicache {

namespace {

constexpr int kNumShapes = 10;
// Signal amplitudes sit just above the pixel noise floor so that trained
// models keep small input-space margins; with high-contrast classes a
// bounded perturbation cannot cross a decision boundary and the benchmark
// loses its point. Calibrated once against the stock training config.
constexpr double kTextureAmp = 0.02;
constexpr double kPixelNoise = 0.05;
constexpr double kMaskBase = 0.62;
constexpr double kDcAmp = 0.06;
constexpr double kMaskContrast = 0.035;
constexpr double kCheckerAmp = 0.030;
constexpr double kHardFrac = 0.35;

// Equal-area block masks drawn from Hadamard-code rows over a 4x4 cell grid:
// every mask covers half the cells and any two masks differ on exactly half
// of them, so the mask channel contributes the same distance to every class
// pair instead of spreading pairs over a range of separations.
bool in_shape(int shape, Index w, Index row, Index col) {
  const unsigned cr = static_cast<unsigned>(row * 4 / w);
  const unsigned cc = static_cast<unsigned>(col * 4 / w);
  const unsigned cell = cr * 4U + cc;
  const unsigned code = static_cast<unsigned>(shape) + 1U;
  return (std::popcount(cell & code) & 1U) == 0U;
}

struct TextureParams {
  double freq;
  double angle;
  double phase;
};

TextureParams class_texture(Index cls) {
  // One shared carrier frequency, orientations evenly spaced over a half
  // turn: every class pair differs by at least one decorrelation angle, so
  // pairwise prototype distances stay nearly uniform instead of spreading
  // out along a frequency ladder.
  const double c = static_cast<double>(cls);
  return {6.0, c * std::numbers::pi / 10.0, 1.3 * c};
}

double texture_at(const TextureParams& t, Index w, Index row, Index col) {
  const double u = static_cast<double>(col);
  const double v = static_cast<double>(row);
  const double proj = u * std::cos(t.angle) + v * std::sin(t.angle);
  return std::sin(2.0 * std::numbers::pi * t.freq * proj /
                      static_cast<double>(w) +
                  t.phase);
}

// Shape-mask indicator pattern (1 on in-mask cells), without base or gain.
Vector mask_pattern(Index cls, Index w) {
  const int shape = static_cast<int>(cls % kNumShapes);
  Vector out(w * w);
  for (Index r = 0; r < w; ++r)
    for (Index c = 0; c < w; ++c)
      out(r * w + c) = in_shape(shape, w, r, c) ? 1.0 : 0.0;
  return out;
}

// Per-class shift of the global mean intensity, ramped linearly across
// classes. Spatial averaging (blur, pixelation) preserves it exactly, so it
// stays informative at severities where every localized cue has been mixed
// away.
double dc_offset(Index cls, Index num_classes) {
  if (num_classes < 2) return 0.0;
  const double t = static_cast<double>(cls) /
                   static_cast<double>(num_classes - 1);
  return kDcAmp * (2.0 * t - 1.0);
}

// Base intensity plus shape mask, before any texture term.
Vector mask_term(Index cls, Index w) {
  return Vector::Constant(w * w, kMaskBase) + kMaskContrast * mask_pattern(cls, w);
}

Vector texture_term(const TextureParams& t, Index w) {
  Vector out(w * w);
  for (Index r = 0; r < w; ++r)
    for (Index c = 0; c < w; ++c) out(r * w + c) = texture_at(t, w, r, c);
  return out;
}

// The class code again, but modulated onto a pixel-level checkerboard: the
// highest-SNR cue in the image, and the first casualty of any blur or
// downsampling. Its pairwise distances inherit the Hadamard uniformity.
Vector checker_term(Index cls, Index w) {
  const int shape = static_cast<int>(cls % kNumShapes);
  Vector out(w * w);
  for (Index r = 0; r < w; ++r)
    for (Index c = 0; c < w; ++c) {
      const double carrier = ((r + c) & 1) == 0 ? 1.0 : -1.0;
      out(r * w + c) = carrier * (in_shape(shape, w, r, c) ? 1.0 : -1.0);
    }
  return out;
}

struct SplitCounts {
  Index train = 0;
  Index val = 0;
  Index test = 0;
};

// Largest-remainder apportioning of per_class samples across the three
// splits, so the counts always sum exactly to per_class.
SplitCounts split_counts(Index per_class, const SplitFractions& f) {
  const std::array<double, 3> frac = {f.train, f.val, f.test};
  for (double v : frac)
    if (v < 0.0) throw ParamError("split fractions must be nonnegative");
  const double total = frac[0] + frac[1] + frac[2];
  if (std::abs(total - 1.0) > 1e-9)
    throw ParamError("split fractions must sum to 1 (got " +
                     std::to_string(total) + ")");

  std::array<Index, 3> counts{};
  std::array<double, 3> rem{};
  Index assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = frac[static_cast<std::size_t>(i)] *
                         static_cast<double>(per_class);
    counts[static_cast<std::size_t>(i)] = static_cast<Index>(std::floor(exact));
    rem[static_cast<std::size_t>(i)] =
        exact - std::floor(exact);
    assigned += counts[static_cast<std::size_t>(i)];
  }
  std::array<int, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return rem[static_cast<std::size_t>(a)] >
                                              rem[static_cast<std::size_t>(b)]; });
  for (int i = 0; assigned < per_class; ++i, ++assigned)
    counts[static_cast<std::size_t>(order[static_cast<std::size_t>(i % 3)])]++;
  return {counts[0], counts[1], counts[2]};
}

}  // namespace

void Dataset::validate() const {
  if (images.rows() != labels.size())
    throw ShapeError("dataset has " + std::to_string(images.rows()) +
                     " images but " + std::to_string(labels.size()) +
                     " labels");
  if (width < 1 || num_classes < 1)
    throw ParamError("dataset width and class count must be positive");
  if (images.cols() != width * width)
    throw ShapeError("image row length " + std::to_string(images.cols()) +
                     " does not match width " + std::to_string(width));
  for (Index i = 0; i < labels.size(); ++i)
    if (labels(i) < 0 || labels(i) >= num_classes)
      throw ParamError("label out of range at row " + std::to_string(i));
  if (images.size() > 0 &&
      (images.minCoeff() < 0.0 || images.maxCoeff() > 1.0))
    throw ParamError("image pixels must lie in [0,1]");
}

Matrix class_prototypes(const DataConfig& cfg) {
  const Index n = cfg.width * cfg.width;
  Matrix protos(cfg.num_classes, n);
  for (Index c = 0; c < cfg.num_classes; ++c) {
    const Vector base = mask_term(c, cfg.width);
    const Vector tex = texture_term(class_texture(c), cfg.width);
    const Vector hf = checker_term(c, cfg.width);
    protos.row(c) = (base + kTextureAmp * tex + kCheckerAmp * hf).transpose();
    protos.row(c).array() += dc_offset(c, cfg.num_classes);
  }
  return protos;
}

DataSplits generate_dataset(const DataConfig& cfg, unsigned workers) {
  if (cfg.num_classes < 1 || cfg.width < 1 || cfg.per_class < 1)
    throw ParamError("data config requires positive classes, width, per_class");

  const SplitCounts counts = split_counts(cfg.per_class, cfg.split);

  // Pairwise prototype separation scales with the image side: every cue
  // amplitude is per-pixel, so l2 distances grow linearly in width.
  const double min_dist = 0.035 * static_cast<double>(cfg.width);
  const Matrix protos = class_prototypes(cfg);
  for (Index a = 0; a < cfg.num_classes; ++a)
    for (Index b = a + 1; b < cfg.num_classes; ++b) {
      const double dist = (protos.row(a) - protos.row(b)).norm();
      if (dist <= min_dist)
        throw NumericError("class prototypes " + std::to_string(a) + " and " +
                           std::to_string(b) + " are too close (l2 " +
                           std::to_string(dist) + " <= " +
                           std::to_string(min_dist) + ")");
    }

  const Index n = cfg.width * cfg.width;
  auto make = [&](Index per_class_count) {
    Dataset d;
    d.images.resize(per_class_count * cfg.num_classes, n);
    d.labels.resize(per_class_count * cfg.num_classes);
    d.width = cfg.width;
    d.num_classes = cfg.num_classes;
    return d;
  };
  DataSplits splits{make(counts.train), make(counts.val), make(counts.test)};

  // Per-class mask terms are shared; texture is recomputed per sample with
  // jittered phase/frequency/orientation.
  std::vector<Vector> mask_pats;
  std::vector<Vector> checkers;
  mask_pats.reserve(static_cast<std::size_t>(cfg.num_classes));
  checkers.reserve(static_cast<std::size_t>(cfg.num_classes));
  for (Index c = 0; c < cfg.num_classes; ++c) {
    mask_pats.push_back(mask_pattern(c, cfg.width));
    checkers.push_back(checker_term(c, cfg.width));
  }

  const Index total = cfg.num_classes * cfg.per_class;
  parallel_for(
      total,
      [&](Index g) {
        const Index cls = g / cfg.per_class;
        const Index j = g % cfg.per_class;
        std::mt19937_64 rng(mix_seed({cfg.seed, seed_stream::sample,
                                      static_cast<std::uint64_t>(g)}));
        // Two jitter regimes: most samples sit close to their class
        // prototype, a minority explores the full texture-phase manifold
        // with the checkerboard cue mostly erased. The mixture keeps the
        // task mostly easy while the hard sub-population spreads the
        // feature clusters and keeps validation accuracy off its ceiling.
        const bool hard = std::bernoulli_distribution(kHardFrac)(rng);
        std::uniform_real_distribution<double> uphase(
            hard ? -std::numbers::pi : -0.5, hard ? std::numbers::pi : 0.5);
        std::uniform_real_distribution<double> ufreq(hard ? 0.90 : 0.97,
                                                     hard ? 1.10 : 1.03);
        std::uniform_real_distribution<double> uangle(hard ? -0.12 : -0.03,
                                                      hard ? 0.12 : 0.03);
        TextureParams t = class_texture(cls);
        t.phase += uphase(rng);
        t.freq *= ufreq(rng);
        t.angle += uangle(rng);
        const double hf_scale =
            hard ? std::uniform_real_distribution<double>(0.0, 0.4)(rng) : 1.0;

        std::normal_distribution<double> noise(0.0, kPixelNoise);
        Vector img = Vector::Constant(
                         n, kMaskBase + dc_offset(cls, cfg.num_classes)) +
                     kMaskContrast * mask_pats[static_cast<std::size_t>(cls)] +
                     kTextureAmp * texture_term(t, cfg.width) +
                     kCheckerAmp * hf_scale *
                         checkers[static_cast<std::size_t>(cls)];
        for (Index p = 0; p < n; ++p)
          img(p) = std::clamp(img(p) + noise(rng), 0.0, 1.0);

        Dataset* dst = nullptr;
        Index row = 0;
        if (j < counts.train) {
          dst = &splits.train;
          row = cls * counts.train + j;
        } else if (j < counts.train + counts.val) {
          dst = &splits.val;
          row = cls * counts.val + (j - counts.train);
        } else {
          dst = &splits.test;
          row = cls * counts.test + (j - counts.train - counts.val);
        }
        dst->images.row(row) = img.transpose();
        dst->labels(row) = static_cast<int>(cls);
      },
      workers);

  splits.train.validate();
  splits.val.validate();
  splits.test.validate();
  return splits;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  data.validate();
  BinaryWriter w;
  w.magic("EPDS");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(data.size()));
  w.u32(static_cast<std::uint32_t>(data.width));
  w.u32(static_cast<std::uint32_t>(data.num_classes));
  w.i32_vector(data.labels);
  w.f32_matrix(data.images);
  w.save(path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  BinaryReader r = BinaryReader::from_file(path);
  r.expect_magic("EPDS", "dataset");
  r.expect_version(1, "dataset");
  const Index n = static_cast<Index>(r.u32());
  Dataset d;
  d.width = static_cast<Index>(r.u32());
  d.num_classes = static_cast<Index>(r.u32());
  d.labels = r.i32_vector(n);
  d.images = r.f32_matrix(n, d.width * d.width);
  d.validate();
  return d;
}

}  // namespace epicache
