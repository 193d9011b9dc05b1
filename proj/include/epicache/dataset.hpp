#pragma once

#include <epicache/common.hpp>

#include <cstdint>
#include <filesystem>

namespace epicache {

// Labeled image set. Images are flattened W*W grayscale rows in [0,1].
struct Dataset {
  Matrix images;     // N x (width*width), one image per row
  IntVector labels;  // N, values in [0, num_classes)
  Index width = 0;
  Index num_classes = 0;

  Index size() const { return images.rows(); }
  Index pixels() const { return images.cols(); }
  void validate() const;
};

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct DataConfig {
  Index num_classes = 10;
  Index width = 16;
  Index per_class = 700;  // samples per class before splitting
  SplitFractions split;
  std::uint64_t seed = 0;
};

struct DataSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

// Class prototypes: a coarse 4x4 shape mask (class-coded cell pattern), an
// oriented sinusoid texture, a pixel-level checkerboard carrying the class
// code at high frequency, and a per-class global mean shift. Rows are
// unclipped reference images; generation rejects prototypes closer than an
// l2 floor that scales with the image side.
Matrix class_prototypes(const DataConfig& cfg);

// Samples add per-sample texture jitter and N(0, 0.05) pixel noise to the
// prototype, clipped back to [0,1]; a fraction of samples also attenuate
// the checkerboard cue. Deterministic per (seed, sample index).
DataSplits generate_dataset(const DataConfig& cfg, unsigned workers = 0);

void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace epicache
