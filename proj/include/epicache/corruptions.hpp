#pragma once

#include <epicache/common.hpp>
#include <epicache/dataset.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace epicache {

enum class CorruptionCategory : std::uint8_t {
  Noise = 0,
  Blur = 1,
  Weather = 2,
  Digital = 3,
};

std::string category_name(CorruptionCategory c);

// One corruption kernel plus its five-severity parameter schedule.
// Severity must grow strictly in intensity from index 0 to 4.
struct Corruption {
  std::string name;
  CorruptionCategory category = CorruptionCategory::Noise;
  std::array<double, 5> params{};
};

struct CorruptionSuite {
  std::vector<Corruption> corruptions;
  std::uint64_t seed = 0;

  void validate() const;
  const Corruption& find(std::string_view name) const;

  // The stock 8-corruption suite, two kernels per category.
  static CorruptionSuite defaults(std::uint64_t seed);

  // Versioned plain-text schedule file.
  void save(const std::filesystem::path& path) const;
  static CorruptionSuite load(const std::filesystem::path& path);
};

// Kernels. All return images clipped to [0,1]; seeds matter only for the
// stochastic ones (noise). Severity parameters are the schedule entries.
Vector corrupt_gaussian_noise(const Vector& img, double sigma, std::uint64_t seed);
Vector corrupt_impulse_noise(const Vector& img, double fraction, std::uint64_t seed);
Vector corrupt_box_blur(const Vector& img, Index width, int radius);
Vector corrupt_motion_blur_horizontal(const Vector& img, Index width, int length);
Vector corrupt_brightness_shift(const Vector& img, double delta);
Vector corrupt_contrast_scale(const Vector& img, double scale);
Vector corrupt_pixelate(const Vector& img, Index width, int block);
Vector corrupt_quantize(const Vector& img, int levels);

// Dispatch by corruption name at a 1-based severity.
Vector apply_corruption(const CorruptionSuite& suite, const Vector& img,
                        Index width, std::string_view name, int severity,
                        std::uint64_t seed);

// CE for one corruption: mean error over severities divided by the
// reference mean. Errors live in [0,1]; zero reference mean is an error.
double compute_ce(const Vector& model_errors, const Vector& reference_errors);

struct RobustnessReport {
  std::vector<std::string> corruption_names;
  std::vector<CorruptionCategory> categories;
  Matrix model_errors;      // corruptions x 5 severities
  Matrix reference_errors;  // corruptions x 5 severities
  std::vector<double> ce;   // per corruption
  double mce = 0.0;
  // Mean normalized max-pixel distance introduced at severity 1, as a
  // sanity stat on schedule strength.
  double severity1_mean_linf = 0.0;

  void write_csv(const std::filesystem::path& path) const;
  void write_json(const std::filesystem::path& path) const;
};

using ClassifierFn = std::function<Vector(const Vector&)>;

// Runs model and reference over every (corruption, severity) pair of the
// suite on `data`, recording top-1 error rates. Corruption draws are
// deterministic per (suite seed, corruption, severity, sample).
RobustnessReport evaluate_corruption_robustness(const ClassifierFn& model,
                                                const ClassifierFn& reference,
                                                const CorruptionSuite& suite,
                                                const Dataset& data,
                                                unsigned workers = 0);

}  // namespace epicache
