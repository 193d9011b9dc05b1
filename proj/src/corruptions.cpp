#include <epicache/corruptions.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace epicache {

namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct KernelInfo {
  CorruptionCategory category;
  bool intensity_grows_with_param;
};

// Canonical category and schedule direction per kernel. contrast_scale and
// quantize get *stronger* as their parameter shrinks.
const std::map<std::string, KernelInfo, std::less<>>& kernel_registry() {
  static const std::map<std::string, KernelInfo, std::less<>> reg = {
      {"gaussian_noise", {CorruptionCategory::Noise, true}},
      {"impulse_noise", {CorruptionCategory::Noise, true}},
      {"box_blur", {CorruptionCategory::Blur, true}},
      {"motion_blur_horizontal", {CorruptionCategory::Blur, true}},
      {"brightness_shift", {CorruptionCategory::Weather, true}},
      {"contrast_scale", {CorruptionCategory::Weather, false}},
      {"pixelate", {CorruptionCategory::Digital, true}},
      {"quantize", {CorruptionCategory::Digital, false}},
  };
  return reg;
}

CorruptionCategory category_from_name(const std::string& s) {
  if (s == "noise") return CorruptionCategory::Noise;
  if (s == "blur") return CorruptionCategory::Blur;
  if (s == "weather") return CorruptionCategory::Weather;
  if (s == "digital") return CorruptionCategory::Digital;
  throw FormatError("unknown corruption category '" + s + "'");
}

void check_square(const Vector& img, Index width) {
  if (width < 1 || img.size() != width * width)
    throw ShapeError("image of " + std::to_string(img.size()) +
                     " pixels is not " + std::to_string(width) + "x" +
                     std::to_string(width));
}

}  // namespace

std::string category_name(CorruptionCategory c) {
  switch (c) {
    case CorruptionCategory::Noise: return "noise";
    case CorruptionCategory::Blur: return "blur";
    case CorruptionCategory::Weather: return "weather";
    default: return "digital";
  }
}

Vector corrupt_gaussian_noise(const Vector& img, double sigma,
                              std::uint64_t seed) {
  if (sigma < 0.0) throw ParamError("gaussian_noise sigma must be >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Vector out(img.size());
  for (Index i = 0; i < img.size(); ++i) out(i) = clamp01(img(i) + sigma * n(rng));
  return out;
}

Vector corrupt_impulse_noise(const Vector& img, double fraction,
                             std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0)
    throw ParamError("impulse_noise fraction must lie in [0,1]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vector out(img.size());
  for (Index i = 0; i < img.size(); ++i) {
    const double hit = u(rng);
    const double polarity = u(rng);  // always drawn: fixed stream layout
    out(i) = hit < fraction ? (polarity < 0.5 ? 0.0 : 1.0) : img(i);
  }
  return out;
}

Vector corrupt_box_blur(const Vector& img, Index width, int radius) {
  check_square(img, width);
  if (radius < 0) throw ParamError("box_blur radius must be >= 0");
  if (radius == 0) return img;
  Vector out(img.size());
  for (Index r = 0; r < width; ++r)
    for (Index c = 0; c < width; ++c) {
      double sum = 0.0;
      int count = 0;
      for (Index rr = std::max<Index>(0, r - radius);
           rr <= std::min<Index>(width - 1, r + radius); ++rr)
        for (Index cc = std::max<Index>(0, c - radius);
             cc <= std::min<Index>(width - 1, c + radius); ++cc) {
          sum += img(rr * width + cc);
          ++count;
        }
      out(r * width + c) = sum / count;
    }
  return out;
}

Vector corrupt_motion_blur_horizontal(const Vector& img, Index width,
                                      int length) {
  check_square(img, width);
  if (length < 1) throw ParamError("motion blur length must be >= 1");
  if (length == 1) return img;
  const Index half = (length - 1) / 2;
  Vector out(img.size());
  for (Index r = 0; r < width; ++r)
    for (Index c = 0; c < width; ++c) {
      double sum = 0.0;
      int count = 0;
      for (Index cc = std::max<Index>(0, c - half);
           cc <= std::min<Index>(width - 1, c + (length - 1) - half); ++cc) {
        sum += img(r * width + cc);
        ++count;
      }
      out(r * width + c) = sum / count;
    }
  return out;
}

Vector corrupt_brightness_shift(const Vector& img, double delta) {
  Vector out(img.size());
  for (Index i = 0; i < img.size(); ++i) out(i) = clamp01(img(i) + delta);
  return out;
}

Vector corrupt_contrast_scale(const Vector& img, double scale) {
  if (scale < 0.0) throw ParamError("contrast scale must be >= 0");
  Vector out(img.size());
  for (Index i = 0; i < img.size(); ++i)
    out(i) = clamp01(0.5 + scale * (img(i) - 0.5));
  return out;
}

Vector corrupt_pixelate(const Vector& img, Index width, int block) {
  check_square(img, width);
  if (block < 1) throw ParamError("pixelate block must be >= 1");
  if (block == 1) return img;
  Vector out(img.size());
  for (Index r0 = 0; r0 < width; r0 += block)
    for (Index c0 = 0; c0 < width; c0 += block) {
      const Index r1 = std::min<Index>(width, r0 + block);
      const Index c1 = std::min<Index>(width, c0 + block);
      double sum = 0.0;
      for (Index r = r0; r < r1; ++r)
        for (Index c = c0; c < c1; ++c) sum += img(r * width + c);
      const double mean = sum / static_cast<double>((r1 - r0) * (c1 - c0));
      for (Index r = r0; r < r1; ++r)
        for (Index c = c0; c < c1; ++c) out(r * width + c) = mean;
    }
  return out;
}

Vector corrupt_quantize(const Vector& img, int levels) {
  if (levels < 2) throw ParamError("quantize needs at least 2 levels");
  const double steps = static_cast<double>(levels - 1);
  Vector out(img.size());
  for (Index i = 0; i < img.size(); ++i)
    out(i) = clamp01(std::round(img(i) * steps) / steps);
  return out;
}

void CorruptionSuite::validate() const {
  if (corruptions.empty()) throw ParamError("corruption suite is empty");
  std::set<std::string> seen;
  std::set<CorruptionCategory> cats;
  for (const auto& c : corruptions) {
    if (!seen.insert(c.name).second)
      throw ParamError("duplicate corruption '" + c.name + "'");
    const auto it = kernel_registry().find(c.name);
    if (it == kernel_registry().end())
      throw ParamError("unknown corruption '" + c.name + "'");
    if (it->second.category != c.category)
      throw ParamError("corruption '" + c.name + "' must be in category '" +
                       category_name(it->second.category) + "'");
    cats.insert(c.category);
    for (int s = 1; s < 5; ++s) {
      const bool grows = c.params[s] > c.params[s - 1];
      if (grows != it->second.intensity_grows_with_param ||
          c.params[s] == c.params[s - 1])
        throw ParamError("corruption '" + c.name +
                         "' severity schedule must strictly increase in "
                         "intensity");
    }
  }
  for (auto cat : {CorruptionCategory::Noise, CorruptionCategory::Blur,
                   CorruptionCategory::Weather, CorruptionCategory::Digital})
    if (!cats.count(cat))
      throw ParamError("corruption suite is missing category '" +
                       category_name(cat) + "'");
}

const Corruption& CorruptionSuite::find(std::string_view name) const {
  for (const auto& c : corruptions)
    if (c.name == name) return c;
  throw ParamError("unknown corruption '" + std::string(name) + "'");
}

CorruptionSuite CorruptionSuite::defaults(std::uint64_t seed) {
  CorruptionSuite s;
  s.seed = seed;
  s.corruptions = {
      {"gaussian_noise", CorruptionCategory::Noise, {0.04, 0.08, 0.12, 0.18, 0.26}},
      {"impulse_noise", CorruptionCategory::Noise, {0.02, 0.05, 0.09, 0.14, 0.20}},
      {"box_blur", CorruptionCategory::Blur, {1, 2, 3, 4, 5}},
      {"motion_blur_horizontal", CorruptionCategory::Blur, {3, 4, 5, 6, 7}},
      {"brightness_shift", CorruptionCategory::Weather, {0.10, 0.18, 0.26, 0.34, 0.42}},
      {"contrast_scale", CorruptionCategory::Weather, {0.75, 0.60, 0.45, 0.30, 0.20}},
      {"pixelate", CorruptionCategory::Digital, {2, 3, 4, 5, 6}},
      {"quantize", CorruptionCategory::Digital, {16, 10, 6, 4, 3}},
  };
  s.validate();
  return s;
}

void CorruptionSuite::save(const std::filesystem::path& path) const {
  validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "epicache-suite v1\n";
  out << "seed " << seed << "\n";
  for (const auto& c : corruptions) {
    out << c.name << " " << category_name(c.category);
    for (double p : c.params) out << " " << format_double(p);
    out << "\n";
  }
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

CorruptionSuite CorruptionSuite::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::string line;
  if (!std::getline(in, line) || line != "epicache-suite v1")
    throw FormatError("'" + path.string() +
                      "' is not an epicache-suite v1 schedule file");
  CorruptionSuite s;
  bool have_seed = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string head;
    ls >> head;
    if (head == "seed") {
      if (!(ls >> s.seed))
        throw FormatError("bad seed line in '" + path.string() + "'");
      have_seed = true;
      continue;
    }
    Corruption c;
    c.name = head;
    std::string cat;
    if (!(ls >> cat)) throw FormatError("bad corruption line: '" + line + "'");
    c.category = category_from_name(cat);
    for (double& p : c.params)
      if (!(ls >> p))
        throw FormatError("corruption '" + c.name +
                          "' needs 5 severity parameters");
    std::string extra;
    if (ls >> extra)
      throw FormatError("trailing tokens on corruption line: '" + line + "'");
    s.corruptions.push_back(std::move(c));
  }
  if (!have_seed)
    throw FormatError("'" + path.string() + "' is missing its seed line");
  s.validate();
  return s;
}

Vector apply_corruption(const CorruptionSuite& suite, const Vector& img,
                        Index width, std::string_view name, int severity,
                        std::uint64_t seed) {
  if (severity < 1 || severity > 5)
    throw ParamError("severity must lie in 1..5, got " +
                     std::to_string(severity));
  const Corruption& c = suite.find(name);
  const double p = c.params[static_cast<std::size_t>(severity - 1)];
  if (c.name == "gaussian_noise") return corrupt_gaussian_noise(img, p, seed);
  if (c.name == "impulse_noise") return corrupt_impulse_noise(img, p, seed);
  if (c.name == "box_blur")
    return corrupt_box_blur(img, width, static_cast<int>(std::llround(p)));
  if (c.name == "motion_blur_horizontal")
    return corrupt_motion_blur_horizontal(img, width,
                                          static_cast<int>(std::llround(p)));
  if (c.name == "brightness_shift") return corrupt_brightness_shift(img, p);
  if (c.name == "contrast_scale") return corrupt_contrast_scale(img, p);
  if (c.name == "pixelate")
    return corrupt_pixelate(img, width, static_cast<int>(std::llround(p)));
  if (c.name == "quantize")
    return corrupt_quantize(img, static_cast<int>(std::llround(p)));
  throw ParamError("unknown corruption '" + c.name + "'");
}

double compute_ce(const Vector& model_errors, const Vector& reference_errors) {
  if (model_errors.size() != 5 || reference_errors.size() != 5)
    throw ShapeError("CE expects 5 severity error rates per model");
  for (Index i = 0; i < 5; ++i)
    if (model_errors(i) < 0.0 || model_errors(i) > 1.0 ||
        reference_errors(i) < 0.0 || reference_errors(i) > 1.0)
      throw ParamError("error rates must lie in [0,1]");
  const double ref_mean = reference_errors.mean();
  if (ref_mean == 0.0)
    throw NumericError(
        "reference model makes no errors on this corruption; CE undefined");
  return model_errors.mean() / ref_mean;
}

RobustnessReport evaluate_corruption_robustness(const ClassifierFn& model,
                                                const ClassifierFn& reference,
                                                const CorruptionSuite& suite,
                                                const Dataset& data,
                                                unsigned workers) {
  suite.validate();
  data.validate();
  if (data.size() == 0) throw ParamError("robustness eval needs samples");

  const auto n_corr = static_cast<Index>(suite.corruptions.size());
  RobustnessReport rep;
  rep.model_errors.setZero(n_corr, 5);
  rep.reference_errors.setZero(n_corr, 5);

  double linf_sum = 0.0;
  Index linf_count = 0;
  for (Index ci = 0; ci < n_corr; ++ci) {
    const Corruption& corr = suite.corruptions[static_cast<std::size_t>(ci)];
    rep.corruption_names.push_back(corr.name);
    rep.categories.push_back(corr.category);
    for (int sev = 1; sev <= 5; ++sev) {
      std::vector<std::uint8_t> model_err(static_cast<std::size_t>(data.size()));
      std::vector<std::uint8_t> ref_err(static_cast<std::size_t>(data.size()));
      std::vector<double> linf(static_cast<std::size_t>(data.size()), -1.0);
      parallel_for(
          data.size(),
          [&](Index j) {
            const Vector img = data.images.row(j).transpose();
            const std::uint64_t seed =
                mix_seed({suite.seed, seed_stream::corrupt,
                          static_cast<std::uint64_t>(ci),
                          static_cast<std::uint64_t>(sev),
                          static_cast<std::uint64_t>(j)});
            const Vector corrupted =
                apply_corruption(suite, img, data.width, corr.name, sev, seed);
            model_err[static_cast<std::size_t>(j)] =
                argmax(model(corrupted)) != data.labels(j) ? 1 : 0;
            ref_err[static_cast<std::size_t>(j)] =
                argmax(reference(corrupted)) != data.labels(j) ? 1 : 0;
            if (sev == 1) {
              const double scale = img.lpNorm<Eigen::Infinity>();
              if (scale > 0.0)
                linf[static_cast<std::size_t>(j)] =
                    (corrupted - img).lpNorm<Eigen::Infinity>() / scale;
            }
          },
          workers);
      double msum = 0.0, rsum = 0.0;
      for (Index j = 0; j < data.size(); ++j) {
        msum += model_err[static_cast<std::size_t>(j)];
        rsum += ref_err[static_cast<std::size_t>(j)];
        if (sev == 1 && linf[static_cast<std::size_t>(j)] >= 0.0) {
          linf_sum += linf[static_cast<std::size_t>(j)];
          ++linf_count;
        }
      }
      rep.model_errors(ci, sev - 1) = msum / static_cast<double>(data.size());
      rep.reference_errors(ci, sev - 1) =
          rsum / static_cast<double>(data.size());
    }
    rep.ce.push_back(compute_ce(rep.model_errors.row(ci).transpose(),
                                rep.reference_errors.row(ci).transpose()));
  }
  rep.mce = 0.0;
  for (double v : rep.ce) rep.mce += v;
  rep.mce /= static_cast<double>(rep.ce.size());
  rep.severity1_mean_linf =
      linf_count > 0 ? linf_sum / static_cast<double>(linf_count) : 0.0;
  return rep;
}

void RobustnessReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "corruption,category,ce\n";
  for (std::size_t i = 0; i < corruption_names.size(); ++i)
    out << corruption_names[i] << "," << category_name(categories[i]) << ","
        << format_double(ce[i]) << "\n";
  out << "mCE,," << format_double(mce) << "\n";
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

void RobustnessReport::write_json(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["mce"] = mce;
  j["severity1_mean_linf"] = severity1_mean_linf;
  j["corruptions"] = nlohmann::json::array();
  for (std::size_t i = 0; i < corruption_names.size(); ++i) {
    nlohmann::json c;
    c["name"] = corruption_names[i];
    c["category"] = category_name(categories[i]);
    c["ce"] = ce[i];
    c["model_errors"] = std::vector<double>(
        model_errors.row(static_cast<Index>(i)).begin(),
        model_errors.row(static_cast<Index>(i)).end());
    c["reference_errors"] = std::vector<double>(
        reference_errors.row(static_cast<Index>(i)).begin(),
        reference_errors.row(static_cast<Index>(i)).end());
    j["corruptions"].push_back(c);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace epicache
