#pragma once

#include <epicache/backbone.hpp>
#include <epicache/cache.hpp>
#include <epicache/common.hpp>
#include <epicache/dataset.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace epicache {

// Targeted PGD in an l-inf ball of radius epsilon * max|x|, intersected
// with the [0,1] pixel box. Epsilon is the normalized budget.
struct AttackConfig {
  double epsilon = 0.06;
  double stepsize = 2.0 / 225.0;
  Index iterations = 10;
  bool random_start = true;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AttackOutcome {
  Vector x_adv;  // adversarial image, or the clean input when failed
  bool success = false;
  Index target = 0;
};

using PredictFn = std::function<Vector(const Vector&)>;
// Gradient of the targeted loss -log p_target at the given image.
using TargetGradFn = std::function<Vector(const Vector&, Index)>;

// Uniform draw over the wrong classes; deterministic in the seed.
Index target_selection(Index true_label, Index num_classes, std::uint64_t seed);

// Descends -log p_target for cfg.iterations steps of stepsize * sign(grad),
// projecting back into the ball after every step. Failure (target not
// reached, or a non-finite gradient) returns the clean input unchanged.
AttackOutcome pgd_targeted(const PredictFn& predict, const TargetGradFn& grad,
                           const Vector& x, Index target, const AttackConfig& cfg);

// Attacks every sample of `data` against the given model functions. Targets
// and random starts are derived per sample index from cfg.seed, so results
// do not depend on the worker count.
std::vector<AttackOutcome> attack_dataset(const PredictFn& predict,
                                          const TargetGradFn& grad,
                                          const Dataset& data,
                                          const AttackConfig& cfg,
                                          unsigned workers = 0);

// Model adapters.
PredictFn backbone_predict_fn(const Backbone& m);
TargetGradFn backbone_grad_fn(const Backbone& m);
PredictFn cache_predict_fn(const Cache& c, const Backbone& m,
                           const RetrievalMethod& method);
TargetGradFn cache_grad_fn(const Cache& c, const Backbone& m);

enum class ThreatKind : std::uint8_t {
  White = 0,  // attack each evaluated model directly
  Gray = 1,   // attack the backbone, evaluate the cache on the result
  Black = 2,  // attack a surrogate backbone, evaluate backbone and cache
};

std::string threat_name(ThreatKind kind);

struct ThreatModel {
  ThreatKind kind = ThreatKind::White;
  const Backbone* surrogate = nullptr;  // required for Black
};

struct AccuracyRow {
  std::string model;   // "backbone" or "cache"
  std::string threat;  // "white" / "gray" / "black"
  double epsilon = 0.0;
  double top1 = 0.0;
};

struct AccuracyTable {
  std::vector<AccuracyRow> rows;

  double lookup(const std::string& model, const std::string& threat,
                double epsilon) const;
  void write_csv(const std::filesystem::path& path) const;
  void write_json(const std::filesystem::path& path,
                  const std::string& config_echo) const;
};

// Sweeps the epsilon list (plus a clean epsilon=0 row per model) under one
// threat model. Gray-box requires `cache`; white/black evaluate the
// backbone and, when present, the cache.
AccuracyTable run_threat_scenario(const ThreatModel& threat, const Backbone& m,
                                  const Cache* cache, const RetrievalMethod& method,
                                  const Dataset& data,
                                  const std::vector<double>& epsilons,
                                  const AttackConfig& base_cfg,
                                  unsigned workers = 0);

std::vector<double> default_epsilon_sweep();  // .01 .02 .04 .06 .08 .1

}  // namespace epicache
