#include <epicache/attacks.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace epicache {

void AttackConfig::validate() const {
  if (!(epsilon > 0.0) || epsilon > 1.0 || !std::isfinite(epsilon))
    throw ParamError("attack epsilon must lie in (0, 1]");
  if (!(stepsize > 0.0) || !std::isfinite(stepsize))
    throw ParamError("attack stepsize must be positive");
  if (iterations < 1) throw ParamError("attack needs at least one iteration");
}

Index target_selection(Index true_label, Index num_classes, std::uint64_t seed) {
  if (num_classes < 2)
    throw ParamError("targeted attacks need at least two classes");
  if (true_label < 0 || true_label >= num_classes)
    throw ParamError("true label " + std::to_string(true_label) +
                     " outside [0, " + std::to_string(num_classes) + ")");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> pick(0, num_classes - 2);
  const Index draw = pick(rng);
  return draw >= true_label ? draw + 1 : draw;
}

AttackOutcome pgd_targeted(const PredictFn& predict, const TargetGradFn& grad,
                           const Vector& x, Index target,
                           const AttackConfig& cfg) {
  cfg.validate();
  if (x.size() < 1) throw ShapeError("attack input is empty");
  if (x.minCoeff() < 0.0 || x.maxCoeff() > 1.0)
    throw ParamError("attack input must lie in [0,1]");
  if (target < 0) throw ParamError("attack target must be nonnegative");

  // Budget is relative to the clean image's max pixel.
  const double radius = cfg.epsilon * x.lpNorm<Eigen::Infinity>();
  const Vector lo = (x.array() - radius).max(0.0);
  const Vector hi = (x.array() + radius).min(1.0);

  Vector xa = x;
  std::mt19937_64 rng(cfg.seed);
  if (cfg.random_start) {
    std::uniform_real_distribution<double> u(-radius, radius);
    for (Index i = 0; i < xa.size(); ++i) xa(i) += u(rng);
    xa = xa.cwiseMax(lo).cwiseMin(hi);
  }

  bool aborted = false;
  for (Index it = 0; it < cfg.iterations; ++it) {
    const Vector g = grad(xa, target);
    if (g.size() != x.size())
      throw ShapeError("gradient size does not match the input");
    if (!g.allFinite()) {
      aborted = true;  // counts as a failed attack
      break;
    }
    xa -= cfg.stepsize * g.array().sign().matrix();
    xa = xa.cwiseMax(lo).cwiseMin(hi);
  }

  AttackOutcome out;
  out.target = target;
  out.success = false;
  if (!aborted) {
    const Vector p = predict(xa);
    if (target >= p.size())
      throw ParamError("attack target " + std::to_string(target) +
                       " outside the model's class range");
    out.success = argmax(p) == target;
  }
  // Failed attacks hand back the clean input, bit for bit.
  out.x_adv = out.success ? xa : x;

  if ((out.x_adv - x).lpNorm<Eigen::Infinity>() > radius + 1e-9 ||
      out.x_adv.minCoeff() < 0.0 || out.x_adv.maxCoeff() > 1.0)
    throw NumericError("PGD left its perturbation ball");
  return out;
}

std::vector<AttackOutcome> attack_dataset(const PredictFn& predict,
                                          const TargetGradFn& grad,
                                          const Dataset& data,
                                          const AttackConfig& cfg,
                                          unsigned workers) {
  data.validate();
  cfg.validate();
  if (data.size() == 0) throw ParamError("nothing to attack");
  std::vector<AttackOutcome> outcomes(static_cast<std::size_t>(data.size()));
  parallel_for(
      data.size(),
      [&](Index i) {
        AttackConfig local = cfg;
        local.seed = mix_seed({cfg.seed, seed_stream::attack_start,
                               static_cast<std::uint64_t>(i)});
        const Index target = target_selection(
            data.labels(i), data.num_classes,
            mix_seed({cfg.seed, seed_stream::attack_target,
                      static_cast<std::uint64_t>(i)}));
        outcomes[static_cast<std::size_t>(i)] = pgd_targeted(
            predict, grad, data.images.row(i).transpose(), target, local);
      },
      workers);
  return outcomes;
}

PredictFn backbone_predict_fn(const Backbone& m) {
  return [mp = &m](const Vector& x) { return forward(*mp, x); };
}

TargetGradFn backbone_grad_fn(const Backbone& m) {
  return [mp = &m](const Vector& x, Index target) {
    if (target < 0 || target >= mp->num_classes())
      throw ParamError("gradient target outside the class range");
    LossSpec loss;
    loss.target = Vector::Zero(mp->num_classes());
    loss.target(target) = 1.0;
    return input_gradient(*mp, x, loss);
  };
}

PredictFn cache_predict_fn(const Cache& c, const Backbone& m,
                           const RetrievalMethod& method) {
  return [cp = &c, mp = &m, method](const Vector& x) {
    return cache_predict(*cp, *mp, x, method);
  };
}

TargetGradFn cache_grad_fn(const Cache& c, const Backbone& m) {
  return [cp = &c, mp = &m](const Vector& x, Index target) {
    if (target < 0 || target >= cp->num_classes())
      throw ParamError("gradient target outside the class range");
    const Matrix j = prediction_jacobian(*cp, *mp, x);
    const Vector p = cache_predict(*cp, *mp, x, Continuous{});
    // d(-log p_t)/dx; the floor only guards against a class with zero
    // support in the cache.
    return Vector(-j.row(target).transpose() / std::max(p(target), 1e-300));
  };
}

std::string threat_name(ThreatKind kind) {
  switch (kind) {
    case ThreatKind::White: return "white";
    case ThreatKind::Gray: return "gray";
    default: return "black";
  }
}

namespace {

double accuracy_under(const PredictFn& fn, const std::vector<AttackOutcome>& out,
                      const IntVector& labels, unsigned workers) {
  std::vector<std::uint8_t> hit(out.size());
  parallel_for(
      static_cast<Index>(out.size()),
      [&](Index i) {
        hit[static_cast<std::size_t>(i)] =
            argmax(fn(out[static_cast<std::size_t>(i)].x_adv)) == labels(i) ? 1
                                                                            : 0;
      },
      workers);
  double sum = 0.0;
  for (auto h : hit) sum += h;
  return sum / static_cast<double>(out.size());
}

double clean_accuracy(const PredictFn& fn, const Dataset& data,
                      unsigned workers) {
  std::vector<std::uint8_t> hit(static_cast<std::size_t>(data.size()));
  parallel_for(
      data.size(),
      [&](Index i) {
        hit[static_cast<std::size_t>(i)] =
            argmax(fn(data.images.row(i).transpose())) == data.labels(i) ? 1 : 0;
      },
      workers);
  double sum = 0.0;
  for (auto h : hit) sum += h;
  return sum / static_cast<double>(data.size());
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

double AccuracyTable::lookup(const std::string& model, const std::string& threat,
                             double epsilon) const {
  for (const auto& r : rows)
    if (r.model == model && r.threat == threat &&
        std::abs(r.epsilon - epsilon) < 1e-12)
      return r.top1;
  throw ParamError("no accuracy row for model '" + model + "', threat '" +
                   threat + "', epsilon " + std::to_string(epsilon));
}

void AccuracyTable::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "model,threat,epsilon,top1\n";
  for (const auto& r : rows)
    out << r.model << "," << r.threat << "," << format_double(r.epsilon) << ","
        << format_double(r.top1) << "\n";
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

void AccuracyTable::write_json(const std::filesystem::path& path,
                               const std::string& config_echo) const {
  nlohmann::json j;
  j["config"] = config_echo.empty() ? nlohmann::json::object()
                                    : nlohmann::json::parse(config_echo);
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows)
    j["rows"].push_back({{"model", r.model},
                         {"threat", r.threat},
                         {"epsilon", r.epsilon},
                         {"top1", r.top1}});
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

std::vector<double> default_epsilon_sweep() {
  return {0.01, 0.02, 0.04, 0.06, 0.08, 0.1};
}

AccuracyTable run_threat_scenario(const ThreatModel& threat, const Backbone& m,
                                  const Cache* cache,
                                  const RetrievalMethod& method,
                                  const Dataset& data,
                                  const std::vector<double>& epsilons,
                                  const AttackConfig& base_cfg,
                                  unsigned workers) {
  data.validate();
  if (data.size() == 0) throw ParamError("threat scenario needs samples");
  if (epsilons.empty()) throw ParamError("threat scenario needs an epsilon list");
  if (threat.kind == ThreatKind::Gray && cache == nullptr)
    throw ParamError("gray-box evaluation needs a cache model");
  if (threat.kind == ThreatKind::Black) {
    if (threat.surrogate == nullptr)
      throw ParamError("black-box evaluation needs a surrogate backbone");
    threat.surrogate->validate();
    const Backbone& s = *threat.surrogate;
    if (s.input_dim() != m.input_dim() || s.num_classes() != m.num_classes())
      throw ParamError("surrogate shape does not match the defended backbone");
    if (s.w1 == m.w1 && s.b1 == m.b1 && s.w2 == m.w2 && s.b2 == m.b2)
      throw ParamError(
          "surrogate is identical to the defended backbone; black-box needs "
          "an independently trained model");
  }

  const std::string tname = threat_name(threat.kind);
  struct Evaluated {
    std::string name;
    PredictFn fn;
  };
  std::vector<Evaluated> evaluated;
  if (threat.kind != ThreatKind::Gray)
    evaluated.push_back({"backbone", backbone_predict_fn(m)});
  if (cache != nullptr)
    evaluated.push_back({"cache", cache_predict_fn(*cache, m, method)});

  AccuracyTable table;
  for (const auto& ev : evaluated)
    table.rows.push_back({ev.name, tname, 0.0, clean_accuracy(ev.fn, data, workers)});

  for (double eps : epsilons) {
    AttackConfig cfg = base_cfg;
    cfg.epsilon = eps;
    cfg.validate();
    switch (threat.kind) {
      case ThreatKind::White: {
        // Every evaluated model is attacked with its own gradients.
        for (const auto& ev : evaluated) {
          const bool is_cache = ev.name == "cache";
          const auto outcomes = attack_dataset(
              ev.fn,
              is_cache ? cache_grad_fn(*cache, m) : backbone_grad_fn(m), data,
              cfg, workers);
          table.rows.push_back(
              {ev.name, tname, eps,
               accuracy_under(ev.fn, outcomes, data.labels, workers)});
        }
        break;
      }
      case ThreatKind::Gray: {
        const auto outcomes = attack_dataset(
            backbone_predict_fn(m), backbone_grad_fn(m), data, cfg, workers);
        table.rows.push_back(
            {"cache", tname, eps,
             accuracy_under(cache_predict_fn(*cache, m, method), outcomes,
                            data.labels, workers)});
        break;
      }
      case ThreatKind::Black: {
        const auto outcomes =
            attack_dataset(backbone_predict_fn(*threat.surrogate),
                           backbone_grad_fn(*threat.surrogate), data, cfg,
                           workers);
        for (const auto& ev : evaluated)
          table.rows.push_back(
              {ev.name, tname, eps,
               accuracy_under(ev.fn, outcomes, data.labels, workers)});
        break;
      }
    }
  }
  return table;
}

}  // namespace epicache
