// Command-line pipeline for the episodic-cache classifier: dataset
// generation, backbone training, embedding extraction, cache construction
// and compression, and the clean / adversarial / corruption evaluations,
// wired together through artifacts in one output directory.
//
// Every subcommand is deterministic given its inputs and the seed, and
// writes a .prov.json provenance record (config echo plus input/output
// digests, no timestamps) next to each artifact, so reruns are
// byte-identical and every file can be traced to the command that made it.

#include <epicache/attacks.hpp>
#include <epicache/backbone.hpp>
#include <epicache/cache.hpp>
#include <epicache/common.hpp>
#include <epicache/compression.hpp>
#include <epicache/corruptions.hpp>
#include <epicache/dataset.hpp>
#include <epicache/embeddings.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace epicache;

namespace {

constexpr const char* kToolName = "epicache";
constexpr const char* kToolVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Experiment configuration: recipe defaults, overridden by the config file,
// overridden by flags.

// Per-variant training overrides; unset fields fall back to the recipe.
struct BackboneSection {
  std::optional<Index> hidden_dim;
  std::optional<Index> epochs;
  std::optional<Index> batch_size;
  std::optional<double> learning_rate;
  std::optional<double> augment_prob;
  std::optional<std::uint64_t> seed;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;  // global seed; every unpinned stream derives from it

  DataConfig data;  // data.seed is ignored; the global seed is used

  std::map<std::string, BackboneSection> backbones;

  // Cache defaults.
  std::string layer = "hidden_relu";
  double theta = 50.0;
  Index knn_k = 50;
  std::string method = "continuous";

  // Compression defaults.
  Index kmeans_batch = 256;
  Index kmeans_iterations = 100;
  bool kmeans_per_class = true;
  Index pca_batch = 256;

  // Attack defaults.
  AttackConfig attack;  // epsilon field unused; sweeps come from `sweep`
  std::vector<double> sweep = default_epsilon_sweep();
  double headline_epsilon = 0.06;

  // Corruption suite: explicit schedule file, else stock defaults.
  std::string schedule_file;
  std::optional<std::uint64_t> corruption_seed;

  fs::path out_dir = "out";
  unsigned workers = 0;  // 0 = logical cores
};

std::string one_line(std::string s) {
  for (char& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Config file: INI-style sections of key = value lines; '#' and ';' start
// comments. Unknown sections or keys are errors so typos cannot silently
// fall back to defaults.

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

std::map<std::string, std::string> read_ini(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::map<std::string, std::string> kv;
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto cut = line.find_first_of("#;");
    if (cut != std::string::npos) line.erase(cut);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw FormatError("config line " + std::to_string(lineno) +
                          ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError("config line " + std::to_string(lineno) +
                        ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw FormatError("config line " + std::to_string(lineno) + ": empty key");
    kv[section + "." + key] = value;
  }
  return kv;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const std::uint64_t r = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw FormatError("config key '" + key + "': '" + v + "' is not an integer");
  }
}

Index to_index(const std::string& key, const std::string& v) {
  return static_cast<Index>(to_u64(key, v));
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double r = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw FormatError("config key '" + key + "': '" + v + "' is not a number");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw FormatError("config key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<double> to_double_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(key, trim(item)));
  if (out.empty()) throw FormatError("config key '" + key + "': empty list");
  return out;
}

bool is_variant(const std::string& name) {
  return name == "standard" || name == "augmented" || name == "reference" ||
         name == "surrogate";
}

void apply_config_entry(ExperimentConfig& cfg, const std::string& key,
                        const std::string& value) {
  if (key == "experiment.seed") cfg.seed = to_u64(key, value);
  else if (key == "data.num_classes") cfg.data.num_classes = to_index(key, value);
  else if (key == "data.width") cfg.data.width = to_index(key, value);
  else if (key == "data.per_class") cfg.data.per_class = to_index(key, value);
  else if (key == "data.train_fraction") cfg.data.split.train = to_double(key, value);
  else if (key == "data.val_fraction") cfg.data.split.val = to_double(key, value);
  else if (key == "data.test_fraction") cfg.data.split.test = to_double(key, value);
  else if (key == "cache.layer") cfg.layer = value;
  else if (key == "cache.theta") cfg.theta = to_double(key, value);
  else if (key == "cache.knn_k") cfg.knn_k = to_index(key, value);
  else if (key == "cache.method") cfg.method = value;
  else if (key == "compression.kmeans_batch") cfg.kmeans_batch = to_index(key, value);
  else if (key == "compression.kmeans_iterations") cfg.kmeans_iterations = to_index(key, value);
  else if (key == "compression.per_class") cfg.kmeans_per_class = to_bool(key, value);
  else if (key == "compression.pca_batch") cfg.pca_batch = to_index(key, value);
  else if (key == "attack.stepsize") cfg.attack.stepsize = to_double(key, value);
  else if (key == "attack.iterations") cfg.attack.iterations = to_index(key, value);
  else if (key == "attack.random_start") cfg.attack.random_start = to_bool(key, value);
  else if (key == "attack.sweep") cfg.sweep = to_double_list(key, value);
  else if (key == "attack.headline_epsilon") cfg.headline_epsilon = to_double(key, value);
  else if (key == "corruptions.schedule") cfg.schedule_file = value;
  else if (key == "corruptions.seed") cfg.corruption_seed = to_u64(key, value);
  else if (key == "output.dir") cfg.out_dir = value;
  else {
    // [backbone.<variant>] section keys.
    const std::string prefix = "backbone.";
    if (key.rfind(prefix, 0) == 0) {
      const auto dot = key.find('.', prefix.size());
      if (dot != std::string::npos) {
        const std::string variant = key.substr(prefix.size(), dot - prefix.size());
        const std::string field = key.substr(dot + 1);
        if (!is_variant(variant))
          throw FormatError("config: unknown backbone variant '" + variant + "'");
        BackboneSection& b = cfg.backbones[variant];
        if (field == "hidden_dim") b.hidden_dim = to_index(key, value);
        else if (field == "epochs") b.epochs = to_index(key, value);
        else if (field == "batch_size") b.batch_size = to_index(key, value);
        else if (field == "learning_rate") b.learning_rate = to_double(key, value);
        else if (field == "augment_prob") b.augment_prob = to_double(key, value);
        else if (field == "seed") b.seed = to_u64(key, value);
        else throw FormatError("config: unknown key '" + key + "'");
        return;
      }
    }
    throw FormatError("config: unknown key '" + key + "'");
  }
}

void apply_config_file(ExperimentConfig& cfg, const fs::path& path) {
  for (const auto& [key, value] : read_ini(path))
    apply_config_entry(cfg, key, value);
}

// The config file must be applied before flag parsing so flags win; scan
// argv for it directly instead of waiting for the parser.
std::string scan_config_flag(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" || a == "-c") {
      if (i + 1 >= argc) throw ParamError("--config expects a file path");
      return argv[i + 1];
    }
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return "";
}

// ---------------------------------------------------------------------------
// Derived settings.

CorruptionSuite resolve_suite(const ExperimentConfig& cfg) {
  if (!cfg.schedule_file.empty()) return CorruptionSuite::load(cfg.schedule_file);
  return CorruptionSuite::defaults(cfg.corruption_seed.value_or(cfg.seed));
}

// Training recipes. Standard and surrogate share the architecture (the
// surrogate just trains from an offset seed); augmented trains longer and
// gentler under corruption augmentation; the reference is the deliberately
// weaker model anchoring the corruption-error denominators: a quarter of
// the standard hidden width, half the epochs, and a fixed seed so its error
// rates do not move with the experiment seed.
TrainConfig recipe_defaults(const ExperimentConfig& cfg, const std::string& variant,
                            const TrainConfig* standard) {
  TrainConfig t;
  t.batch_size = 32;
  if (variant == "standard" || variant == "surrogate") {
    t.hidden_dim = 32;
    t.epochs = 48;
    t.learning_rate = 0.03;
    t.seed = variant == "surrogate" ? cfg.seed + 1000 : cfg.seed;
  } else if (variant == "augmented") {
    t.hidden_dim = 32;
    t.epochs = 160;
    t.learning_rate = 0.02;
    t.seed = cfg.seed;
    t.augment_prob = 0.5;
  } else if (variant == "reference") {
    t.hidden_dim = std::max<Index>(1, standard->hidden_dim / 4);
    t.epochs = std::max<Index>(1, standard->epochs / 2);
    t.batch_size = standard->batch_size;
    t.learning_rate = 0.02;
    t.seed = 1234;
  } else {
    throw ParamError("unknown backbone variant '" + variant + "'");
  }
  return t;
}

TrainConfig resolve_train(const ExperimentConfig& cfg, const std::string& variant) {
  if (!is_variant(variant))
    throw ParamError("unknown backbone variant '" + variant + "'");
  auto apply = [&cfg](TrainConfig t, const std::string& name) {
    const auto it = cfg.backbones.find(name);
    if (it != cfg.backbones.end()) {
      const BackboneSection& b = it->second;
      if (b.hidden_dim) t.hidden_dim = *b.hidden_dim;
      if (b.epochs) t.epochs = *b.epochs;
      if (b.batch_size) t.batch_size = *b.batch_size;
      if (b.learning_rate) t.learning_rate = *b.learning_rate;
      if (b.augment_prob) t.augment_prob = *b.augment_prob;
      if (b.seed) t.seed = *b.seed;
    }
    return t;
  };
  TrainConfig standard = apply(recipe_defaults(cfg, "standard", nullptr), "standard");
  if (variant == "standard") return standard;
  TrainConfig t = apply(recipe_defaults(cfg, variant, &standard), variant);
  if (variant == "augmented") t.augmentation = resolve_suite(cfg);
  return t;
}

EmbeddingLayer parse_layer(const std::string& name) { return layer_from_name(name); }

RetrievalMethod parse_method(const ExperimentConfig& cfg, const std::string& name) {
  if (name == "continuous") return Continuous{};
  if (name == "knn") return Knn{cfg.knn_k};
  throw ParamError("unknown retrieval method '" + name +
                   "' (expected continuous or knn)");
}

std::string method_label(const ExperimentConfig& cfg, const std::string& name) {
  return name == "knn" ? "knn" + std::to_string(cfg.knn_k) : name;
}

// ---------------------------------------------------------------------------
// Artifact layout and provenance.

fs::path artifact(const ExperimentConfig& cfg, const std::string& name) {
  return cfg.out_dir / name;
}

std::string dataset_name(const std::string& split) { return "dataset_" + split + ".bin"; }
std::string backbone_name(const std::string& variant) { return "backbone_" + variant + ".bin"; }
std::string embeddings_name(const std::string& variant, const std::string& layer,
                            const std::string& split) {
  return "embeddings_" + variant + "_" + layer + "_" + split + ".bin";
}
std::string cache_stem(const std::string& variant, const std::string& layer) {
  return variant + "_" + layer;
}
std::string cache_name(const std::string& stem) { return "cache_" + stem + ".bin"; }

// Reduce a cache file name (possibly of a compressed cache) back to its
// stem, so evaluation outputs inherit the name of the cache they measured.
std::string stem_from_cache_file(const std::string& file) {
  std::string s = fs::path(file).filename().string();
  if (s.rfind("cache_", 0) == 0) s = s.substr(6);
  if (s.size() > 4 && s.compare(s.size() - 4, 4, ".bin") == 0)
    s = s.substr(0, s.size() - 4);
  if (s.empty()) throw ParamError("cannot derive a report name from '" + file + "'");
  return s;
}

fs::path require_artifact(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path))
    throw IoError("missing artifact '" + path.string() + "'; run '" + producer +
                  "' first");
  return path;
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for digesting");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  return hex64(fnv1a64(bytes.data(), bytes.size()));
}

// One provenance record per output file: tool identity, the effective
// configuration of the producing subcommand, and digests of every input and
// output. No timestamps, so a rerun reproduces the record byte for byte.
void write_provenance(const std::string& subcommand, const json& config_echo,
                      const std::vector<fs::path>& inputs,
                      const std::vector<fs::path>& outputs) {
  json prov;
  prov["tool"] = kToolName;
  prov["version"] = kToolVersion;
  prov["subcommand"] = subcommand;
  prov["config"] = config_echo;
  prov["inputs"] = json::object();
  for (const auto& p : inputs) prov["inputs"][p.filename().string()] = file_digest(p);
  prov["outputs"] = json::object();
  for (const auto& p : outputs) prov["outputs"][p.filename().string()] = file_digest(p);
  const std::string text = prov.dump(2) + "\n";
  for (const auto& p : outputs) {
    const fs::path pp = p.string() + ".prov.json";
    std::ofstream out(pp, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + pp.string() + "' for writing");
    out << text;
    if (!out) throw IoError("short write to '" + pp.string() + "'");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

json train_echo(const TrainConfig& t, const std::string& variant) {
  json j;
  j["variant"] = variant;
  j["hidden_dim"] = t.hidden_dim;
  j["epochs"] = t.epochs;
  j["batch_size"] = t.batch_size;
  j["learning_rate"] = t.learning_rate;
  j["seed"] = t.seed;
  if (t.augmentation) {
    j["augment_prob"] = t.augment_prob;
    j["augmentation_seed"] = t.augmentation->seed;
    json names = json::array();
    for (const auto& c : t.augmentation->corruptions) names.push_back(c.name);
    j["augmentation"] = names;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Shared evaluation helpers.

double cache_accuracy(const Cache& c, const Backbone& m, const Dataset& data,
                      const RetrievalMethod& method, unsigned workers) {
  std::vector<int> hit(static_cast<std::size_t>(data.size()), 0);
  parallel_for(
      data.size(),
      [&](Index i) {
        const Vector p = cache_predict(c, m, data.images.row(i).transpose(), method);
        hit[static_cast<std::size_t>(i)] = argmax(p) == data.labels(i) ? 1 : 0;
      },
      workers);
  double sum = 0.0;
  for (int h : hit) sum += h;
  return sum / static_cast<double>(data.size());
}

Dataset head_subset(const Dataset& data, Index n) {
  if (n <= 0 || n >= data.size()) return data;
  Dataset out;
  out.images = data.images.topRows(n);
  out.labels = data.labels.head(n);
  out.width = data.width;
  out.num_classes = data.num_classes;
  return out;
}

// ---------------------------------------------------------------------------
// Subcommand bodies. Each returns the list of primary outputs it wrote.

void cmd_gen_data(const ExperimentConfig& cfg) {
  DataConfig dc = cfg.data;
  dc.seed = cfg.seed;
  const DataSplits splits = generate_dataset(dc, cfg.workers);
  fs::create_directories(cfg.out_dir);
  const fs::path ptr = artifact(cfg, dataset_name("train"));
  const fs::path pva = artifact(cfg, dataset_name("val"));
  const fs::path pte = artifact(cfg, dataset_name("test"));
  save_dataset(splits.train, ptr);
  save_dataset(splits.val, pva);
  save_dataset(splits.test, pte);
  json echo;
  echo["num_classes"] = dc.num_classes;
  echo["width"] = dc.width;
  echo["per_class"] = dc.per_class;
  echo["train_fraction"] = dc.split.train;
  echo["val_fraction"] = dc.split.val;
  echo["test_fraction"] = dc.split.test;
  echo["seed"] = dc.seed;
  write_provenance("gen-data", echo, {}, {ptr, pva, pte});
  std::cout << "gen-data: " << splits.train.size() << " train / "
            << splits.val.size() << " val / " << splits.test.size()
            << " test samples -> " << cfg.out_dir.string() << "\n";
}

void cmd_train_backbone(const ExperimentConfig& cfg, const std::string& variant) {
  const fs::path data_path =
      require_artifact(artifact(cfg, dataset_name("train")), "gen-data");
  const Dataset train_set = load_dataset(data_path);
  const TrainConfig tc = resolve_train(cfg, variant);
  const TrainResult result = train(train_set, tc);
  fs::create_directories(cfg.out_dir);
  const fs::path out = artifact(cfg, backbone_name(variant));
  save_backbone(result.model, out);
  std::vector<fs::path> inputs = {data_path};
  if (tc.augmentation && !cfg.schedule_file.empty())
    inputs.push_back(cfg.schedule_file);
  write_provenance("train-backbone", train_echo(tc, variant), inputs, {out});
  std::cout << "train-backbone: " << variant << " train accuracy "
            << format_double(top1_accuracy(result.model, train_set))
            << ", final loss " << format_double(result.epoch_loss.back())
            << " -> " << out.filename().string() << "\n";
}

void cmd_extract(const ExperimentConfig& cfg, const std::string& variant,
                 const std::string& split) {
  const fs::path model_path =
      require_artifact(artifact(cfg, backbone_name(variant)), "train-backbone");
  const fs::path data_path =
      require_artifact(artifact(cfg, dataset_name(split)), "gen-data");
  const Backbone m = load_backbone(model_path);
  const Dataset data = load_dataset(data_path);
  const EmbeddingLayer layer = parse_layer(cfg.layer);
  const LabeledEmbeddings emb = extract_embeddings(m, data, layer, cfg.workers);
  const fs::path out = artifact(cfg, embeddings_name(variant, cfg.layer, split));
  save_embeddings(emb, out);
  json echo;
  echo["variant"] = variant;
  echo["layer"] = cfg.layer;
  echo["split"] = split;
  echo["backbone_id"] = emb.backbone_id;
  write_provenance("extract", echo, {model_path, data_path}, {out});
  std::cout << "extract: " << emb.size() << " x " << emb.dim() << " " << cfg.layer
            << " embeddings -> " << out.filename().string() << "\n";
}

void cmd_build_cache(const ExperimentConfig& cfg, const std::string& variant) {
  const fs::path emb_path = require_artifact(
      artifact(cfg, embeddings_name(variant, cfg.layer, "train")), "extract");
  const LabeledEmbeddings emb = load_embeddings(emb_path);
  const Cache c = build_cache(emb, cfg.theta, parse_layer(cfg.layer));
  const fs::path out = artifact(cfg, cache_name(cache_stem(variant, cfg.layer)));
  save_cache(c, out);
  json echo;
  echo["variant"] = variant;
  echo["layer"] = cfg.layer;
  echo["theta"] = cfg.theta;
  echo["entries"] = c.size();
  write_provenance("build-cache", echo, {emb_path}, {out});
  std::cout << "build-cache: " << c.size() << " keys of dim " << c.dim()
            << ", theta " << format_double(c.theta) << " -> "
            << out.filename().string() << "\n";
}

void cmd_tune_theta(const ExperimentConfig& cfg, const std::string& variant,
                    const std::vector<double>& grid_flag) {
  const fs::path cache_path = require_artifact(
      artifact(cfg, cache_name(cache_stem(variant, cfg.layer))), "build-cache");
  const fs::path model_path =
      require_artifact(artifact(cfg, backbone_name(variant)), "train-backbone");
  const fs::path val_path =
      require_artifact(artifact(cfg, dataset_name("val")), "gen-data");
  Cache c = load_cache(cache_path);
  const Backbone m = load_backbone(model_path);
  const Dataset val = load_dataset(val_path);
  const std::vector<double> grid = grid_flag.empty() ? default_theta_grid() : grid_flag;
  const double chosen = tune_theta(c, m, val, grid, cfg.workers);
  // Re-scored per grid point for the report; the argmax must agree with the
  // tuner (same accuracy, smaller-theta tie rule).
  std::vector<double> accs;
  accs.reserve(grid.size());
  for (double theta : grid) {
    Cache probe = c;
    probe.theta = theta;
    accs.push_back(cache_accuracy(probe, m, val, Continuous{}, cfg.workers));
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < accs.size(); ++i)
    if (accs[i] > accs[best]) best = i;
  if (grid[best] != chosen)
    throw NumericError("theta report disagrees with the tuner");
  c.theta = chosen;
  save_cache(c, cache_path);
  const fs::path report = artifact(cfg, "theta_" + cache_stem(variant, cfg.layer) + ".json");
  json j;
  j["variant"] = variant;
  j["layer"] = cfg.layer;
  j["grid"] = grid;
  j["val_top1"] = accs;
  j["theta"] = chosen;
  write_text(report, j.dump(2) + "\n");
  json echo;
  echo["variant"] = variant;
  echo["layer"] = cfg.layer;
  echo["grid"] = grid;
  write_provenance("tune-theta", echo, {model_path, val_path}, {cache_path, report});
  std::cout << "tune-theta: chose theta " << format_double(chosen)
            << " (val top-1 " << format_double(accs[best]) << ") -> "
            << cache_path.filename().string() << "\n";
}

void cmd_compress(const ExperimentConfig& cfg, const std::string& variant,
                  const std::string& method, Index budget) {
  const fs::path cache_path = require_artifact(
      artifact(cfg, cache_name(cache_stem(variant, cfg.layer))), "build-cache");
  const Cache c = load_cache(cache_path);
  if (budget < 1) throw ParamError("--budget must be positive");
  CompressionMethod spec;
  std::string suffix;
  json echo;
  echo["variant"] = variant;
  echo["layer"] = cfg.layer;
  echo["method"] = method;
  echo["budget"] = budget;
  if (method == "kmeans") {
    ClusterCompression cc;
    cc.kmeans.n_clusters = budget;
    cc.kmeans.batch_size = cfg.kmeans_batch;
    cc.kmeans.iterations = cfg.kmeans_iterations;
    cc.kmeans.seed = cfg.seed;
    cc.per_class = cfg.kmeans_per_class;
    spec = cc;
    suffix = "kmeans" + std::to_string(budget);
    echo["batch_size"] = cc.kmeans.batch_size;
    echo["iterations"] = cc.kmeans.iterations;
    echo["per_class"] = cc.per_class;
    echo["seed"] = cc.kmeans.seed;
  } else if (method == "pca") {
    PcaCompression pc;
    pc.out_dim = budget;
    pc.batch_size = cfg.pca_batch;
    spec = pc;
    suffix = "pca" + std::to_string(budget);
    echo["batch_size"] = pc.batch_size;
  } else {
    throw ParamError("unknown compression method '" + method +
                     "' (expected kmeans or pca)");
  }
  const Cache small = compress_cache(c, spec);
  const fs::path out = artifact(
      cfg, cache_name(cache_stem(variant, cfg.layer) + "_" + suffix));
  save_cache(small, out);
  write_provenance("compress", echo, {cache_path}, {out});
  std::cout << "compress: " << c.size() << " x " << c.dim() << " -> "
            << small.size() << " x " << small.dim() << " keys -> "
            << out.filename().string() << "\n";
}

void cmd_eval_clean(const ExperimentConfig& cfg, const std::string& variant,
                    const std::string& cache_file) {
  const fs::path model_path =
      require_artifact(artifact(cfg, backbone_name(variant)), "train-backbone");
  const fs::path test_path =
      require_artifact(artifact(cfg, dataset_name("test")), "gen-data");
  const std::string cname =
      cache_file.empty() ? cache_name(cache_stem(variant, cfg.layer)) : cache_file;
  const fs::path cache_path = require_artifact(artifact(cfg, cname), "build-cache");
  const std::string stem = stem_from_cache_file(cname);
  const Backbone m = load_backbone(model_path);
  const Dataset test = load_dataset(test_path);
  const Cache c = load_cache(cache_path);

  const double bb = top1_accuracy(m, test);
  const double cont = cache_accuracy(c, m, test, Continuous{}, cfg.workers);
  const double knn = cache_accuracy(c, m, test, Knn{cfg.knn_k}, cfg.workers);

  std::ostringstream csv;
  csv << "model,method,top1\n";
  csv << "backbone,argmax," << format_double(bb) << "\n";
  csv << "cache,continuous," << format_double(cont) << "\n";
  csv << "cache,knn" << cfg.knn_k << "," << format_double(knn) << "\n";
  const fs::path out_csv = artifact(cfg, "clean_" + stem + ".csv");
  write_text(out_csv, csv.str());

  json echo;
  echo["variant"] = variant;
  echo["cache"] = cname;
  echo["knn_k"] = cfg.knn_k;
  json j;
  j["config"] = echo;
  j["rows"] = json::array();
  j["rows"].push_back({{"model", "backbone"}, {"method", "argmax"}, {"top1", bb}});
  j["rows"].push_back({{"model", "cache"}, {"method", "continuous"}, {"top1", cont}});
  j["rows"].push_back(
      {{"model", "cache"}, {"method", "knn" + std::to_string(cfg.knn_k)}, {"top1", knn}});
  const fs::path out_json = artifact(cfg, "clean_" + stem + ".json");
  write_text(out_json, j.dump(2) + "\n");

  write_provenance("eval-clean", echo, {model_path, test_path, cache_path},
                   {out_csv, out_json});
  std::cout << "eval-clean: backbone " << format_double(bb) << ", cache continuous "
            << format_double(cont) << ", knn" << cfg.knn_k << " "
            << format_double(knn) << " -> " << out_csv.filename().string() << "\n";
}

void cmd_eval_adv(const ExperimentConfig& cfg, const std::string& variant,
                  const std::string& threat, const std::vector<double>& eps_flag,
                  const std::string& cache_file, Index samples) {
  const fs::path model_path =
      require_artifact(artifact(cfg, backbone_name(variant)), "train-backbone");
  const fs::path test_path =
      require_artifact(artifact(cfg, dataset_name("test")), "gen-data");
  const Backbone m = load_backbone(model_path);
  const Dataset test = head_subset(load_dataset(test_path), samples);

  ThreatModel tm;
  if (threat == "white") tm.kind = ThreatKind::White;
  else if (threat == "gray") tm.kind = ThreatKind::Gray;
  else if (threat == "black") tm.kind = ThreatKind::Black;
  else
    throw ParamError("unknown threat model '" + threat +
                     "' (expected white, gray, or black)");

  Backbone surrogate;
  if (tm.kind == ThreatKind::Black) {
    const fs::path spath =
        require_artifact(artifact(cfg, backbone_name("surrogate")), "train-backbone");
    surrogate = load_backbone(spath);
    tm.surrogate = &surrogate;
  }

  // The cache is optional under white/black (the backbone is still
  // evaluated) and mandatory under gray, where it is the defended model.
  const std::string cname =
      cache_file.empty() ? cache_name(cache_stem(variant, cfg.layer)) : cache_file;
  const fs::path cache_path = artifact(cfg, cname);
  std::optional<Cache> cache;
  if (tm.kind == ThreatKind::Gray) {
    require_artifact(cache_path, "build-cache");
    cache = load_cache(cache_path);
  } else if (!cache_file.empty() || fs::exists(cache_path)) {
    require_artifact(cache_path, "build-cache");
    cache = load_cache(cache_path);
  }
  const std::string stem =
      cache ? stem_from_cache_file(cname) : cache_stem(variant, cfg.layer);

  const std::vector<double> eps = eps_flag.empty() ? cfg.sweep : eps_flag;
  AttackConfig base = cfg.attack;
  base.seed = cfg.seed;
  const RetrievalMethod method = parse_method(cfg, cfg.method);

  const AccuracyTable table =
      run_threat_scenario(tm, m, cache ? &*cache : nullptr, method, test, eps,
                          base, cfg.workers);

  json echo;
  echo["variant"] = variant;
  echo["threat"] = threat;
  echo["epsilons"] = eps;
  echo["stepsize"] = base.stepsize;
  echo["iterations"] = base.iterations;
  echo["random_start"] = base.random_start;
  echo["seed"] = base.seed;
  echo["samples"] = test.size();
  echo["method"] = method_label(cfg, cfg.method);
  if (cache) echo["cache"] = cname;

  const fs::path out_csv = artifact(cfg, "adv_" + stem + "_" + threat + ".csv");
  const fs::path out_json = artifact(cfg, "adv_" + stem + "_" + threat + ".json");
  table.write_csv(out_csv);
  table.write_json(out_json, echo.dump());
  std::vector<fs::path> inputs = {model_path, test_path};
  if (cache) inputs.push_back(cache_path);
  if (tm.kind == ThreatKind::Black)
    inputs.push_back(artifact(cfg, backbone_name("surrogate")));
  write_provenance("eval-adv", echo, inputs, {out_csv, out_json});

  std::ostringstream summary;
  for (const auto& r : table.rows)
    if (r.epsilon == cfg.headline_epsilon)
      summary << " " << r.model << " " << format_double(r.top1);
  std::cout << "eval-adv: " << threat << " box, " << test.size() << " samples;"
            << (summary.str().empty() ? std::string(" no headline-epsilon row")
                                      : " top-1 at eps " +
                                            format_double(cfg.headline_epsilon) +
                                            ":" + summary.str())
            << " -> " << out_csv.filename().string() << "\n";
}

void cmd_eval_corrupt(const ExperimentConfig& cfg, const std::string& variant,
                      const std::string& model_kind, const std::string& cache_file) {
  const fs::path model_path =
      require_artifact(artifact(cfg, backbone_name(variant)), "train-backbone");
  const fs::path ref_path =
      require_artifact(artifact(cfg, backbone_name("reference")), "train-backbone");
  const fs::path test_path =
      require_artifact(artifact(cfg, dataset_name("test")), "gen-data");
  const Backbone m = load_backbone(model_path);
  const Backbone ref = load_backbone(ref_path);
  const Dataset test = load_dataset(test_path);
  const CorruptionSuite suite = resolve_suite(cfg);

  ClassifierFn model_fn;
  std::string stem;
  std::optional<Cache> cache;
  fs::path cache_path;
  if (model_kind == "backbone") {
    model_fn = [&m](const Vector& x) { return forward(m, x); };
    stem = variant + "_backbone";
  } else if (model_kind == "cache") {
    const std::string cname =
        cache_file.empty() ? cache_name(cache_stem(variant, cfg.layer)) : cache_file;
    cache_path = artifact(cfg, cname);
    require_artifact(cache_path, "build-cache");
    cache = load_cache(cache_path);
    const RetrievalMethod method = parse_method(cfg, cfg.method);
    // Severe corruptions can zero out a ReLU embedding, leaving no query
    // direction; score that as an abstention (uniform output) instead of
    // aborting the sweep.
    model_fn = [&cache, &m, method](const Vector& x) {
      try {
        return cache_predict(*cache, m, x, method);
      } catch (const NumericError&) {
        return Vector(Vector::Constant(cache->num_classes(),
                                       1.0 / static_cast<double>(cache->num_classes())));
      }
    };
    stem = stem_from_cache_file(cname) + "_cache";
  } else {
    throw ParamError("unknown model kind '" + model_kind +
                     "' (expected backbone or cache)");
  }
  const ClassifierFn ref_fn = [&ref](const Vector& x) { return forward(ref, x); };

  const RobustnessReport report =
      evaluate_corruption_robustness(model_fn, ref_fn, suite, test, cfg.workers);

  const fs::path out_csv = artifact(cfg, "corrupt_" + stem + ".csv");
  const fs::path out_json = artifact(cfg, "corrupt_" + stem + ".json");
  report.write_csv(out_csv);
  report.write_json(out_json);

  json echo;
  echo["variant"] = variant;
  echo["model"] = model_kind;
  echo["suite_seed"] = suite.seed;
  if (!cfg.schedule_file.empty()) echo["schedule"] = cfg.schedule_file;
  if (cache) echo["cache"] = cache_path.filename().string();
  if (model_kind == "cache") echo["method"] = method_label(cfg, cfg.method);
  std::vector<fs::path> inputs = {model_path, ref_path, test_path};
  if (cache) inputs.push_back(cache_path);
  if (!cfg.schedule_file.empty()) inputs.push_back(fs::path(cfg.schedule_file));
  write_provenance("eval-corrupt", echo, inputs, {out_csv, out_json});

  std::cout << "eval-corrupt: " << stem << " mCE " << format_double(report.mce)
            << " over " << report.corruption_names.size() << " corruptions -> "
            << out_csv.filename().string() << "\n";
}

// The four-quadrant summary: cache off/on crossed with robust-feature
// (corruption-augmented) training off/on. Backbone rows take their attacked
// accuracy from the white-box sweep, cache rows from the gray-box sweep;
// both pair it with the matching corruption mCE.
void cmd_report(const ExperimentConfig& cfg, bool quadrants) {
  if (!quadrants) throw ParamError("report: nothing to do; pass --quadrants");
  const double eps = cfg.headline_epsilon;

  auto load_json = [](const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open '" + p.string() + "'");
    return json::parse(in);
  };
  auto adv_top1 = [&](const fs::path& p, const std::string& model,
                      const std::string& threat) {
    const json j = load_json(p);
    for (const auto& r : j.at("rows"))
      if (r.at("model") == model && r.at("threat") == threat &&
          std::abs(r.at("epsilon").get<double>() - eps) < 1e-12)
        return r.at("top1").get<double>();
    throw FormatError("'" + p.string() + "' has no " + model + "/" + threat +
                      " row at epsilon " + format_double(eps) +
                      "; rerun 'eval-adv' with that epsilon in --eps");
  };
  auto mce_of = [&](const fs::path& p) {
    return load_json(p).at("mce").get<double>();
  };

  struct QuadRow {
    const char* cache;
    const char* robust;
    std::string model;
    double adv;
    double mce;
  };
  std::vector<QuadRow> rows;
  std::vector<fs::path> inputs;
  for (const std::string variant : {"standard", "augmented"}) {
    const std::string stem = cache_stem(variant, cfg.layer);
    const fs::path adv_white =
        require_artifact(artifact(cfg, "adv_" + stem + "_white.json"), "eval-adv");
    const fs::path adv_gray =
        require_artifact(artifact(cfg, "adv_" + stem + "_gray.json"), "eval-adv");
    const fs::path cor_bb = require_artifact(
        artifact(cfg, "corrupt_" + variant + "_backbone.json"), "eval-corrupt");
    const fs::path cor_cache = require_artifact(
        artifact(cfg, "corrupt_" + stem + "_cache.json"), "eval-corrupt");
    const char* robust = variant == "augmented" ? "yes" : "no";
    rows.push_back({"no", robust, "backbone_" + variant,
                    adv_top1(adv_white, "backbone", "white"), mce_of(cor_bb)});
    rows.push_back({"yes", robust, "cache_" + variant,
                    adv_top1(adv_gray, "cache", "gray"), mce_of(cor_cache)});
    inputs.insert(inputs.end(), {adv_white, adv_gray, cor_bb, cor_cache});
  }

  std::ostringstream csv;
  csv << "cache,robust_features,model,adv_top1,mce\n";
  for (const auto& r : rows)
    csv << r.cache << "," << r.robust << "," << r.model << ","
        << format_double(r.adv) << "," << format_double(r.mce) << "\n";
  const fs::path out_csv = artifact(cfg, "quadrants.csv");
  write_text(out_csv, csv.str());

  json j;
  j["headline_epsilon"] = eps;
  j["rows"] = json::array();
  for (const auto& r : rows)
    j["rows"].push_back({{"cache", r.cache},
                         {"robust_features", r.robust},
                         {"model", r.model},
                         {"adv_top1", r.adv},
                         {"mce", r.mce}});
  const fs::path out_json = artifact(cfg, "quadrants.json");
  write_text(out_json, j.dump(2) + "\n");

  json echo;
  echo["layer"] = cfg.layer;
  echo["headline_epsilon"] = eps;
  write_provenance("report", echo, inputs, {out_csv, out_json});

  std::cout << "report: 2x2 summary at eps " << format_double(eps) << " -> "
            << out_csv.filename().string() << "\n";
  for (const auto& r : rows)
    std::cout << "  cache=" << r.cache << " robust=" << r.robust << "  adv top-1 "
              << format_double(r.adv) << "  mCE " << format_double(r.mce) << "\n";
}

void add_common_flags(CLI::App* sub, ExperimentConfig& cfg, std::string& config_path) {
  sub->add_option("-c,--config", config_path,
                  "INI config file (applied before flags; flags override)");
  sub->add_option("-o,--out", cfg.out_dir,
                  "output directory (default: $EPICACHE_OUT or ./out)");
  sub->add_option("-s,--seed", cfg.seed, "global experiment seed");
  sub->add_option("-j,--workers", cfg.workers,
                  "worker threads (0 = logical cores)");
}

}  // namespace

int main(int argc, char** argv) {
  ExperimentConfig cfg;
  if (const char* env = std::getenv("EPICACHE_OUT"); env != nullptr && *env != '\0')
    cfg.out_dir = env;

  try {
    const std::string pre = scan_config_flag(argc, argv);
    if (!pre.empty()) apply_config_file(cfg, pre);
  } catch (const std::exception& e) {
    std::cerr << "error: " << one_line(e.what()) << "\n";
    return 1;
  }

  CLI::App app{"episodic-cache classifier pipeline"};
  app.require_subcommand(1);
  std::string config_path;  // consumed by the pre-scan; accepted here so
                            // CLI11 does not reject the flag

  std::string variant = "standard";
  std::string split = "train";
  std::string threat = "white";
  std::string comp_method = "kmeans";
  std::string model_kind = "backbone";
  std::string cache_file;
  std::vector<double> grid_flag;
  std::vector<double> eps_flag;
  Index budget = 0;
  Index samples = 0;
  bool quadrants = false;

  auto* gen = app.add_subcommand("gen-data", "generate the dataset splits");
  add_common_flags(gen, cfg, config_path);
  gen->add_option("--classes", cfg.data.num_classes, "number of classes");
  gen->add_option("--width", cfg.data.width, "image side length");
  gen->add_option("--per-class", cfg.data.per_class, "samples per class before splitting");
  gen->callback([&] { cmd_gen_data(cfg); });

  auto* tb = app.add_subcommand("train-backbone", "train a backbone variant");
  add_common_flags(tb, cfg, config_path);
  tb->add_option("--variant", variant,
                 "standard | augmented | reference | surrogate");
  tb->callback([&] { cmd_train_backbone(cfg, variant); });

  auto* ex = app.add_subcommand("extract", "extract embeddings for a split");
  add_common_flags(ex, cfg, config_path);
  ex->add_option("--variant", variant, "backbone variant");
  ex->add_option("--layer", cfg.layer, "hidden_relu | softmax_probs");
  ex->add_option("--split", split, "train | val | test");
  ex->callback([&] { cmd_extract(cfg, variant, split); });

  auto* bc = app.add_subcommand("build-cache", "build the episodic cache");
  add_common_flags(bc, cfg, config_path);
  bc->add_option("--variant", variant, "backbone variant");
  bc->add_option("--layer", cfg.layer, "hidden_relu | softmax_probs");
  bc->add_option("--theta", cfg.theta, "similarity sharpness");
  bc->callback([&] { cmd_build_cache(cfg, variant); });

  auto* tt = app.add_subcommand("tune-theta", "pick theta on the validation split");
  add_common_flags(tt, cfg, config_path);
  tt->add_option("--variant", variant, "backbone variant");
  tt->add_option("--layer", cfg.layer, "hidden_relu | softmax_probs");
  tt->add_option("--grid", grid_flag, "comma-separated theta grid")->delimiter(',');
  tt->callback([&] { cmd_tune_theta(cfg, variant, grid_flag); });

  auto* cp = app.add_subcommand("compress", "compress a cache (kmeans or pca)");
  add_common_flags(cp, cfg, config_path);
  cp->add_option("--variant", variant, "backbone variant");
  cp->add_option("--layer", cfg.layer, "hidden_relu | softmax_probs");
  cp->add_option("--method", comp_method, "kmeans | pca");
  cp->add_option("--budget", budget, "clusters (kmeans) or output dim (pca)")
      ->required();
  cp->callback([&] { cmd_compress(cfg, variant, comp_method, budget); });

  auto* ec = app.add_subcommand("eval-clean", "clean test accuracy of backbone and cache");
  add_common_flags(ec, cfg, config_path);
  ec->add_option("--variant", variant, "backbone variant");
  ec->add_option("--layer", cfg.layer, "hidden_relu | softmax_probs");
  ec->add_option("--cache", cache_file, "cache file name (default: the uncompressed cache)");
  ec->add_option("--knn", cfg.knn_k, "k for the k-NN read-out row");
  ec->callback([&] { cmd_eval_clean(cfg, variant, cache_file); });

  auto* ea = app.add_subcommand("eval-adv", "targeted-attack accuracy sweep");
  add_common_flags(ea, cfg, config_path);
  ea->add_option("--variant", variant, "backbone variant");
  ea->add_option("--layer", cfg.layer, "hidden_relu | softmax_probs");
  ea->add_option("--threat", threat, "white | gray | black");
  ea->add_option("--eps", eps_flag, "comma-separated epsilon sweep")->delimiter(',');
  ea->add_option("--cache", cache_file, "cache file name (default: the uncompressed cache)");
  ea->add_option("--samples", samples, "attack only the first N test samples (0 = all)");
  ea->add_option("--method", cfg.method, "cache read-out: continuous | knn");
  ea->callback([&] { cmd_eval_adv(cfg, variant, threat, eps_flag, cache_file, samples); });

  auto* eo = app.add_subcommand("eval-corrupt", "corruption-error report (CE / mCE)");
  add_common_flags(eo, cfg, config_path);
  eo->add_option("--variant", variant, "backbone variant");
  eo->add_option("--layer", cfg.layer, "hidden_relu | softmax_probs");
  eo->add_option("--model", model_kind, "backbone | cache");
  eo->add_option("--cache", cache_file, "cache file name (default: the uncompressed cache)");
  eo->add_option("--method", cfg.method, "cache read-out: continuous | knn");
  eo->callback([&] { cmd_eval_corrupt(cfg, variant, model_kind, cache_file); });

  auto* rp = app.add_subcommand("report", "assemble summary tables");
  add_common_flags(rp, cfg, config_path);
  rp->add_option("--layer", cfg.layer, "hidden_relu | softmax_probs");
  rp->add_flag("--quadrants", quadrants,
               "2x2 table: cache on/off x robust features on/off");
  rp->add_option("--eps", cfg.headline_epsilon, "headline epsilon for attack cells");
  rp->callback([&] { cmd_report(cfg, quadrants); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
