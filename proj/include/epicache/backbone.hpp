#pragma once

#include <epicache/common.hpp>
#include <epicache/corruptions.hpp>
#include <epicache/dataset.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace epicache {

// Two-layer MLP classifier: input -> hidden ReLU -> softmax over classes.
struct Backbone {
  Matrix w1;  // hidden x input
  Vector b1;  // hidden
  Matrix w2;  // classes x hidden
  Vector b2;  // classes

  Index input_dim() const { return w1.cols(); }
  Index hidden_dim() const { return w1.rows(); }
  Index num_classes() const { return w2.rows(); }
  void validate() const;
};

// Which activation feeds the episodic cache.
enum class EmbeddingLayer : std::uint8_t {
  HiddenRelu = 0,
  SoftmaxProbs = 1,
};

std::string layer_name(EmbeddingLayer layer);
EmbeddingLayer layer_from_name(std::string_view name);

struct ForwardTrace {
  Vector preact;  // hidden pre-activation
  Vector hidden;  // ReLU output
  Vector logits;
  Vector probs;
};

struct TrainConfig {
  Index hidden_dim = 64;
  Index epochs = 30;
  Index batch_size = 32;
  double learning_rate = 0.1;
  std::uint64_t seed = 0;
  // When set, each training sample is replaced with probability
  // augment_prob by a randomly corrupted copy (random kernel, random
  // moderate severity) every epoch.
  std::optional<CorruptionSuite> augmentation;
  double augment_prob = 0.5;
};

// Cross-entropy against an arbitrary target distribution, scaled. The
// one-hot case is the training loss; attacks reuse it with their own target.
struct LossSpec {
  Vector target;  // length = classes, nonnegative weights
  double scale = 1.0;
};

Backbone random_init(Index input_dim, Index hidden_dim, Index num_classes,
                     std::uint64_t seed);

ForwardTrace forward_trace(const Backbone& m, const Vector& x);
Vector forward(const Backbone& m, const Vector& x);  // probs only
Vector embed(const Backbone& m, const Vector& x, EmbeddingLayer layer);

// d(loss)/dx for loss = scale * sum_c target_c * (-log p_c).
Vector input_gradient(const Backbone& m, const Vector& x, const LossSpec& loss);

// d(probs)/dx, classes x input.
Matrix softmax_jacobian(const Backbone& m, const Vector& x);

struct TrainResult {
  Backbone model;
  std::vector<double> epoch_loss;  // mean cross-entropy per epoch
};

TrainResult train(const Dataset& data, const TrainConfig& cfg);

double mean_cross_entropy(const Backbone& m, const Dataset& data);
double top1_accuracy(const Backbone& m, const Dataset& data);

void save_backbone(const Backbone& m, const std::filesystem::path& path);
Backbone load_backbone(const std::filesystem::path& path);

// FNV-1a digest of the serialized checkpoint; ties embeddings to the
// weights that produced them.
std::string backbone_digest(const Backbone& m);

}  // namespace epicache
