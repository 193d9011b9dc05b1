#pragma once

#include <epicache/backbone.hpp>
#include <epicache/common.hpp>
#include <epicache/dataset.hpp>

#include <filesystem>
#include <string>

namespace epicache {

// Raw (pre-normalization) activations for a dataset split, tagged with the
// layer and the digest of the backbone that produced them.
struct LabeledEmbeddings {
  Matrix vectors;    // N x dim
  IntVector labels;  // N
  EmbeddingLayer layer = EmbeddingLayer::HiddenRelu;
  Index num_classes = 0;
  std::string backbone_id;

  Index size() const { return vectors.rows(); }
  Index dim() const { return vectors.cols(); }
  void validate() const;
};

LabeledEmbeddings extract_embeddings(const Backbone& m, const Dataset& data,
                                     EmbeddingLayer layer, unsigned workers = 0);

void save_embeddings(const LabeledEmbeddings& e, const std::filesystem::path& path);
LabeledEmbeddings load_embeddings(const std::filesystem::path& path);

}  // namespace epicache
