#include <epicache/embeddings.hpp>

#include <epicache/io.hpp>

#include <string>

namespace epicache {

void LabeledEmbeddings::validate() const {
  if (vectors.rows() != labels.size())
    throw ShapeError("embeddings: " + std::to_string(vectors.rows()) +
                     " vectors but " + std::to_string(labels.size()) +
                     " labels");
  if (num_classes < 1) throw ParamError("embeddings need a class count");
  for (Index i = 0; i < labels.size(); ++i)
    if (labels(i) < 0 || labels(i) >= num_classes)
      throw ParamError("embedding label out of range at row " +
                       std::to_string(i));
  if (!vectors.allFinite())
    throw NumericError("embeddings contain non-finite values");
}

LabeledEmbeddings extract_embeddings(const Backbone& m, const Dataset& data,
                                     EmbeddingLayer layer, unsigned workers) {
  m.validate();
  data.validate();
  if (data.pixels() != m.input_dim())
    throw ShapeError("dataset pixels " + std::to_string(data.pixels()) +
                     " do not match backbone input dim " +
                     std::to_string(m.input_dim()));
  LabeledEmbeddings out;
  out.layer = layer;
  out.num_classes = m.num_classes();
  out.backbone_id = backbone_digest(m);
  const Index dim =
      layer == EmbeddingLayer::HiddenRelu ? m.hidden_dim() : m.num_classes();
  out.vectors.resize(data.size(), dim);
  out.labels = data.labels;
  parallel_for(
      data.size(),
      [&](Index i) {
        out.vectors.row(i) =
            embed(m, data.images.row(i).transpose(), layer).transpose();
      },
      workers);
  out.validate();
  return out;
}

void save_embeddings(const LabeledEmbeddings& e,
                     const std::filesystem::path& path) {
  e.validate();
  BinaryWriter w;
  w.magic("EPEM");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(e.size()));
  w.u32(static_cast<std::uint32_t>(e.dim()));
  w.u32(static_cast<std::uint32_t>(e.num_classes));
  w.u8(static_cast<std::uint8_t>(e.layer));
  w.str(e.backbone_id);
  w.i32_vector(e.labels);
  w.f32_matrix(e.vectors);
  w.save(path);
}

LabeledEmbeddings load_embeddings(const std::filesystem::path& path) {
  BinaryReader r = BinaryReader::from_file(path);
  r.expect_magic("EPEM", "embeddings");
  r.expect_version(1, "embeddings");
  const Index n = static_cast<Index>(r.u32());
  const Index dim = static_cast<Index>(r.u32());
  LabeledEmbeddings e;
  e.num_classes = static_cast<Index>(r.u32());
  const std::uint8_t layer = r.u8();
  if (layer > 1)
    throw FormatError("embeddings file has unknown layer tag " +
                      std::to_string(layer));
  e.layer = static_cast<EmbeddingLayer>(layer);
  e.backbone_id = r.str();
  e.labels = r.i32_vector(n);
  e.vectors = r.f32_matrix(n, dim);
  e.validate();
  return e;
}

}  // namespace epicache
