#include <epicache/io.hpp>

#include <cstring>
#include <fstream>

namespace epicache {

namespace {

template <typename T>
void append_scalar(std::vector<std::uint8_t>& buf, T v) {
  unsigned char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.insert(buf.end(), raw, raw + sizeof(T));
}

}  // namespace

void BinaryWriter::u8(std::uint8_t v) { append_scalar(buf_, v); }
void BinaryWriter::u32(std::uint32_t v) { append_scalar(buf_, v); }
void BinaryWriter::u64(std::uint64_t v) { append_scalar(buf_, v); }
void BinaryWriter::f32(float v) { append_scalar(buf_, v); }
void BinaryWriter::f64(double v) { append_scalar(buf_, v); }

void BinaryWriter::magic(const char tag[4]) {
  buf_.insert(buf_.end(), tag, tag + 4);
}

void BinaryWriter::str(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  buf_.insert(buf_.end(), s.begin(), s.end());
}

void BinaryWriter::f32_matrix(const Matrix& m) {
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) f32(static_cast<float>(m(r, c)));
}

void BinaryWriter::f64_matrix(const Matrix& m) {
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) f64(m(r, c));
}

void BinaryWriter::f64_vector(const Vector& v) {
  for (Index i = 0; i < v.size(); ++i) f64(v(i));
}

void BinaryWriter::i32_vector(const IntVector& v) {
  for (Index i = 0; i < v.size(); ++i)
    append_scalar(buf_, static_cast<std::int32_t>(v(i)));
}

void BinaryWriter::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(buf_.data()),
            static_cast<std::streamsize>(buf_.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

BinaryReader BinaryReader::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> buf(size);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(size));
  if (!in) throw IoError("short read from '" + path.string() + "'");
  return BinaryReader(std::move(buf));
}

void BinaryReader::need(std::size_t bytes) const {
  if (pos_ + bytes > buf_.size())
    throw IoError("truncated file: wanted " + std::to_string(bytes) +
                  " bytes at byte offset " + std::to_string(pos_) +
                  " but only " + std::to_string(buf_.size() - pos_) +
                  " remain");
}

template <typename T>
T BinaryReader::scalar() {
  need(sizeof(T));
  T v;
  std::memcpy(&v, buf_.data() + pos_, sizeof(T));
  pos_ += sizeof(T);
  return v;
}

std::uint8_t BinaryReader::u8() { return scalar<std::uint8_t>(); }
std::uint32_t BinaryReader::u32() { return scalar<std::uint32_t>(); }
std::uint64_t BinaryReader::u64() { return scalar<std::uint64_t>(); }
float BinaryReader::f32() { return scalar<float>(); }
double BinaryReader::f64() { return scalar<double>(); }

std::string BinaryReader::str() {
  const std::uint32_t len = u32();
  need(len);
  std::string out(reinterpret_cast<const char*>(buf_.data() + pos_), len);
  pos_ += len;
  return out;
}

void BinaryReader::expect_magic(const char tag[4], const std::string& what) {
  need(4);
  if (std::memcmp(buf_.data() + pos_, tag, 4) != 0)
    throw FormatError("not a " + what + " file: magic mismatch (expected '" +
                      std::string(tag, 4) + "')");
  pos_ += 4;
}

std::uint32_t BinaryReader::expect_version(std::uint32_t supported,
                                           const std::string& what) {
  const std::uint32_t v = u32();
  if (v != supported)
    throw FormatError(what + " version " + std::to_string(v) +
                      " unsupported (this build reads version " +
                      std::to_string(supported) + ")");
  return v;
}

Matrix BinaryReader::f32_matrix(Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = static_cast<double>(f32());
  return m;
}

Matrix BinaryReader::f64_matrix(Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = f64();
  return m;
}

Vector BinaryReader::f64_vector(Index size) {
  Vector v(size);
  for (Index i = 0; i < size; ++i) v(i) = f64();
  return v;
}

IntVector BinaryReader::i32_vector(Index size) {
  IntVector v(size);
  for (Index i = 0; i < size; ++i) v(i) = scalar<std::int32_t>();
  return v;
}

}  // namespace epicache
