#pragma once

#include <epicache/common.hpp>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace epicache {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

// Append-only byte buffer for the binary artifact formats. Scalars are
// little-endian; matrices go out row-major.
class BinaryWriter {
 public:
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void magic(const char tag[4]);
  void str(const std::string& s);  // u32 length + raw bytes

  // Doubles are narrowed to f32 on write.
  void f32_matrix(const Matrix& m);
  void f64_matrix(const Matrix& m);
  void f64_vector(const Vector& v);
  void i32_vector(const IntVector& v);

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<std::uint8_t> buf_;
};

// Cursor over a fully loaded file. Any read past the end throws IoError
// naming the byte offset, so truncated files fail loudly.
class BinaryReader {
 public:
  explicit BinaryReader(std::vector<std::uint8_t> buf) : buf_(std::move(buf)) {}
  static BinaryReader from_file(const std::filesystem::path& path);

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string str();

  // FormatError with `what` context if the magic or version does not match.
  void expect_magic(const char tag[4], const std::string& what);
  std::uint32_t expect_version(std::uint32_t supported, const std::string& what);

  Matrix f32_matrix(Index rows, Index cols);
  Matrix f64_matrix(Index rows, Index cols);
  Vector f64_vector(Index size);
  IntVector i32_vector(Index size);

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t bytes) const;
  template <typename T>
  T scalar();

  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

}  // namespace epicache
