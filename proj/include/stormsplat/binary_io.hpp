#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stormsplat::io {

/// Appends little-endian encoded values to a byte buffer.
class ByteWriter {
 public:
  void magic(std::string_view tag);
  void u32(std::uint32_t value);
  void f32(float value);
  void f32_array(std::span<const float> values);
  /// Narrows each double to f32 before encoding.
  void f32_array(std::span<const double> values);
  void f64(double value);
  void f64_array(std::span<const double> values);
  void bytes(std::span<const std::uint8_t> data);

  const std::vector<std::uint8_t>& buffer() const noexcept { return buffer_; }
  std::vector<std::uint8_t> take() { return std::move(buffer_); }

 private:
  std::vector<std::uint8_t> buffer_;
};

/// Bounds-checked little-endian decoding. Every read names the field it is
/// decoding so truncation errors point at the right place.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  void expect_magic(std::string_view tag);
  std::uint32_t u32(const std::string& field);
  float f32(const std::string& field);
  void f32_array(const std::string& field, std::span<float> out);
  void f32_array(const std::string& field, std::span<double> out);
  double f64(const std::string& field);
  void f64_array(const std::string& field, std::span<double> out);
  std::span<const std::uint8_t> bytes(const std::string& field, std::size_t count);

  std::size_t remaining() const noexcept { return data_.size() - offset_; }
  std::size_t offset() const noexcept { return offset_; }
  void expect_end(const std::string& field) const;

 private:
  void require(const std::string& field, std::size_t count) const;

  std::span<const std::uint8_t> data_;
  std::size_t offset_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

/// Lower-case hex SHA-256 of a byte buffer / of a file on disk.
std::string sha256_hex(std::span<const std::uint8_t> data);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace stormsplat::io
