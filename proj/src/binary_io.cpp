#include "stormsplat/binary_io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "stormsplat/errors.hpp"

namespace stormsplat::io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

void ByteWriter::magic(std::string_view tag) {
  buffer_.insert(buffer_.end(), tag.begin(), tag.end());
}

void ByteWriter::u32(std::uint32_t value) {
  for (int shift = 0; shift < 32; shift += 8) {
    buffer_.push_back(static_cast<std::uint8_t>((value >> shift) & 0xffu));
  }
}

void ByteWriter::f32(float value) { u32(std::bit_cast<std::uint32_t>(value)); }

void ByteWriter::f32_array(std::span<const float> values) {
  buffer_.reserve(buffer_.size() + 4 * values.size());
  for (float v : values) f32(v);
}

void ByteWriter::f32_array(std::span<const double> values) {
  buffer_.reserve(buffer_.size() + 4 * values.size());
  for (double v : values) f32(static_cast<float>(v));
}

void ByteWriter::f64(double value) {
  const auto bits = std::bit_cast<std::uint64_t>(value);
  u32(static_cast<std::uint32_t>(bits & 0xffffffffu));
  u32(static_cast<std::uint32_t>(bits >> 32));
}

void ByteWriter::f64_array(std::span<const double> values) {
  buffer_.reserve(buffer_.size() + 8 * values.size());
  for (double v : values) f64(v);
}

void ByteWriter::bytes(std::span<const std::uint8_t> data) {
  buffer_.insert(buffer_.end(), data.begin(), data.end());
}

void ByteReader::require(const std::string& field, std::size_t count) const {
  if (remaining() < count) {
    throw FormatError(field, "truncated payload: expected " + std::to_string(offset_ + count) +
                                 " bytes, file has " + std::to_string(data_.size()));
  }
}

void ByteReader::expect_magic(std::string_view tag) {
  require("magic", tag.size());
  std::string_view found(reinterpret_cast<const char*>(data_.data() + offset_), tag.size());
  if (found != tag) {
    // Same family, different version suffix.
    const auto prefix = tag.substr(0, 4);
    if (found.substr(0, 4) == prefix) {
      throw FormatError("version", "expected '" + std::string(tag) + "', found '" + std::string(found) + "'");
    }
    throw FormatError("magic", "expected '" + std::string(tag) + "'");
  }
  offset_ += tag.size();
}

std::uint32_t ByteReader::u32(const std::string& field) {
  require(field, 4);
  std::uint32_t value = 0;
  for (int i = 0; i < 4; ++i) {
    value |= static_cast<std::uint32_t>(data_[offset_ + i]) << (8 * i);
  }
  offset_ += 4;
  return value;
}

float ByteReader::f32(const std::string& field) { return std::bit_cast<float>(u32(field)); }

double ByteReader::f64(const std::string& field) {
  require(field, 8);
  const std::uint64_t lo = u32(field);
  const std::uint64_t hi = u32(field);
  return std::bit_cast<double>(lo | (hi << 32));
}

void ByteReader::f64_array(const std::string& field, std::span<double> out) {
  require(field, 8 * out.size());
  for (auto& v : out) v = f64(field);
}

void ByteReader::f32_array(const std::string& field, std::span<float> out) {
  require(field, 4 * out.size());
  for (auto& v : out) v = f32(field);
}

void ByteReader::f32_array(const std::string& field, std::span<double> out) {
  require(field, 4 * out.size());
  for (auto& v : out) v = static_cast<double>(f32(field));
}

std::span<const std::uint8_t> ByteReader::bytes(const std::string& field, std::size_t count) {
  require(field, count);
  auto out = data_.subspan(offset_, count);
  offset_ += count;
  return out;
}

void ByteReader::expect_end(const std::string& field) const {
  if (remaining() != 0) {
    throw FormatError(field, std::to_string(remaining()) + " unexpected trailing bytes");
  }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << text;
}

std::string sha256_hex(std::span<const std::uint8_t> data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::string hex;
  hex.reserve(2 * length);
  char buf[3];
  for (unsigned i = 0; i < length; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

}  // namespace stormsplat::io
