#pragma once

// Little-endian helpers shared by the CGCB / CGCG / CGCE / CGCH file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include "vptd/error.hpp"

namespace vptd::io {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::IoError, "write failed for " + path.string());
}

class ByteWriter {
 public:
  void magic(std::string_view m) { buf_.append(m); }

  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { buf_.append(s); }

  const std::string& data() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  template <typename U>
  void put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
  }

  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

  void expect_magic(std::string_view m) {
    if (data_.size() < m.size() || data_.substr(0, m.size()) != m) {
      throw Error(ErrorKind::BadMagic, what_ + ": expected magic " + std::string(m));
    }
    pos_ = m.size();
  }

  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(get<std::uint32_t>()); }

  std::string_view bytes(std::size_t n) {
    require(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  /// Throws TruncatedFile unless n more bytes are available.
  void require(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw Error(ErrorKind::TruncatedFile, what_ + ": need " + std::to_string(n) + " bytes at offset " +
                                                std::to_string(pos_) + ", have " +
                                                std::to_string(data_.size() - pos_));
    }
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  template <typename U>
  U get() {
    require(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string_view data_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace vptd::io
