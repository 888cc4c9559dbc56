/* Copyright 2026 The lobit Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef LOBIT_SRC_BYTE_IO_HPP_
#define LOBIT_SRC_BYTE_IO_HPP_

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "lobit/error.hpp"

namespace lobit::detail {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts need byte swaps");

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put_array(std::span<const T> v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
    buf_.insert(buf_.end(), p, p + v.size_bytes());
  }

  void put_bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void put_raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  void put_name(const std::string& s) {
    require(s.size() <= 0xFFFF, "name too long: " + s);
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    put_raw(s);
  }

  void put_crc() { put<std::uint32_t>(crc32_of(buf_)); }

  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : buf_(b) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  std::vector<T> get_array(std::size_t n) {
    require(n <= remaining() / sizeof(T), "truncated array", ErrorKind::kFormat);
    std::vector<T> v(n);
    std::memcpy(v.data(), buf_.data() + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
    return v;
  }

  std::vector<std::uint8_t> get_bytes(std::size_t n) { return get_array<std::uint8_t>(n); }

  std::string get_raw(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::string get_name() { return get_raw(get<std::uint16_t>()); }

  std::size_t remaining() const { return buf_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    require(n <= remaining(), "unexpected end of data", ErrorKind::kFormat);
  }

  std::span<const std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

inline void check_magic(std::span<const std::uint8_t> bytes, std::string_view magic) {
  require(bytes.size() >= magic.size() + 8 &&
              std::memcmp(bytes.data(), magic.data(), magic.size()) == 0,
          "bad magic, expected '" + std::string(magic) + "'", ErrorKind::kBadMagic);
}

// CRC32 over everything before the 4-byte trailer.
inline void check_crc(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= 4, "truncated container", ErrorKind::kFormat);
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  require(crc32_of(bytes.first(body)) == stored, "CRC32 mismatch", ErrorKind::kCrcMismatch);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace lobit::detail

#endif  // LOBIT_SRC_BYTE_IO_HPP_
