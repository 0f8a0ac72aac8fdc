// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "scob/error.hpp"

// Little-endian primitive I/O for the on-disk formats.
namespace scob::io {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

template <typename T>
  requires std::is_arithmetic_v<T>
void write(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
  requires std::is_arithmetic_v<T>
T read(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("unexpected end of file");
  return v;
}

template <typename T>
void write_array(std::ostream& os, const T* data, std::size_t n) {
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
}

template <typename T>
void read_array(std::istream& is, T* data, std::size_t n) {
  if (!is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(T)))) {
    throw FormatError("unexpected end of file");
  }
}

inline void write_string(std::ostream& os, const std::string& s) {
  write<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, std::size_t max_len = 1u << 20) {
  auto n = read<std::uint32_t>(is);
  if (n > max_len) throw FormatError("string length out of range");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw FormatError("unexpected end of file");
  return s;
}

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char buf[4];
  if (!is.read(buf, 4) || std::memcmp(buf, magic, 4) != 0) {
    throw FormatError(std::string("bad magic bytes, expected '") + magic + "'");
  }
}

}  // namespace scob::io
