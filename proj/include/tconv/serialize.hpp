#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "tconv/tensor.hpp"

namespace tconv {

// Malformed or truncated binary content.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File could not be opened, read, or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  const std::array<unsigned char, 4> b{static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                       static_cast<unsigned char>(v >> 16),
                                       static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b.data()), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw FormatError("unexpected end of data");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  std::array<unsigned char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b.data()), 8);
}

inline double read_f64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) throw FormatError("unexpected end of data");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw FormatError(std::string(what) + " does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

inline void write_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char got[4] = {};
  if (!is.read(got, 4) || std::memcmp(got, magic, 4) != 0) {
    throw FormatError(std::string("bad magic, expected ") + magic);
  }
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot read " + p.string());
  return is;
}

}  // namespace io

// Four little-endian u32 dims (n, c, h, w), then little-endian f64 values.
template <typename T>
void write_tensor(std::ostream& os, const Tensor4<T>& t) {
  const Shape4 s = t.shape();
  io::write_u32(os, io::checked_u32(s.n, "n"));
  io::write_u32(os, io::checked_u32(s.c, "c"));
  io::write_u32(os, io::checked_u32(s.h, "h"));
  io::write_u32(os, io::checked_u32(s.w, "w"));
  for (T v : t.data()) io::write_f64(os, static_cast<double>(v));
}

template <typename T = double>
Tensor4<T> read_tensor(std::istream& is) {
  Shape4 s;
  s.n = io::read_u32(is);
  s.c = io::read_u32(is);
  s.h = io::read_u32(is);
  s.w = io::read_u32(is);
  Tensor4<T> t(s);
  for (auto& v : t.data()) v = static_cast<T>(io::read_f64(is));
  return t;
}

template <typename T>
void save_tensor(const std::filesystem::path& p, const Tensor4<T>& t) {
  auto os = io::open_out(p);
  write_tensor(os, t);
  if (!os) throw IoError("failed writing " + p.string());
}

template <typename T = double>
Tensor4<T> load_tensor(const std::filesystem::path& p) {
  auto is = io::open_in(p);
  return read_tensor<T>(is);
}

}  // namespace tconv
