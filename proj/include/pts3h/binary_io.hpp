#pragma once

// Little-endian primitives shared by the checkpoint, code and dataset file formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pts3h::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename UInt>
void write_le(std::ostream& out, UInt value) {
  std::array<char, sizeof(UInt)> bytes{};
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
  }
  out.write(bytes.data(), bytes.size());
}

template <typename UInt>
UInt read_le(std::istream& in) {
  std::array<unsigned char, sizeof(UInt)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw FormatError("unexpected end of file");
  UInt value = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    value |= static_cast<UInt>(bytes[i]) << (8 * i);
  }
  return value;
}

inline void write_u32(std::ostream& out, std::uint32_t v) { write_le(out, v); }
inline std::uint32_t read_u32(std::istream& in) { return read_le<std::uint32_t>(in); }

inline void write_i32(std::ostream& out, std::int32_t v) {
  write_le(out, std::bit_cast<std::uint32_t>(v));
}
inline std::int32_t read_i32(std::istream& in) {
  return std::bit_cast<std::int32_t>(read_le<std::uint32_t>(in));
}

inline void write_f32(std::ostream& out, double v) {
  write_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}
inline double read_f32(std::istream& in) {
  return static_cast<double>(std::bit_cast<float>(read_le<std::uint32_t>(in)));
}

inline void write_magic(std::ostream& out, std::string_view magic) {
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& in, std::string_view magic) {
  std::string got(magic.size(), '\0');
  in.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (!in || got != magic) {
    throw FormatError("bad magic: expected \"" + std::string(magic) + "\"");
  }
}

inline void expect_version(std::istream& in, std::uint32_t supported) {
  const std::uint32_t version = read_u32(in);
  if (version != supported) {
    throw FormatError("unsupported format version " + std::to_string(version));
  }
}

}  // namespace pts3h::io
