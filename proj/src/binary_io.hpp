#pragma once

// Little-endian fixed-width encoding shared by the trace and checkpoint
// containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "avss/error.hpp"

namespace avss::detail {

template <class T>
inline auto to_unsigned_bits(T value) {
  if constexpr (std::is_same_v<T, float>) {
    return std::bit_cast<std::uint32_t>(value);
  } else if constexpr (std::is_same_v<T, double>) {
    return std::bit_cast<std::uint64_t>(value);
  } else {
    return static_cast<std::make_unsigned_t<T>>(value);
  }
}

// Appends the little-endian bytes of each element to `out`.
template <class T>
void append_le(std::vector<char>& out, std::span<const T> values) {
  const std::size_t offset = out.size();
  out.resize(offset + values.size_bytes());
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + offset, values.data(), values.size_bytes());
  } else {
    char* dst = out.data() + offset;
    for (const T& v : values) {
      auto bits = to_unsigned_bits(v);
      for (std::size_t b = 0; b < sizeof(T); ++b) {
        *dst++ = static_cast<char>((bits >> (8 * b)) & 0xff);
      }
    }
  }
}

template <class T>
void append_le(std::vector<char>& out, T value) {
  append_le(out, std::span<const T>(&value, 1));
}

// Decodes `count` little-endian values of type T from `bytes`.
template <class T>
std::vector<T> decode_le(const char* bytes, std::size_t count) {
  std::vector<T> values(count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(values.data(), bytes, count * sizeof(T));
  } else {
    using U = decltype(to_unsigned_bits(T{}));
    for (std::size_t i = 0; i < count; ++i) {
      U bits = 0;
      for (std::size_t b = 0; b < sizeof(T); ++b) {
        bits |= static_cast<U>(static_cast<unsigned char>(bytes[i * sizeof(T) + b])) << (8 * b);
      }
      std::memcpy(&values[i], &bits, sizeof(T));
    }
  }
  return values;
}

template <class T>
T decode_le_one(const char* bytes) {
  return decode_le<T>(bytes, 1).front();
}

// Writes `bytes` to `out`, tracking the running offset for error reports.
inline void write_bytes(std::ostream& out, const std::vector<char>& bytes, std::uint64_t& offset) {
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw IoError("write failed at byte offset " + std::to_string(offset));
  }
  offset += bytes.size();
}

// Reads up to `count` bytes; returns how many were actually available.
inline std::size_t read_up_to(std::istream& in, char* dst, std::size_t count) {
  in.read(dst, static_cast<std::streamsize>(count));
  return static_cast<std::size_t>(in.gcount());
}

// Reads everything left in the stream.
inline std::vector<char> read_rest(std::istream& in) {
  std::vector<char> rest;
  char chunk[1 << 16];
  while (true) {
    const std::size_t got = read_up_to(in, chunk, sizeof(chunk));
    rest.insert(rest.end(), chunk, chunk + got);
    if (got < sizeof(chunk)) break;
  }
  return rest;
}

}  // namespace avss::detail
