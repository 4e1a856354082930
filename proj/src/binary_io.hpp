#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <iterator>
#include <string>
#include <type_traits>

#include "cpes/error.hpp"

namespace cpes::detail {

// Little-endian encoder independent of host byte order.
class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_integral_v<T>);
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      buf_.push_back(static_cast<char>(u & 0xffu));
      if constexpr (sizeof(T) > 1) u = static_cast<U>(u >> 8);
    }
  }
  void put_f32(double value) { put(std::bit_cast<std::uint32_t>(static_cast<float>(value))); }
  void put_f64(double value) { put(std::bit_cast<std::uint64_t>(value)); }
  void put_raw(const char* data, std::size_t n) { buf_.append(data, n); }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : buf_(std::move(bytes)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      u = static_cast<U>(u | static_cast<U>(static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i)));
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  double get_f32() {
    const float f = std::bit_cast<float>(get<std::uint32_t>());
    if (!std::isfinite(f)) throw Error(ErrorCode::NonFiniteValue, "non-finite value in payload");
    return static_cast<double>(f);
  }
  double get_f64() {
    const double f = std::bit_cast<double>(get<std::uint64_t>());
    if (!std::isfinite(f)) throw Error(ErrorCode::NonFiniteValue, "non-finite value in payload");
    return f;
  }
  void get_raw(char* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n)
      throw Error(ErrorCode::TruncatedFile, "needed " + std::to_string(n) + " bytes at offset " +
                                                std::to_string(pos_) + ", file has " +
                                                std::to_string(buf_.size()));
  }

  std::string buf_;
  std::size_t pos_ = 0;
};

inline std::string slurp(std::istream& in) {
  std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (in.bad()) throw Error(ErrorCode::IoFailure, "read failed");
  return bytes;
}

}  // namespace cpes::detail
