#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "fusedesc/errors.hpp"

namespace fusedesc::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

// Appends little-endian primitives to a byte buffer.
class ByteWriter {
 public:
  void magic(std::string_view m) { bytes_.insert(bytes_.end(), m.begin(), m.end()); }

  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f32(float v) { put(v); }
  void f64(double v) { put(v); }

  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }

  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }

 private:
  template <class V>
  void put(V v) {
    raw(&v, sizeof v);
  }

  std::vector<std::uint8_t> bytes_;
};

// Bounds-checked little-endian reader. Every failure carries the offset at
// which the read was attempted.
class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}

  std::uint64_t offset() const noexcept { return pos_; }
  std::uint64_t remaining() const noexcept { return bytes_.size() - pos_; }
  bool at_end() const noexcept { return pos_ == bytes_.size(); }

  void expect_magic(std::string_view m) {
    need(m.size(), "magic");
    if (std::memcmp(bytes_.data() + pos_, m.data(), m.size()) != 0) {
      throw FormatError("bad magic, expected \"" + std::string(m) + "\"", pos_);
    }
    pos_ += m.size();
  }

  std::uint8_t u8(const char* what = "u8") {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint16_t u16(const char* what = "u16") { return get<std::uint16_t>(what); }
  std::uint32_t u32(const char* what = "u32") { return get<std::uint32_t>(what); }
  std::uint64_t u64(const char* what = "u64") { return get<std::uint64_t>(what); }
  float f32(const char* what = "f32") { return get<float>(what); }
  double f64(const char* what = "f64") { return get<double>(what); }

  void raw(void* out, std::size_t n, const char* what = "payload") {
    need(n, what);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }

  void need(std::uint64_t n, const char* what) const {
    if (n > remaining()) {
      throw FormatError(std::string("truncated file while reading ") + what, pos_);
    }
  }

  void expect_end() const {
    if (!at_end()) throw FormatError("trailing bytes after payload", pos_);
  }

 private:
  template <class V>
  V get(const char* what) {
    V v;
    raw(&v, sizeof v, what);
    return v;
  }

  std::vector<std::uint8_t> bytes_;
  std::uint64_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path,
                       const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace fusedesc::io
