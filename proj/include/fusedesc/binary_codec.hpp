#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <string>
#include <vector>

#include "fusedesc/binary_io.hpp"
#include "fusedesc/errors.hpp"

namespace fusedesc {

inline std::size_t words_for_bits(std::size_t bits) { return (bits + 63) / 64; }

// Sign-quantized descriptor. Bit j lives in word j/64 at position j%64 and is
// 1 iff element j was >= 0. Unused trailing bits are zero.
class BinaryDescriptor {
 public:
  BinaryDescriptor() = default;
  BinaryDescriptor(std::size_t bits, std::vector<std::uint64_t> words)
      : bits_(bits), words_(std::move(words)) {
    if (words_.size() != words_for_bits(bits_)) {
      throw DimensionError("binary descriptor word count does not match bit length");
    }
    if (bits_ % 64 != 0 && !words_.empty() &&
        (words_.back() >> (bits_ % 64)) != 0) {
      throw DimensionError("binary descriptor has nonzero padding bits");
    }
  }

  static BinaryDescriptor from_bits(std::span<const int> bits) {
    std::vector<std::uint64_t> w(words_for_bits(bits.size()), 0);
    for (std::size_t j = 0; j < bits.size(); ++j) {
      if (bits[j]) w[j / 64] |= std::uint64_t{1} << (j % 64);
    }
    return BinaryDescriptor(bits.size(), std::move(w));
  }

  std::size_t bits() const noexcept { return bits_; }
  std::span<const std::uint64_t> words() const noexcept { return words_; }
  bool bit(std::size_t j) const { return (words_.at(j / 64) >> (j % 64)) & 1U; }

  // Number of set bits.
  std::size_t popcount() const {
    std::size_t n = 0;
    for (auto w : words_) n += static_cast<std::size_t>(std::popcount(w));
    return n;
  }

  BinaryDescriptor complement() const {
    std::vector<std::uint64_t> w(words_.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = ~words_[i];
    if (bits_ % 64 != 0) w.back() &= (std::uint64_t{1} << (bits_ % 64)) - 1;
    return BinaryDescriptor(bits_, std::move(w));
  }

  friend bool operator==(const BinaryDescriptor&, const BinaryDescriptor&) = default;

 private:
  std::size_t bits_ = 0;
  std::vector<std::uint64_t> words_;
};

// Bit j = 1 iff d[j] >= 0 (zero maps to 1), written into `out` words.
template <class T>
void sign_quantize_into(std::span<const T> d, std::span<std::uint64_t> out) {
  std::fill(out.begin(), out.end(), 0);
  for (std::size_t j = 0; j < d.size(); ++j) {
    if (d[j] >= T{0}) out[j / 64] |= std::uint64_t{1} << (j % 64);
  }
}

template <class T>
BinaryDescriptor sign_quantize(std::span<const T> d) {
  std::vector<std::uint64_t> w(words_for_bits(d.size()));
  sign_quantize_into<T>(d, w);
  return BinaryDescriptor(d.size(), std::move(w));
}

inline std::size_t hamming_words(std::span<const std::uint64_t> a,
                                 std::span<const std::uint64_t> b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    n += static_cast<std::size_t>(std::popcount(a[i] ^ b[i]));
  }
  return n;
}

inline std::size_t hamming(const BinaryDescriptor& a, const BinaryDescriptor& b) {
  if (a.bits() != b.bits()) {
    throw DimensionError("hamming: descriptor lengths " + std::to_string(a.bits()) + " and " +
                         std::to_string(b.bits()) + " differ");
  }
  return hamming_words(a.words(), b.words());
}

// Bit count of the AND: the inner product of two bit vectors.
inline std::size_t bit_inner_product(const BinaryDescriptor& a, const BinaryDescriptor& b) {
  if (a.bits() != b.bits()) throw DimensionError("bit_inner_product: length mismatch");
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.words().size(); ++i) {
    n += static_cast<std::size_t>(std::popcount(a.words()[i] & b.words()[i]));
  }
  return n;
}

inline double normalized_hamming(const BinaryDescriptor& a, const BinaryDescriptor& b) {
  const std::size_t h = hamming(a, b);
  if (a.bits() == 0) throw DimensionError("normalized_hamming: empty descriptors");
  return static_cast<double>(h) / static_cast<double>(a.bits());
}

// ---------------------------------------------------------------------------
// Descriptor sets and the PFDS file format: "PFDS", version (u8), kind (u8:
// 0 real, 1 binary), B (u16), count (u64), payload (count*B f32 for real,
// count*ceil(B/64) u64 words for binary), then count source patch ids (u64).

enum class DescriptorKind : std::uint8_t { kReal = 0, kBinary = 1 };

inline constexpr std::uint8_t kDescriptorFileVersion = 1;

struct DescriptorSet {
  DescriptorKind kind = DescriptorKind::kReal;
  std::size_t bits = 0;  // B
  std::size_t count = 0;
  std::vector<float> real;            // count * B
  std::vector<std::uint64_t> binary;  // count * words_for_bits(B)
  std::vector<std::uint64_t> source_ids;

  std::size_t words_per_descriptor() const { return words_for_bits(bits); }

  std::span<const float> real_row(std::size_t i) const {
    return {real.data() + i * bits, bits};
  }
  std::span<const std::uint64_t> binary_row(std::size_t i) const {
    const std::size_t w = words_per_descriptor();
    return {binary.data() + i * w, w};
  }
  BinaryDescriptor descriptor(std::size_t i) const {
    const auto r = binary_row(i);
    return BinaryDescriptor(bits, {r.begin(), r.end()});
  }

  void validate() const {
    if (bits == 0 || bits > 65535) throw DimensionError("descriptor length must be in [1,65535]");
    if (source_ids.size() != count) throw DimensionError("descriptor set id count mismatch");
    if (kind == DescriptorKind::kReal) {
      if (real.size() != count * bits || !binary.empty()) {
        throw DimensionError("real descriptor payload length mismatch");
      }
    } else {
      if (binary.size() != count * words_per_descriptor() || !real.empty()) {
        throw DimensionError("binary descriptor payload length mismatch");
      }
    }
  }

  friend bool operator==(const DescriptorSet&, const DescriptorSet&) = default;
};

inline DescriptorSet quantize_set(const DescriptorSet& in) {
  if (in.kind != DescriptorKind::kReal) {
    throw CompatibilityError("quantize expects real-valued descriptors");
  }
  DescriptorSet out;
  out.kind = DescriptorKind::kBinary;
  out.bits = in.bits;
  out.count = in.count;
  out.source_ids = in.source_ids;
  const std::size_t w = out.words_per_descriptor();
  out.binary.assign(in.count * w, 0);
  for (std::size_t i = 0; i < in.count; ++i) {
    sign_quantize_into<float>(in.real_row(i),
                              std::span<std::uint64_t>(out.binary.data() + i * w, w));
  }
  return out;
}

inline std::vector<std::uint8_t> encode_descriptors(const DescriptorSet& s) {
  s.validate();
  io::ByteWriter w;
  w.magic("PFDS");
  w.u8(kDescriptorFileVersion);
  w.u8(static_cast<std::uint8_t>(s.kind));
  w.u16(static_cast<std::uint16_t>(s.bits));
  w.u64(s.count);
  if (s.kind == DescriptorKind::kReal) {
    for (float v : s.real) w.f32(v);
  } else {
    for (auto v : s.binary) w.u64(v);
  }
  for (auto id : s.source_ids) w.u64(id);
  return w.bytes();
}

inline DescriptorSet decode_descriptors(std::vector<std::uint8_t> bytes) {
  io::ByteReader r(std::move(bytes));
  r.expect_magic("PFDS");
  const auto version_at = r.offset();
  if (r.u8("version") != kDescriptorFileVersion) {
    throw FormatError("unsupported descriptor file version", version_at);
  }
  const auto kind_at = r.offset();
  const std::uint8_t kind = r.u8("kind");
  if (kind > 1) throw FormatError("unknown descriptor kind", kind_at);
  DescriptorSet s;
  s.kind = static_cast<DescriptorKind>(kind);
  const auto bits_at = r.offset();
  s.bits = r.u16("descriptor length");
  if (s.bits == 0) throw FormatError("zero descriptor length", bits_at);
  s.count = r.u64("count");
  const std::uint64_t per = s.kind == DescriptorKind::kReal
                                ? std::uint64_t{s.bits} * 4
                                : std::uint64_t{s.words_per_descriptor()} * 8;
  if (s.count > r.remaining() / (per + 8)) r.need(r.remaining() + 1, "descriptor payload");
  if (s.kind == DescriptorKind::kReal) {
    s.real.resize(s.count * s.bits);
    for (auto& v : s.real) v = r.f32("descriptor payload");
  } else {
    s.binary.resize(s.count * s.words_per_descriptor());
    const std::size_t tail = s.bits % 64;
    for (std::size_t i = 0; i < s.binary.size(); ++i) {
      const auto at = r.offset();
      s.binary[i] = r.u64("descriptor payload");
      if (tail != 0 && (i + 1) % s.words_per_descriptor() == 0 && (s.binary[i] >> tail) != 0) {
        throw FormatError("nonzero padding bits in binary descriptor", at);
      }
    }
  }
  s.source_ids.resize(s.count);
  for (auto& id : s.source_ids) id = r.u64("source ids");
  r.expect_end();
  return s;
}

inline void save_descriptors(const DescriptorSet& s, const std::filesystem::path& path) {
  io::write_file(path, encode_descriptors(s));
}

inline DescriptorSet load_descriptors(const std::filesystem::path& path) {
  return decode_descriptors(io::read_file(path));
}

// Distances CSV: pair_id,distance.
inline void write_distances_csv(std::span<const double> distances,
                                const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "pair_id,distance\n" << std::setprecision(17);
  for (std::size_t i = 0; i < distances.size(); ++i) out << i << ',' << distances[i] << '\n';
}

inline std::vector<double> read_distances_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("pair_id,distance", 0) != 0) {
    throw FormatError(path.filename().string() + ": missing header", 0);
  }
  std::vector<double> d;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto comma = line.find(',');
    std::size_t id = 0;
    double v = 0;
    try {
      id = std::stoull(line.substr(0, comma));
      v = std::stod(line.substr(comma + 1));
    } catch (const std::exception&) {
      throw FormatError(path.filename().string() + ": bad row " + std::to_string(line_no), 0);
    }
    if (comma == std::string::npos || id != d.size()) {
      throw FormatError(path.filename().string() + ": pair ids must be 0..n-1 in order", 0);
    }
    d.push_back(v);
  }
  return d;
}

}  // namespace fusedesc
