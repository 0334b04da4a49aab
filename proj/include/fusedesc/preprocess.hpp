#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fusedesc/binary_io.hpp"
#include "fusedesc/dct.hpp"
#include "fusedesc/errors.hpp"
#include "fusedesc/tensor.hpp"

namespace fusedesc {

// Input normalization fitted on a training split: scalar pixel statistics of
// L2-normalized patches, and per-coefficient statistics of their zig-zag DCT
// coefficients.
struct PreprocStats {
  double pixel_mean = 0.0;
  double pixel_std = 1.0;
  DctStats dct;
  std::string dataset_id;
};

template <class T>
Tensor<T> l2_normalize_patch(const Tensor<T>& raw) {
  double ss = 0.0;
  for (T v : raw.data()) ss += static_cast<double>(v) * v;
  if (ss == 0.0) throw DegenerateInputError("patch has zero L2 norm");
  const double inv = 1.0 / std::sqrt(ss);
  Tensor<T> out(raw.shape());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<T>(raw[i] * inv);
  return out;
}

// Divide by the patch's own L2 norm, then standardize with the training-set
// pixel statistics.
template <class T>
Tensor<T> preprocess_patch(const Tensor<T>& raw, const PreprocStats& stats) {
  Tensor<T> out = l2_normalize_patch(raw);
  for (auto& v : out.storage()) {
    v = static_cast<T>((v - stats.pixel_mean) / stats.pixel_std);
  }
  return out;
}

// Zig-zag DCT coefficients of a preprocessed patch, normalized with `stats.dct`.
template <class T>
class DctFeatures {
 public:
  DctFeatures(std::size_t patch_size, std::size_t count)
      : plan_(patch_size), zigzag_(patch_size), count_(count) {
    if (count > patch_size * patch_size) {
      throw BoundsError("DCT coefficient count " + std::to_string(count) +
                        " exceeds patch area");
    }
  }

  std::size_t count() const noexcept { return count_; }
  const DctPlan<T>& plan() const noexcept { return plan_; }

  std::vector<T> raw(const Tensor<T>& patch) const {
    return zigzag_select(dct2(patch, plan_), zigzag_, count_);
  }

  std::vector<T> normalized(const Tensor<T>& patch, const DctStats& stats) const {
    return normalize_coeffs<T>(raw(patch), stats);
  }

 private:
  DctPlan<T> plan_;
  ZigzagOrder zigzag_;
  std::size_t count_;
};

// Fits PreprocStats over `count` raw patches supplied by `patch_at(i)`.
// Two passes: pixel statistics, then DCT statistics of standardized patches
// (accumulated with Welford updates so nothing per-patch is retained).
template <class T, class PatchSource>
PreprocStats fit_preprocess_stats(std::size_t count, PatchSource&& patch_at,
                                  std::size_t patch_size, std::size_t dct_count,
                                  std::string dataset_id = {},
                                  DctNormalization mode = DctNormalization::kPerCoefficient) {
  if (count < 2) throw EmptyDatasetError("preprocessing statistics need at least 2 patches");
  PreprocStats stats;
  stats.dataset_id = std::move(dataset_id);

  double sum = 0.0, sum_sq = 0.0, pixels = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const Tensor<T> p = l2_normalize_patch<T>(patch_at(i));
    for (T v : p.data()) {
      sum += v;
      sum_sq += static_cast<double>(v) * v;
    }
    pixels += static_cast<double>(p.size());
  }
  stats.pixel_mean = sum / pixels;
  const double var = (sum_sq - pixels * stats.pixel_mean * stats.pixel_mean) / (pixels - 1.0);
  stats.pixel_std = std::max(std::sqrt(std::max(var, 0.0)), kStdFloor);

  stats.dct = DctStats::identity(dct_count);
  stats.dct.samples = count;
  if (dct_count == 0) return stats;

  DctFeatures<T> features(patch_size, dct_count);
  std::vector<double> mean(dct_count, 0.0), m2(dct_count, 0.0);
  for (std::size_t i = 0; i < count; ++i) {
    const auto c = features.raw(preprocess_patch<T>(patch_at(i), stats));
    const double n = static_cast<double>(i + 1);
    for (std::size_t j = 0; j < dct_count; ++j) {
      const double d = c[j] - mean[j];
      mean[j] += d / n;
      m2[j] += d * (c[j] - mean[j]);
    }
  }
  const double n = static_cast<double>(count);
  if (mode == DctNormalization::kGlobal) {
    // Pool: total variance = within-coefficient + between-coefficient parts.
    double gm = 0.0;
    for (double m : mean) gm += m;
    gm /= static_cast<double>(dct_count);
    double ss = 0.0;
    for (std::size_t j = 0; j < dct_count; ++j) {
      ss += m2[j] + n * (mean[j] - gm) * (mean[j] - gm);
    }
    const double sd = std::max(std::sqrt(ss / (n * dct_count - 1.0)), kStdFloor);
    stats.dct.mean.assign(dct_count, gm);
    stats.dct.stddev.assign(dct_count, sd);
    return stats;
  }
  for (std::size_t j = 0; j < dct_count; ++j) {
    stats.dct.mean[j] = mean[j];
    stats.dct.stddev[j] = std::max(std::sqrt(m2[j] / (n - 1.0)), kStdFloor);
  }
  return stats;
}

// ---------------------------------------------------------------------------
// PFST: "PFST", pixel mean (f64), pixel std (f64), F_D (u32), F_D means (f64),
// F_D stds (f64). Little-endian.

inline std::vector<std::uint8_t> encode_preproc_stats(const PreprocStats& s) {
  io::ByteWriter w;
  w.magic("PFST");
  w.f64(s.pixel_mean);
  w.f64(s.pixel_std);
  w.u32(static_cast<std::uint32_t>(s.dct.size()));
  for (double m : s.dct.mean) w.f64(m);
  for (double d : s.dct.stddev) w.f64(d);
  return w.bytes();
}

inline PreprocStats decode_preproc_stats(std::vector<std::uint8_t> bytes) {
  io::ByteReader r(std::move(bytes));
  r.expect_magic("PFST");
  PreprocStats s;
  s.pixel_mean = r.f64("pixel mean");
  const auto std_at = r.offset();
  s.pixel_std = r.f64("pixel std");
  if (!(s.pixel_std > 0.0)) throw FormatError("pixel std must be positive", std_at);
  const std::uint32_t f = r.u32("coefficient count");
  r.need(std::uint64_t{f} * 16, "DCT statistics");
  s.dct.mean.resize(f);
  s.dct.stddev.resize(f);
  for (auto& m : s.dct.mean) m = r.f64();
  for (auto& d : s.dct.stddev) {
    const auto at = r.offset();
    d = r.f64();
    if (!(d > 0.0)) throw FormatError("DCT std must be positive", at);
  }
  r.expect_end();
  return s;
}

inline void save_preproc_stats(const PreprocStats& s, const std::filesystem::path& path) {
  io::write_file(path, encode_preproc_stats(s));
}

inline PreprocStats load_preproc_stats(const std::filesystem::path& path) {
  return decode_preproc_stats(io::read_file(path));
}

}  // namespace fusedesc
