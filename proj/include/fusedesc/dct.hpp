#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "fusedesc/errors.hpp"
#include "fusedesc/tensor.hpp"

namespace fusedesc {

// Orthonormal 1D DCT-II basis: basis[k][n] = a(k) cos(pi (2n+1) k / 2N),
// a(0) = sqrt(1/N), a(k>0) = sqrt(2/N). The 2D transform is basis·X·basisᵀ.
template <class T>
class DctPlan {
 public:
  explicit DctPlan(std::size_t n) : n_(n), basis_(n * n) {
    if (n == 0) throw DimensionError("DctPlan: size must be positive");
    const double N = static_cast<double>(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double a = k == 0 ? std::sqrt(1.0 / N) : std::sqrt(2.0 / N);
      for (std::size_t i = 0; i < n; ++i) {
        basis_[k * n + i] = static_cast<T>(
            a * std::cos(std::numbers::pi * (2.0 * i + 1.0) * k / (2.0 * N)));
      }
    }
  }

  std::size_t size() const noexcept { return n_; }
  T basis(std::size_t k, std::size_t i) const { return basis_[k * n_ + i]; }
  std::span<const T> basis() const noexcept { return basis_; }

 private:
  std::size_t n_;
  std::vector<T> basis_;
};

namespace detail {

// out = L · X · Lᵀ (forward) or Lᵀ · X · L (inverse), all N×N row-major.
template <class T>
void separable_transform(std::span<const T> L, std::span<const T> X, std::size_t n,
                         bool inverse, std::span<T> out) {
  std::vector<double> tmp(n * n, 0.0);
  // tmp = X · Lᵀ  (forward)  or  X · L  (inverse)
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double l = inverse ? L[i * n + c] : L[c * n + i];
        s += static_cast<double>(X[r * n + i]) * l;
      }
      tmp[r * n + c] = s;
    }
  }
  // out = L · tmp  (forward)  or  Lᵀ · tmp  (inverse)
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double l = inverse ? L[i * n + r] : L[r * n + i];
        s += l * tmp[i * n + c];
      }
      out[r * n + c] = static_cast<T>(s);
    }
  }
}

template <class T>
void check_square(const Tensor<T>& m, std::size_t n, const char* op) {
  if (m.rank() != 2 || m.dim(0) != n || m.dim(1) != n) {
    throw DimensionError(std::string(op) + ": expected " + std::to_string(n) + "x" +
                         std::to_string(n) + " input, got " + shape_string(m.shape()));
  }
}

}  // namespace detail

template <class T>
Tensor<T> dct2(const Tensor<T>& patch, const DctPlan<T>& plan) {
  const std::size_t n = plan.size();
  detail::check_square(patch, n, "dct2");
  Tensor<T> out({n, n});
  detail::separable_transform<T>(plan.basis(), patch.data(), n, false, out.data());
  return out;
}

template <class T>
Tensor<T> idct2(const Tensor<T>& coeffs, const DctPlan<T>& plan) {
  const std::size_t n = plan.size();
  detail::check_square(coeffs, n, "idct2");
  Tensor<T> out({n, n});
  detail::separable_transform<T>(plan.basis(), coeffs.data(), n, true, out.data());
  return out;
}

// Anti-diagonal scan starting at the DC term. Odd diagonals run top-right to
// bottom-left, even diagonals bottom-left to top-right (the JPEG order).
class ZigzagOrder {
 public:
  explicit ZigzagOrder(std::size_t n) : n_(n) {
    if (n == 0) throw DimensionError("ZigzagOrder: size must be positive");
    order_.reserve(n * n);
    for (std::size_t s = 0; s + 1 < 2 * n; ++s) {
      const std::size_t lo = s < n ? 0 : s - n + 1;
      const std::size_t hi = std::min(s, n - 1);
      if (s % 2 == 1) {
        for (std::size_t r = lo; r <= hi; ++r) order_.emplace_back(r, s - r);
      } else {
        for (std::size_t r = hi + 1; r-- > lo;) order_.emplace_back(r, s - r);
      }
    }
  }

  std::size_t size() const noexcept { return n_; }
  const std::vector<std::pair<std::size_t, std::size_t>>& order() const noexcept {
    return order_;
  }

 private:
  std::size_t n_;
  std::vector<std::pair<std::size_t, std::size_t>> order_;
};

template <class T>
std::vector<T> zigzag_select(const Tensor<T>& coeffs, const ZigzagOrder& order,
                             std::size_t count) {
  const std::size_t n = order.size();
  detail::check_square(coeffs, n, "zigzag_select");
  if (count > n * n) {
    throw BoundsError("zigzag_select: requested " + std::to_string(count) +
                      " coefficients from a " + std::to_string(n) + "x" +
                      std::to_string(n) + " block");
  }
  std::vector<T> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto [r, c] = order.order()[i];
    out[i] = coeffs[r * n + c];
  }
  return out;
}

inline constexpr double kStdFloor = 1e-8;

enum class DctNormalization { kPerCoefficient, kGlobal };

struct DctStats {
  std::vector<double> mean;
  std::vector<double> stddev;
  std::size_t samples = 0;

  std::size_t size() const noexcept { return mean.size(); }

  // Zero mean, unit std: normalization is the identity.
  static DctStats identity(std::size_t count) {
    return {std::vector<double>(count, 0.0), std::vector<double>(count, 1.0), 0};
  }
};

// Mean and (n-1)-denominator standard deviation of each coefficient; std is
// floored at kStdFloor. kGlobal pools all coefficients into one mean/std pair
// and broadcasts it.
template <class T>
DctStats fit_dct_stats(std::span<const std::vector<T>> vectors,
                       DctNormalization mode = DctNormalization::kPerCoefficient) {
  if (vectors.size() < 2) {
    throw EmptyDatasetError("fit_dct_stats: need at least 2 coefficient vectors, got " +
                            std::to_string(vectors.size()));
  }
  const std::size_t f = vectors.front().size();
  for (const auto& v : vectors) {
    if (v.size() != f) throw DimensionError("fit_dct_stats: ragged coefficient vectors");
  }
  const double n = static_cast<double>(vectors.size());
  DctStats stats;
  stats.samples = vectors.size();
  if (mode == DctNormalization::kGlobal) {
    double s = 0.0;
    for (const auto& v : vectors)
      for (T x : v) s += x;
    const double m = s / (n * f);
    double ss = 0.0;
    for (const auto& v : vectors)
      for (T x : v) ss += (x - m) * (x - m);
    const double sd = std::max(std::sqrt(ss / (n * f - 1.0)), kStdFloor);
    stats.mean.assign(f, m);
    stats.stddev.assign(f, sd);
    return stats;
  }
  stats.mean.assign(f, 0.0);
  stats.stddev.assign(f, 0.0);
  for (const auto& v : vectors)
    for (std::size_t j = 0; j < f; ++j) stats.mean[j] += v[j];
  for (auto& m : stats.mean) m /= n;
  for (const auto& v : vectors) {
    for (std::size_t j = 0; j < f; ++j) {
      const double d = v[j] - stats.mean[j];
      stats.stddev[j] += d * d;
    }
  }
  for (auto& s : stats.stddev) s = std::max(std::sqrt(s / (n - 1.0)), kStdFloor);
  return stats;
}

template <class T>
std::vector<T> normalize_coeffs(std::span<const T> v, const DctStats& stats) {
  if (v.size() != stats.size()) {
    throw DimensionError("normalize_coeffs: vector has " + std::to_string(v.size()) +
                         " coefficients, stats have " + std::to_string(stats.size()));
  }
  std::vector<T> out(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) {
    out[j] = static_cast<T>((v[j] - stats.mean[j]) / stats.stddev[j]);
  }
  return out;
}

template <class T>
std::vector<T> denormalize_coeffs(std::span<const T> v, const DctStats& stats) {
  if (v.size() != stats.size()) throw DimensionError("denormalize_coeffs: length mismatch");
  std::vector<T> out(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) {
    out[j] = static_cast<T>(v[j] * stats.stddev[j] + stats.mean[j]);
  }
  return out;
}

}  // namespace fusedesc
