#pragma once

// Reverse-mode differentiation over the small set of layers the descriptor
// network uses. Values live on a Tape; each recorded operation owns a closure
// that pushes its output gradient back to its inputs.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fusedesc/errors.hpp"
#include "fusedesc/parameters.hpp"
#include "fusedesc/tensor.hpp"

namespace fusedesc {

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

enum class Mode { kTrain, kEval };

// Handle to a value recorded on a tape.
struct Var {
  std::size_t index = 0;
};

template <class T>
class Tape {
 public:
  using Backprop = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Input that never receives a gradient.
  Var constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.op = "constant";
    return push(std::move(n));
  }

  // Differentiable leaf bound to a store entry. The value is read in place
  // and the gradient accumulates directly into the store.
  Var parameter(ParameterStore<T>& store, const std::string& name) {
    auto& e = store.at(name);
    Node n;
    n.external_value = &e.value;
    n.external_grad = &e.gradient;
    n.requires_grad = true;
    n.op = "parameter";
    return push(std::move(n));
  }

  // Differentiable leaf owned by the tape (used by tests to inspect input
  // gradients).
  Var variable(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = true;
    n.op = "variable";
    return push(std::move(n));
  }

  Var record(const char* op, Tensor<T> value, bool requires_grad, Backprop backprop) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backprop = std::move(backprop);
    n.op = op;
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.index);
    return n.external_value ? *n.external_value : n.value;
  }

  bool requires_grad(Var v) const { return nodes_.at(v.index).requires_grad; }

  // Gradient buffer for v, allocated (zero) on first use.
  Tensor<T>& grad(Var v) {
    Node& n = nodes_.at(v.index);
    if (n.external_grad) return *n.external_grad;
    if (n.grad.empty()) n.grad = Tensor<T>(value(v).shape());
    return n.grad;
  }

  bool has_grad(Var v) const {
    const Node& n = nodes_.at(v.index);
    return n.external_grad != nullptr || !n.grad.empty();
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const char* op_name(std::size_t i) const { return nodes_.at(i).op; }

  // Indices of operations whose backprop ran during the last backward(), in
  // visiting order.
  const std::vector<std::size_t>& backward_trace() const noexcept { return trace_; }

  // Seeds d(output)/d(output) = seed and propagates in reverse recording
  // order. Intermediate gradients are released once consumed.
  void backward(Var output, T seed = T{1}) {
    if (nodes_.empty()) throw EmptyTapeError("backward called on an empty tape");
    if (value(output).size() != 1) {
      throw DimensionError("backward requires a scalar output, got shape " +
                           shape_string(value(output).shape()));
    }
    trace_.clear();
    if (!requires_grad(output)) return;
    grad(output)[0] += seed;
    for (std::size_t i = output.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backprop || n.grad.empty()) continue;
      n.backprop(*this, i);
      trace_.push_back(i);
      n.grad = Tensor<T>();
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external_value = nullptr;
    Tensor<T> grad;
    Tensor<T>* external_grad = nullptr;
    bool requires_grad = false;
    Backprop backprop;
    const char* op = "";
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> trace_;
};

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

// Unfolds one [C,H,W] image into a [C*k*k, H*W] column matrix for a
// zero-padded stride-1 convolution with pad k/2.
template <class T>
void im2col(const T* img, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t k, T* col) {
  const long pad = static_cast<long>(k / 2);
  const long h = static_cast<long>(height), w = static_cast<long>(width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = img + c * height * width;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj, ++row) {
        T* dst = col + row * height * width;
        const long dy = static_cast<long>(ki) - pad;
        const long dx = static_cast<long>(kj) - pad;
        for (long y = 0; y < h; ++y) {
          const long sy = y + dy;
          T* out = dst + y * w;
          if (sy < 0 || sy >= h) {
            std::fill(out, out + w, T{0});
            continue;
          }
          const T* src = plane + sy * w;
          const long x0 = std::min(w, std::max(0L, -dx));
          const long x1 = std::max(x0, std::min(w, w - dx));
          std::fill(out, out + x0, T{0});
          for (long x = x0; x < x1; ++x) out[x] = src[x + dx];
          std::fill(out + x1, out + w, T{0});
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, std::size_t channels, std::size_t height,
                std::size_t width, std::size_t k, T* img) {
  const long pad = static_cast<long>(k / 2);
  const long h = static_cast<long>(height), w = static_cast<long>(width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = img + c * height * width;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj, ++row) {
        const T* src = col + row * height * width;
        const long dy = static_cast<long>(ki) - pad;
        const long dx = static_cast<long>(kj) - pad;
        for (long y = 0; y < h; ++y) {
          const long sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          T* dst = plane + sy * w;
          const T* in = src + y * w;
          const long x0 = std::max(0L, -dx);
          const long x1 = std::min(w, w - dx);
          for (long x = x0; x < x1; ++x) dst[x + dx] += in[x];
        }
      }
    }
  }
}

// Views a rank-3 [C,H,W] or rank-4 [N,C,H,W] tensor as batched planes.
struct ImageDims {
  std::size_t n, c, h, w;
  bool batched;
};

inline ImageDims image_dims(const Shape& s, const char* op) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  throw DimensionError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " +
                       shape_string(s));
}

struct RowDims {
  std::size_t n, d;
  bool batched;
};

inline RowDims row_dims(const Shape& s, const char* op) {
  if (s.size() == 2) return {s[0], s[1], true};
  if (s.size() == 1) return {1, s[0], false};
  throw DimensionError(std::string(op) + ": expected [D] or [N,D], got " +
                       shape_string(s));
}

}  // namespace detail

// Wide (same-size) convolution, stride 1, zero padding k/2.
// input [C,H,W] or [N,C,H,W]; kernels [K,C,k,k] with k odd; bias [K].
template <class T>
Var conv2d(Tape<T>& tape, Var input, Var kernels, Var bias) {
  using namespace detail;
  const auto& x = tape.value(input);
  const auto& w = tape.value(kernels);
  const auto& b = tape.value(bias);
  const ImageDims d = image_dims(x.shape(), "conv2d");
  if (w.rank() != 4 || w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0) {
    throw DimensionError("conv2d: kernels must be [K,C,k,k] with odd k, got " +
                         shape_string(w.shape()));
  }
  if (w.dim(1) != d.c) {
    throw DimensionError("conv2d: input has " + std::to_string(d.c) +
                         " channels but kernels expect " + std::to_string(w.dim(1)));
  }
  const std::size_t K = w.dim(0), k = w.dim(2);
  if (b.rank() != 1 || b.dim(0) != K) {
    throw DimensionError("conv2d: bias must be [" + std::to_string(K) + "]");
  }
  const std::size_t hw = d.h * d.w, patch = d.c * k * k;

  Shape out_shape = d.batched ? Shape{d.n, K, d.h, d.w} : Shape{K, d.h, d.w};
  Tensor<T> out(out_shape);
  AlignedVector<T> col(patch * hw);
  ConstMatMap<T> W(w.data().data(), K, patch);
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(x.data().data() + n * d.c * hw, d.c, d.h, d.w, k, col.data());
    ConstMatMap<T> C(col.data(), patch, hw);
    MatMap<T> O(out.data().data() + n * K * hw, K, hw);
    O.noalias() = W * C;
    for (std::size_t j = 0; j < K; ++j) O.row(j).array() += b[j];
  }

  const bool rg = tape.requires_grad(input) || tape.requires_grad(kernels) ||
                  tape.requires_grad(bias);
  return tape.record("conv2d", std::move(out), rg,
                     [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(Var{self});
    const auto& xv = t.value(input);
    const auto& wv = t.value(kernels);
    const bool need_w = t.requires_grad(kernels);
    const bool need_b = t.requires_grad(bias);
    const bool need_x = t.requires_grad(input);
    AlignedVector<T> colb(patch * hw);
    AlignedVector<T> dcol(need_x ? patch * hw : 0);
    ConstMatMap<T> Wb(wv.data().data(), K, patch);
    for (std::size_t n = 0; n < d.n; ++n) {
      ConstMatMap<T> G(gy.data().data() + n * K * hw, K, hw);
      if (need_w) {
        im2col(xv.data().data() + n * d.c * hw, d.c, d.h, d.w, k, colb.data());
        ConstMatMap<T> C(colb.data(), patch, hw);
        MatMap<T> GW(t.grad(kernels).data().data(), K, patch);
        GW.noalias() += G * C.transpose();
      }
      if (need_b) {
        auto& gb = t.grad(bias);
        for (std::size_t j = 0; j < K; ++j) gb[j] += G.row(j).sum();
      }
      if (need_x) {
        MatMap<T> DC(dcol.data(), patch, hw);
        DC.noalias() = Wb.transpose() * G;
        col2im_add(dcol.data(), d.c, d.h, d.w, k,
                   t.grad(input).data().data() + n * d.c * hw);
      }
    }
  });
}

// Non-overlapping 2x2 max pooling. The gradient goes to the first maximum in
// row-major window order.
template <class T>
Var maxpool2x2(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  const detail::ImageDims d = detail::image_dims(x.shape(), "maxpool2x2");
  if (d.h % 2 != 0 || d.w % 2 != 0) {
    throw DimensionError("maxpool2x2: spatial dimensions must be even, got " +
                         shape_string(x.shape()));
  }
  const std::size_t oh = d.h / 2, ow = d.w / 2;
  Shape out_shape = d.batched ? Shape{d.n, d.c, oh, ow} : Shape{d.c, oh, ow};
  Tensor<T> out(out_shape);
  std::vector<std::size_t> argmax(out.size());
  const T* src = x.data().data();
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < d.n * d.c; ++plane) {
    const std::size_t base = plane * d.h * d.w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx, ++o) {
        const std::size_t i0 = base + 2 * y * d.w + 2 * xx;
        const std::size_t cand[4] = {i0, i0 + 1, i0 + d.w, i0 + d.w + 1};
        std::size_t best = cand[0];
        for (int q = 1; q < 4; ++q) {
          if (src[cand[q]] > src[best]) best = cand[q];
        }
        out[o] = src[best];
        argmax[o] = best;
      }
    }
  }
  return tape.record("maxpool2x2", std::move(out), tape.requires_grad(input),
                     [input, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(Var{self});
    auto& gx = t.grad(input);
    for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += gy[i];
  });
}

template <class T>
Var tanh_activation(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  return tape.record("tanh", std::move(out), tape.requires_grad(input),
                     [input](Tape<T>& t, std::size_t self) {
    const auto& y = t.value(Var{self});
    const auto& gy = t.grad(Var{self});
    auto& gx = t.grad(input);
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] += gy[i] * (T{1} - y[i] * y[i]);
  });
}

// Affine map x·Wᵀ + b. input [In] or [N,In]; weights [U,In]; bias [U].
template <class T>
Var linear(Tape<T>& tape, Var input, Var weights, Var bias) {
  using namespace detail;
  const auto& x = tape.value(input);
  const auto& w = tape.value(weights);
  const auto& b = tape.value(bias);
  const RowDims d = row_dims(x.shape(), "linear");
  if (w.rank() != 2 || w.dim(1) != d.d) {
    throw DimensionError("linear: weights " + shape_string(w.shape()) +
                         " incompatible with input length " + std::to_string(d.d));
  }
  const std::size_t U = w.dim(0);
  if (b.rank() != 1 || b.dim(0) != U) {
    throw DimensionError("linear: bias must be [" + std::to_string(U) + "]");
  }
  Tensor<T> out(d.batched ? Shape{d.n, U} : Shape{U});
  {
    ConstMatMap<T> X(x.data().data(), d.n, d.d);
    ConstMatMap<T> Wm(w.data().data(), U, d.d);
    MatMap<T> Y(out.data().data(), d.n, U);
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(b.data().data(), U);
    // Row by row so a sample's output does not depend on the rest of the batch.
    for (std::size_t n = 0; n < d.n; ++n) {
      Y.row(n).noalias() = (Wm * X.row(n).transpose()).transpose();
      Y.row(n) += bv;
    }
  }
  const bool rg = tape.requires_grad(input) || tape.requires_grad(weights) ||
                  tape.requires_grad(bias);
  return tape.record("linear", std::move(out), rg,
                     [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(Var{self});
    ConstMatMap<T> G(gy.data().data(), d.n, U);
    if (t.requires_grad(weights)) {
      ConstMatMap<T> X(t.value(input).data().data(), d.n, d.d);
      MatMap<T> GW(t.grad(weights).data().data(), U, d.d);
      GW.noalias() += G.transpose() * X;
    }
    if (t.requires_grad(bias)) {
      auto& gb = t.grad(bias);
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gbv(gb.data().data(), U);
      gbv += G.colwise().sum();
    }
    if (t.requires_grad(input)) {
      ConstMatMap<T> Wm(t.value(weights).data().data(), U, d.d);
      MatMap<T> GX(t.grad(input).data().data(), d.n, d.d);
      GX.noalias() += G * Wm;
    }
  });
}

// Running statistics of one batch-norm layer, stored as non-trainable store
// entries so they travel with the checkpoint.
template <class T>
struct BatchNormState {
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  Tensor<T>* steps = nullptr;  // [1]; zero until the first train-mode pass

  static BatchNormState bind(ParameterStore<T>& store, const std::string& prefix) {
    return {&store.value(prefix + ".running_mean"), &store.value(prefix + ".running_var"),
            &store.value(prefix + ".running_steps")};
  }
};

// Per-channel normalization over batch and spatial axes of [N,C,H,W].
// Train mode uses batch statistics and updates the running estimates
// (momentum kBatchNormMomentum, unbiased variance); eval mode uses the
// running estimates.
template <class T>
Var spatial_batchnorm(Tape<T>& tape, Var input, Var gamma, Var beta,
                      BatchNormState<T> state, Mode mode) {
  const auto& x = tape.value(input);
  if (x.rank() != 4) {
    throw DimensionError("spatial_batchnorm: expected [N,C,H,W], got " +
                         shape_string(x.shape()));
  }
  const std::size_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto& g = tape.value(gamma);
  const auto& bt = tape.value(beta);
  if (g.size() != C || bt.size() != C || state.running_mean->size() != C ||
      state.running_var->size() != C) {
    throw DimensionError("spatial_batchnorm: parameter length does not match " +
                         std::to_string(C) + " channels");
  }
  const double count = static_cast<double>(N * hw);
  std::vector<T> mean(C), inv_std(C);
  if (mode == Mode::kTrain) {
    if (N < 2) throw DimensionError("spatial_batchnorm: train mode needs batch size >= 2");
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data().data() + (n * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      const double m = s / count;
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data().data() + (n * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double dv = p[i] - m;
          ss += dv * dv;
        }
      }
      const double var = ss / count;
      mean[c] = static_cast<T>(m);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + kBatchNormEpsilon));
      auto& rm = (*state.running_mean)[c];
      auto& rv = (*state.running_var)[c];
      rm = static_cast<T>((1.0 - kBatchNormMomentum) * rm + kBatchNormMomentum * m);
      rv = static_cast<T>((1.0 - kBatchNormMomentum) * rv +
                          kBatchNormMomentum * ss / (count - 1.0));
    }
    (*state.steps)[0] += T{1};
  } else {
    if ((*state.steps)[0] <= T{0}) {
      throw UninitializedStatsError(
          "spatial_batchnorm: eval mode before any train-mode pass");
    }
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = (*state.running_mean)[c];
      inv_std[c] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>((*state.running_var)[c]) + kBatchNormEpsilon));
    }
  }

  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T h = (x[off + i] - mean[c]) * inv_std[c];
        xhat[off + i] = h;
        out[off + i] = g[c] * h + bt[c];
      }
    }
  }
  const bool rg = tape.requires_grad(input) || tape.requires_grad(gamma) ||
                  tape.requires_grad(beta);
  return tape.record("spatial_batchnorm", std::move(out), rg,
                     [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                         Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(Var{self});
    const auto& gv = t.value(gamma);
    std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t off = (n * C + c) * hw;
        double a = 0.0, b2 = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
          a += gy[off + i];
          b2 += gy[off + i] * xhat[off + i];
        }
        sum_dy[c] += a;
        sum_dy_xhat[c] += b2;
      }
    }
    if (t.requires_grad(gamma)) {
      auto& gg = t.grad(gamma);
      for (std::size_t c = 0; c < C; ++c) gg[c] += static_cast<T>(sum_dy_xhat[c]);
    }
    if (t.requires_grad(beta)) {
      auto& gb = t.grad(beta);
      for (std::size_t c = 0; c < C; ++c) gb[c] += static_cast<T>(sum_dy[c]);
    }
    if (!t.requires_grad(input)) return;
    auto& gx = t.grad(input);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t off = (n * C + c) * hw;
        const T scale = gv[c] * inv_std[c];
        if (mode == Mode::kTrain) {
          const T mdy = static_cast<T>(sum_dy[c] / count);
          const T mdyx = static_cast<T>(sum_dy_xhat[c] / count);
          for (std::size_t i = 0; i < hw; ++i) {
            gx[off + i] += scale * (gy[off + i] - mdy - xhat[off + i] * mdyx);
          }
        } else {
          for (std::size_t i = 0; i < hw; ++i) gx[off + i] += scale * gy[off + i];
        }
      }
    }
  });
}

// [N, ...] -> [N, prod(...)]
template <class T>
Var flatten(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  if (x.rank() < 2) throw DimensionError("flatten: rank must be >= 2");
  const std::size_t n = x.dim(0);
  Tensor<T> out = x.reshaped({n, x.size() / n});
  return tape.record("flatten", std::move(out), tape.requires_grad(input),
                     [input](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(Var{self});
    auto& gx = t.grad(input);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

// Row-wise concatenation of [N,P] and [N,Q] into [N,P+Q].
template <class T>
Var concat_columns(Tape<T>& tape, Var left, Var right) {
  const auto& a = tape.value(left);
  const auto& b = tape.value(right);
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_columns: expected [N,P] and [N,Q], got " +
                         shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  const std::size_t N = a.dim(0), P = a.dim(1), Q = b.dim(1);
  Tensor<T> out({N, P + Q});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.data().data() + n * P, P, out.data().data() + n * (P + Q));
    std::copy_n(b.data().data() + n * Q, Q, out.data().data() + n * (P + Q) + P);
  }
  const bool rg = tape.requires_grad(left) || tape.requires_grad(right);
  return tape.record("concat_columns", std::move(out), rg,
                     [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(Var{self});
    for (std::size_t n = 0; n < N; ++n) {
      if (t.requires_grad(left)) {
        auto& ga = t.grad(left);
        for (std::size_t j = 0; j < P; ++j) ga[n * P + j] += gy[n * (P + Q) + j];
      }
      if (t.requires_grad(right)) {
        auto& gb = t.grad(right);
        for (std::size_t j = 0; j < Q; ++j) gb[n * Q + j] += gy[n * (P + Q) + P + j];
      }
    }
  });
}

// Rows [begin, begin+count) of a [N,D] tensor.
template <class T>
Var slice_rows(Tape<T>& tape, Var input, std::size_t begin, std::size_t count) {
  const auto& x = tape.value(input);
  if (x.rank() != 2 || begin + count > x.dim(0) || count == 0) {
    throw DimensionError("slice_rows: bad range for shape " + shape_string(x.shape()));
  }
  const std::size_t D = x.dim(1);
  Tensor<T> out({count, D},
                std::vector<T>(x.data().begin() + begin * D,
                               x.data().begin() + (begin + count) * D));
  return tape.record("slice_rows", std::move(out), tape.requires_grad(input),
                     [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(Var{self});
    auto& gx = t.grad(input);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[begin * D + i] += gy[i];
  });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& x = tape.value(a);
  const auto& y = tape.value(b);
  if (x.shape() != y.shape()) throw DimensionError("add: shape mismatch");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.record("add", std::move(out), rg, [a, b](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(Var{self});
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      auto& g = t.grad(v);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
    }
  });
}

// Scalar sum of squares, shape [1].
template <class T>
Var sum_squares(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  T s{0};
  for (T v : x.data()) s += v * v;
  return tape.record("sum_squares", Tensor<T>({1}, std::vector<T>{s}),
                     tape.requires_grad(input), [input](Tape<T>& t, std::size_t self) {
    const T gy = t.grad(Var{self})[0];
    const auto& xv = t.value(input);
    auto& gx = t.grad(input);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += T{2} * xv[i] * gy;
  });
}

// Scalar <x, weights> against a constant weight tensor of the same size.
template <class T>
Var dot_constant(Tape<T>& tape, Var input, Tensor<T> weights) {
  const auto& x = tape.value(input);
  if (x.size() != weights.size()) throw DimensionError("dot_constant: size mismatch");
  T s{0};
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * weights[i];
  return tape.record("dot_constant", Tensor<T>({1}, std::vector<T>{s}),
                     tape.requires_grad(input),
                     [input, w = std::move(weights)](Tape<T>& t, std::size_t self) {
    const T gy = t.grad(Var{self})[0];
    auto& gx = t.grad(input);
    for (std::size_t i = 0; i < w.size(); ++i) gx[i] += w[i] * gy;
  });
}

// Cosine of the angle between two vectors, <a,b> / (|a| |b|).
template <class T>
double cosine(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: length mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0.0 || bb == 0.0) {
    throw DegenerateInputError("cosine: zero-norm descriptor");
  }
  const double c = ab / std::sqrt(aa * bb);
  return std::clamp(c, -1.0, 1.0);
}

// Row-wise cosine similarity: [N,D] x [N,D] -> [N] ([D] x [D] -> [1]).
template <class T>
Var cosine_distance(Tape<T>& tape, Var left, Var right) {
  const auto& a = tape.value(left);
  const auto& b = tape.value(right);
  if (a.shape() != b.shape()) {
    throw DimensionError("cosine_distance: shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  const detail::RowDims d = detail::row_dims(a.shape(), "cosine_distance");
  Tensor<T> out({d.n});
  std::vector<double> na(d.n), nb(d.n);
  for (std::size_t n = 0; n < d.n; ++n) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t j = 0; j < d.d; ++j) {
      const double x = a[n * d.d + j], y = b[n * d.d + j];
      ab += x * y;
      aa += x * x;
      bb += y * y;
    }
    if (aa == 0.0 || bb == 0.0) {
      throw DegenerateInputError("cosine_distance: zero-norm descriptor in row " +
                                 std::to_string(n));
    }
    na[n] = std::sqrt(aa);
    nb[n] = std::sqrt(bb);
    out[n] = static_cast<T>(ab / std::sqrt(aa * bb));
  }
  const bool rg = tape.requires_grad(left) || tape.requires_grad(right);
  return tape.record("cosine_distance", std::move(out), rg,
                     [=](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(Var{self});
    const auto& c = t.value(Var{self});
    const auto& av = t.value(left);
    const auto& bv = t.value(right);
    for (std::size_t n = 0; n < d.n; ++n) {
      const double inv = 1.0 / (na[n] * nb[n]);
      const double g = gy[n];
      const double cn = c[n];
      if (t.requires_grad(left)) {
        auto& ga = t.grad(left);
        for (std::size_t j = 0; j < d.d; ++j) {
          const std::size_t i = n * d.d + j;
          ga[i] += static_cast<T>(g * (bv[i] * inv - cn * av[i] / (na[n] * na[n])));
        }
      }
      if (t.requires_grad(right)) {
        auto& gb = t.grad(right);
        for (std::size_t j = 0; j < d.d; ++j) {
          const std::size_t i = n * d.d + j;
          gb[i] += static_cast<T>(g * (av[i] * inv - cn * bv[i] / (nb[n] * nb[n])));
        }
      }
    }
  });
}

// Mean over the batch of (label - prediction)^2, shape [1].
template <class T>
Var mean_squared_error(Tape<T>& tape, Var predictions, std::vector<T> labels) {
  const auto& p = tape.value(predictions);
  if (p.size() != labels.size()) {
    throw DimensionError("mean_squared_error: " + std::to_string(p.size()) +
                         " predictions for " + std::to_string(labels.size()) + " labels");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double r = static_cast<double>(labels[i]) - p[i];
    s += r * r;
  }
  const double n = static_cast<double>(p.size());
  return tape.record("mean_squared_error",
                     Tensor<T>({1}, std::vector<T>{static_cast<T>(s / n)}),
                     tape.requires_grad(predictions),
                     [predictions, labels = std::move(labels), n](Tape<T>& t,
                                                                  std::size_t self) {
    const T gy = t.grad(Var{self})[0];
    const auto& pv = t.value(predictions);
    auto& gp = t.grad(predictions);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      gp[i] += static_cast<T>(-2.0 * (labels[i] - pv[i]) / n) * gy;
    }
  });
}

}  // namespace fusedesc
