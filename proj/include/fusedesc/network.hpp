#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fusedesc/autodiff.hpp"
#include "fusedesc/errors.hpp"
#include "fusedesc/json_util.hpp"
#include "fusedesc/parameters.hpp"
#include "fusedesc/preprocess.hpp"
#include "fusedesc/rng.hpp"
#include "fusedesc/tensor.hpp"

namespace fusedesc {

inline constexpr std::size_t kKernelSize = 5;

// One Siamese branch: M modules of (5x5 wide conv -> batch norm -> tanh ->
// 2x2 max pool), optional DCT branch concatenated after flattening, a tanh
// fully-connected layer and the B-unit bottleneck.
struct NetworkConfig {
  std::size_t modules = 3;               // M
  bool drop_final_maxpool = false;       // "-mp" variants
  std::size_t first_module_filters = 64;
  std::size_t dct_coefficients = 561;    // F_D; 0 disables the DCT branch
  std::size_t fc_width = 512;
  std::size_t descriptor_size = 128;     // B
  std::size_t input_size = 64;
  bool tanh_bottleneck = false;

  std::size_t filters(std::size_t module) const {  // module is 1-based
    return first_module_filters << (module - 1);
  }
  std::size_t pooling_layers() const { return modules - (drop_final_maxpool ? 1 : 0); }

  // Row label used by the sweeps, e.g. "3", "4-mp", "3,DCT".
  std::string label() const {
    std::string s = std::to_string(modules);
    if (drop_final_maxpool) s += "-mp";
    if (dct_coefficients > 0) s += ",DCT";
    return s;
  }

  void validate() const {
    if (modules < 2 || modules > 5) {
      throw ConfigError("modules must be in {2,3,4,5}, got " + std::to_string(modules));
    }
    if (first_module_filters == 0 || fc_width == 0 || descriptor_size == 0 ||
        input_size == 0) {
      throw ConfigError("filter, layer and input sizes must be positive");
    }
    if (descriptor_size > 65535) throw ConfigError("descriptor size must fit in 16 bits");
    const std::size_t div = std::size_t{1} << pooling_layers();
    if (input_size < div || input_size % div != 0) {
      throw ConfigError("featuremap side below 1: input " + std::to_string(input_size) +
                        " cannot be pooled " + std::to_string(pooling_layers()) + " times");
    }
    if (dct_coefficients > input_size * input_size) {
      throw ConfigError("dct_coefficients exceeds the patch area");
    }
  }

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

inline Json to_json(const NetworkConfig& c) {
  return Json{{"modules", c.modules},
              {"drop_final_maxpool", c.drop_final_maxpool},
              {"first_module_filters", c.first_module_filters},
              {"dct_coefficients", c.dct_coefficients},
              {"fc_width", c.fc_width},
              {"descriptor_size", c.descriptor_size},
              {"input_size", c.input_size},
              {"tanh_bottleneck", c.tanh_bottleneck}};
}

// Missing keys keep `base` values; unknown keys are rejected.
inline NetworkConfig network_config_from_json(const Json& j, NetworkConfig base = {}) {
  constexpr const char* where = "network config";
  json_util::reject_unknown_keys(j,
                                 {"modules", "drop_final_maxpool", "first_module_filters",
                                  "dct_coefficients", "fc_width", "descriptor_size",
                                  "input_size", "tanh_bottleneck"},
                                 where);
  json_util::read_count(j, "modules", base.modules, where);
  json_util::read(j, "drop_final_maxpool", base.drop_final_maxpool, where);
  json_util::read_count(j, "first_module_filters", base.first_module_filters, where);
  json_util::read_count(j, "dct_coefficients", base.dct_coefficients, where);
  json_util::read_count(j, "fc_width", base.fc_width, where);
  json_util::read_count(j, "descriptor_size", base.descriptor_size, where);
  json_util::read_count(j, "input_size", base.input_size, where);
  json_util::read(j, "tanh_bottleneck", base.tanh_bottleneck, where);
  base.validate();
  return base;
}

struct FeatureCounts {
  std::size_t maps = 0;           // FMN
  std::size_t map_side = 0;       // FMR is map_side x map_side
  std::size_t map_pixels = 0;
  std::size_t conv_features = 0;  // F_C = FMN * FMR
};

inline FeatureCounts feature_counts(const NetworkConfig& c) {
  c.validate();
  FeatureCounts f;
  f.maps = c.filters(c.modules);
  f.map_side = c.input_size >> c.pooling_layers();
  f.map_pixels = f.map_side * f.map_side;
  f.conv_features = f.maps * f.map_pixels;
  return f;
}

// Exact learnable parameter count: conv kernels and biases, batch-norm
// gamma/beta, and both fully-connected layers. Running statistics excluded.
inline std::size_t parameter_count(const NetworkConfig& c) {
  const FeatureCounts f = feature_counts(c);
  std::size_t total = 0;
  std::size_t in = 1;
  for (std::size_t m = 1; m <= c.modules; ++m) {
    const std::size_t k = c.filters(m);
    total += k * in * kKernelSize * kKernelSize + k + 2 * k;
    in = k;
  }
  const std::size_t fused = f.conv_features + c.dct_coefficients;
  total += fused * c.fc_width + c.fc_width;
  total += c.fc_width * c.descriptor_size + c.descriptor_size;
  return total;
}

// The dominant term: (F_C + F_D) * fc_width.
inline std::size_t complexity_estimate(const NetworkConfig& c) {
  return (feature_counts(c).conv_features + c.dct_coefficients) * c.fc_width;
}

inline std::string conv_name(std::size_t module) { return "conv" + std::to_string(module); }

// Uniform init in +-sqrt(6 / (fan_in + fan_out)); zero biases; gamma 1,
// beta 0; running mean 0, running variance 1.
template <class T>
ParameterStore<T> init_parameters(const NetworkConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed);
  ParameterStore<T> store;
  auto uniform = [&](Shape shape, double fan_in, double fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor<T> t(std::move(shape));
    for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(-limit, limit));
    return t;
  };
  constexpr double kk = kKernelSize * kKernelSize;
  std::size_t in = 1;
  for (std::size_t m = 1; m <= c.modules; ++m) {
    const std::size_t k = c.filters(m);
    const std::string p = conv_name(m);
    store.add(p + ".weight", uniform({k, in, kKernelSize, kKernelSize}, in * kk, k * kk));
    store.add(p + ".bias", Tensor<T>({k}));
    store.add(p + ".bn.gamma", Tensor<T>({k}, T{1}));
    store.add(p + ".bn.beta", Tensor<T>({k}));
    store.add(p + ".bn.running_mean", Tensor<T>({k}), false);
    store.add(p + ".bn.running_var", Tensor<T>({k}, T{1}), false);
    store.add(p + ".bn.running_steps", Tensor<T>({1}), false);
    in = k;
  }
  const std::size_t fused = feature_counts(c).conv_features + c.dct_coefficients;
  store.add("fc.weight", uniform({c.fc_width, fused}, fused, c.fc_width));
  store.add("fc.bias", Tensor<T>({c.fc_width}));
  store.add("bottleneck.weight",
            uniform({c.descriptor_size, c.fc_width}, c.fc_width, c.descriptor_size));
  store.add("bottleneck.bias", Tensor<T>({c.descriptor_size}));
  return store;
}

// Throws ConfigError unless `store` has exactly the entries and shapes that
// init_parameters(c) would create.
template <class T>
void validate_parameters(const ParameterStore<T>& store, const NetworkConfig& c) {
  const auto expected = init_parameters<T>(c, 0);
  if (expected.size() != store.size()) {
    throw ConfigError("checkpoint has " + std::to_string(store.size()) +
                      " entries, configuration expects " + std::to_string(expected.size()));
  }
  for (const auto& [name, e] : expected) {
    if (!store.contains(name)) throw ConfigError("checkpoint lacks parameter " + name);
    if (store.at(name).value.shape() != e.value.shape()) {
      throw ConfigError("parameter " + name + " has shape " +
                        shape_string(store.at(name).value.shape()) + ", configuration expects " +
                        shape_string(e.value.shape()));
    }
  }
}

// Decodes a checkpoint written for `c`. PFCK has no record count, so a file
// cut exactly between records decodes cleanly; against a known configuration
// that shows up as missing trailing entries and is reported as truncation at
// the end of the data.
template <class T>
ParameterStore<T> decode_checkpoint_for(std::vector<std::uint8_t> bytes, const NetworkConfig& c) {
  const std::uint64_t size = bytes.size();
  auto store = decode_checkpoint<T>(std::move(bytes));
  const auto expected = init_parameters<T>(c, 0);
  if (store.size() < expected.size()) {
    for (const auto& [name, e] : expected) {
      if (!store.contains(name)) {
        throw FormatError("checkpoint ends before parameter " + name, size);
      }
    }
  }
  validate_parameters(store, c);
  return store;
}

template <class T>
ParameterStore<T> load_checkpoint_for(const std::filesystem::path& path, const NetworkConfig& c) {
  return decode_checkpoint_for<T>(io::read_file(path), c);
}

// Network input for a batch: preprocessed patches [N,1,S,S] and normalized
// DCT features [N,F_D] (empty when F_D = 0).
template <class T>
struct NetworkInput {
  Tensor<T> patches;
  Tensor<T> dct;

  std::size_t batch() const { return patches.empty() ? 0 : patches.dim(0); }
};

// Builds the network input from raw patches (each [S,S]).
template <class T>
NetworkInput<T> prepare_input(std::span<const Tensor<T>> raw, const NetworkConfig& c,
                              const PreprocStats& stats, const DctFeatures<T>* dct = nullptr) {
  if (raw.empty()) throw EmptyDatasetError("prepare_input: no patches");
  const std::size_t s = c.input_size;
  if (c.dct_coefficients != stats.dct.size()) {
    throw CompatibilityError("network expects " + std::to_string(c.dct_coefficients) +
                             " DCT coefficients, statistics have " +
                             std::to_string(stats.dct.size()));
  }
  std::optional<DctFeatures<T>> local;
  if (c.dct_coefficients > 0 && dct == nullptr) {
    local.emplace(s, c.dct_coefficients);
    dct = &*local;
  }
  NetworkInput<T> in;
  in.patches = Tensor<T>({raw.size(), 1, s, s});
  if (c.dct_coefficients > 0) in.dct = Tensor<T>({raw.size(), c.dct_coefficients});
  for (std::size_t n = 0; n < raw.size(); ++n) {
    if (raw[n].rank() != 2 || raw[n].dim(0) != s || raw[n].dim(1) != s) {
      throw DimensionError("patch " + std::to_string(n) + " is " +
                           shape_string(raw[n].shape()) + ", expected " +
                           std::to_string(s) + "x" + std::to_string(s));
    }
    const Tensor<T> p = preprocess_patch(raw[n], stats);
    std::copy(p.data().begin(), p.data().end(), in.patches.data().begin() + n * s * s);
    if (c.dct_coefficients > 0) {
      const auto f = dct->normalized(p, stats.dct);
      std::copy(f.begin(), f.end(), in.dct.data().begin() + n * c.dct_coefficients);
    }
  }
  return in;
}

// Records the forward pass of one branch for a batch; returns [N,B].
template <class T>
Var forward_batch(Tape<T>& tape, ParameterStore<T>& params, const NetworkConfig& c,
                  const NetworkInput<T>& input, Mode mode) {
  const std::size_t n = input.batch();
  if (n == 0) throw EmptyDatasetError("forward: empty batch");
  const auto& ps = input.patches.shape();
  if (ps.size() != 4 || ps[1] != 1 || ps[2] != c.input_size || ps[3] != c.input_size) {
    throw ConfigError("forward: patch batch " + shape_string(ps) + " does not match input size " +
                      std::to_string(c.input_size));
  }
  Var x = tape.constant(input.patches);
  for (std::size_t m = 1; m <= c.modules; ++m) {
    const std::string p = conv_name(m);
    x = conv2d(tape, x, tape.parameter(params, p + ".weight"),
               tape.parameter(params, p + ".bias"));
    x = spatial_batchnorm(tape, x, tape.parameter(params, p + ".bn.gamma"),
                          tape.parameter(params, p + ".bn.beta"),
                          BatchNormState<T>::bind(params, p + ".bn"), mode);
    x = tanh_activation(tape, x);
    if (m < c.modules || !c.drop_final_maxpool) x = maxpool2x2(tape, x);
  }
  x = flatten(tape, x);
  if (c.dct_coefficients > 0) {
    if (input.dct.rank() != 2 || input.dct.dim(0) != n ||
        input.dct.dim(1) != c.dct_coefficients) {
      throw ConfigError("forward: DCT features do not match the configuration");
    }
    x = concat_columns(tape, x, tape.constant(input.dct));
  }
  x = linear(tape, x, tape.parameter(params, "fc.weight"), tape.parameter(params, "fc.bias"));
  x = tanh_activation(tape, x);
  x = linear(tape, x, tape.parameter(params, "bottleneck.weight"),
             tape.parameter(params, "bottleneck.bias"));
  if (c.tanh_bottleneck) x = tanh_activation(tape, x);
  return x;
}

template <class T>
Tensor<T> concat_batches(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.empty()) return {};
  Shape s = a.shape();
  if (b.shape().size() != s.size() ||
      !std::equal(s.begin() + 1, s.end(), b.shape().begin() + 1)) {
    throw DimensionError("concat_batches: incompatible shapes");
  }
  s[0] += b.dim(0);
  std::vector<T> data(a.data().begin(), a.data().end());
  data.insert(data.end(), b.data().begin(), b.data().end());
  return Tensor<T>(std::move(s), std::move(data));
}

struct SiameseVars {
  Var left;    // [N,B]
  Var right;   // [N,B]
  Var cosine;  // [N]
};

// Both branches evaluated in a single pass over the concatenated batch, so
// they read one parameter set (and, in train mode, share batch statistics).
template <class T>
SiameseVars siamese_forward(Tape<T>& tape, ParameterStore<T>& params, const NetworkConfig& c,
                            const NetworkInput<T>& left, const NetworkInput<T>& right,
                            Mode mode) {
  const std::size_t n = left.batch();
  if (n == 0 || right.batch() != n) {
    throw DimensionError("siamese_forward: both sides need the same nonzero batch size");
  }
  NetworkInput<T> joint{concat_batches(left.patches, right.patches),
                        concat_batches(left.dct, right.dct)};
  const Var d = forward_batch(tape, params, c, joint, mode);
  SiameseVars out;
  out.left = slice_rows(tape, d, 0, n);
  out.right = slice_rows(tape, d, n, n);
  out.cosine = cosine_distance(tape, out.left, out.right);
  return out;
}

// Eval-mode descriptors for a batch of raw patches, [N,B].
template <class T>
Tensor<T> describe(ParameterStore<T>& params, const NetworkConfig& c, const PreprocStats& stats,
                   std::span<const Tensor<T>> raw, const DctFeatures<T>* dct = nullptr) {
  Tape<T> tape;
  const auto input = prepare_input(raw, c, stats, dct);
  return tape.value(forward_batch(tape, params, c, input, Mode::kEval));
}

// Single-patch descriptor (eval mode).
template <class T>
std::vector<T> forward(const Tensor<T>& patch, ParameterStore<T>& params,
                       const NetworkConfig& c, const PreprocStats& stats) {
  const auto d = describe(params, c, stats, std::span<const Tensor<T>>(&patch, 1));
  return {d.data().begin(), d.data().end()};
}

}  // namespace fusedesc
