#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "fusedesc/binary_codec.hpp"
#include "fusedesc/dataset.hpp"
#include "fusedesc/evaluation.hpp"
#include "fusedesc/json_util.hpp"
#include "fusedesc/network.hpp"
#include "fusedesc/training.hpp"

namespace fusedesc {

// Descriptors for every patch of a store (source id = patch index), computed
// in eval mode in chunks. With kBinary the rows are sign-quantized as they
// are produced.
template <class T>
DescriptorSet extract_descriptors(const PatchStore& store, ParameterStore<T>& params,
                                  const NetworkConfig& net, const PreprocStats& stats,
                                  DescriptorKind kind = DescriptorKind::kReal,
                                  std::size_t chunk = 128) {
  if (store.size() == 0) throw EmptyDatasetError("cannot extract descriptors from an empty store");
  validate_parameters(params, net);
  const PairSource<T> source(store, net, stats);
  DescriptorSet out;
  out.kind = kind;
  out.bits = net.descriptor_size;
  out.count = store.size();
  const std::size_t w = out.words_per_descriptor();
  if (kind == DescriptorKind::kReal) {
    out.real.reserve(out.count * out.bits);
  } else {
    out.binary.assign(out.count * w, 0);
  }
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < store.size(); begin += chunk) {
    idx.clear();
    for (std::size_t i = begin; i < std::min(store.size(), begin + chunk); ++i) idx.push_back(i);
    const auto input = source.input(idx);
    Tape<T> tape;
    const Tensor<T>& d = tape.value(forward_batch(tape, params, net, input, Mode::kEval));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const std::span<const T> row = d.data().subspan(r * out.bits, out.bits);
      if (kind == DescriptorKind::kReal) {
        for (T v : row) out.real.push_back(static_cast<float>(v));
      } else {
        std::vector<float> f(row.begin(), row.end());
        sign_quantize_into<float>(f, std::span<std::uint64_t>(out.binary.data() + idx[r] * w, w));
      }
    }
  }
  out.source_ids.resize(out.count);
  for (std::size_t i = 0; i < out.count; ++i) out.source_ids[i] = i;
  return out;
}

namespace detail {

inline std::unordered_map<std::uint64_t, std::size_t> row_index(const DescriptorSet& s) {
  std::unordered_map<std::uint64_t, std::size_t> m;
  for (std::size_t i = 0; i < s.count; ++i) m.emplace(s.source_ids[i], i);
  return m;
}

inline std::size_t find_row(const std::unordered_map<std::uint64_t, std::size_t>& m,
                            std::uint64_t id, const char* side) {
  auto it = m.find(id);
  if (it == m.end()) {
    throw BoundsError(std::string("no descriptor with source id ") + std::to_string(id) +
                      " in the " + side + " set");
  }
  return it->second;
}

}  // namespace detail

// Distance between row i of `a` and row j of `b`: normalized Hamming for
// binary sets, (1 - cosine) / 2 for real-valued sets.
inline double descriptor_distance(const DescriptorSet& a, std::size_t i, const DescriptorSet& b,
                                  std::size_t j) {
  if (a.kind == DescriptorKind::kBinary) {
    return static_cast<double>(hamming_words(a.binary_row(i), b.binary_row(j))) /
           static_cast<double>(a.bits);
  }
  return cosine_to_distance(cosine<float>(a.real_row(i), b.real_row(j)));
}

inline void check_compatible(const DescriptorSet& a, const DescriptorSet& b) {
  if (a.kind != b.kind) throw CompatibilityError("descriptor sets differ in kind");
  if (a.bits != b.bits) {
    throw CompatibilityError("descriptor sets differ in length: " + std::to_string(a.bits) +
                             " vs " + std::to_string(b.bits));
  }
}

// Pair distances where index_a refers to a source id in `a` and index_b to a
// source id in `b`.
inline std::vector<double> match_pairs(const DescriptorSet& a, const DescriptorSet& b,
                                       std::span<const PairSpec> pairs) {
  check_compatible(a, b);
  const auto ia = detail::row_index(a);
  const auto ib = detail::row_index(b);
  std::vector<double> d;
  d.reserve(pairs.size());
  for (const auto& p : pairs) {
    d.push_back(descriptor_distance(a, detail::find_row(ia, p.index_a, "first"), b,
                                    detail::find_row(ib, p.index_b, "second")));
  }
  return d;
}

// Row i of `a` against row i of `b`.
inline std::vector<double> match_rows(const DescriptorSet& a, const DescriptorSet& b) {
  check_compatible(a, b);
  if (a.count != b.count) throw CompatibilityError("descriptor sets differ in count");
  std::vector<double> d(a.count);
  for (std::size_t i = 0; i < a.count; ++i) d[i] = descriptor_distance(a, i, b, i);
  return d;
}

inline std::vector<ScoredPair> score(std::span<const PairSpec> pairs,
                                     std::span<const double> distances) {
  if (pairs.size() != distances.size()) {
    throw EvaluationError("pair list has " + std::to_string(pairs.size()) + " rows, distances " +
                          std::to_string(distances.size()));
  }
  std::vector<ScoredPair> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) out.push_back({i, pairs[i].label, distances[i]});
  return out;
}

// ---------------------------------------------------------------------------
// Run configuration shared by the command-line tool.

struct RunConfig {
  std::string subcommand;
  std::map<std::string, std::string> paths;
  NetworkConfig network;
  TrainingConfig training;
  SyntheticSpec synthetic;
  std::string output_dir;
  std::uint64_t seed = 1;
  Json options = Json::object();  // subcommand-specific settings
};

inline Json to_json(const RunConfig& r) {
  return Json{{"subcommand", r.subcommand}, {"paths", r.paths},
              {"network", to_json(r.network)},  {"training", to_json(r.training)},
              {"synthetic", to_json(r.synthetic)}, {"output_dir", r.output_dir},
              {"seed", r.seed}, {"options", r.options}};
}

inline RunConfig run_config_from_json(const Json& j, RunConfig r = {}) {
  constexpr const char* where = "run config";
  json_util::reject_unknown_keys(
      j, {"subcommand", "paths", "network", "training", "synthetic", "output_dir", "seed", "options"},
      where);
  json_util::read(j, "subcommand", r.subcommand, where);
  json_util::read(j, "output_dir", r.output_dir, where);
  json_util::read_count(j, "seed", r.seed, where);
  if (auto it = j.find("paths"); it != j.end()) {
    if (!it->is_object()) throw ConfigError("run config: paths must be an object");
    for (const auto& [k, v] : it->items()) {
      if (!v.is_string()) throw ConfigError("run config: paths." + k + " must be a string");
      r.paths[k] = v.get<std::string>();
    }
  }
  if (auto it = j.find("network"); it != j.end()) r.network = network_config_from_json(*it, r.network);
  if (auto it = j.find("training"); it != j.end()) {
    r.training = training_config_from_json(*it, r.training);
  }
  if (auto it = j.find("synthetic"); it != j.end()) {
    r.synthetic = synthetic_spec_from_json(*it, r.synthetic);
  }
  if (auto it = j.find("options"); it != j.end()) {
    if (!it->is_object()) throw ConfigError("run config: options must be an object");
    for (const auto& [k, v] : it->items()) r.options[k] = v;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Synthetic end-to-end experiment: generate train and test data, train,
// extract real and binary descriptors for the test store, evaluate both.

struct Experiment {
  SyntheticSpec train_data;
  SyntheticSpec test_data;
  NetworkConfig network;
  TrainingConfig training;
  DctNormalization dct_mode = DctNormalization::kPerCoefficient;
};

// Small configuration that trains in a few minutes on one CPU core.
inline Experiment desk_experiment(std::uint64_t seed = 1) {
  Experiment e;
  e.train_data.base_patches = 500;
  e.train_data.matching_pairs = 1000;
  e.train_data.nonmatching_pairs = 1000;
  e.train_data.seed = derive_seed(seed, "train-data");
  e.test_data.base_patches = 200;
  e.test_data.matching_pairs = 200;
  e.test_data.nonmatching_pairs = 200;
  e.test_data.seed = derive_seed(seed, "test-data");
  e.network.modules = 2;
  e.network.first_module_filters = 16;
  e.network.dct_coefficients = 105;
  e.network.descriptor_size = 32;
  e.training.learning_rate = 0.01;
  e.training.matching_per_batch = 16;
  e.training.nonmatching_per_batch = 16;
  e.training.max_epochs = 8;
  e.training.patience_epochs = 3;
  e.training.seed = seed;
  return e;
}

inline Json to_json(const Experiment& e) {
  return Json{{"train_data", to_json(e.train_data)},
              {"test_data", to_json(e.test_data)},
              {"network", to_json(e.network)},
              {"training", to_json(e.training)},
              {"dct_normalization",
               e.dct_mode == DctNormalization::kPerCoefficient ? "per_coefficient" : "global"}};
}

struct ExperimentResult {
  TrainResult<float> trained;
  PreprocStats stats;
  DescriptorSet real;
  DescriptorSet binary;
  std::vector<PairSpec> test_pairs;
  std::vector<ScoredPair> real_scores;
  std::vector<ScoredPair> binary_scores;
  EvalReport real_report;
  EvalReport binary_report;
  double train_seconds = 0.0;
};

// Trains on (train_store, train_pairs) with a validation split carved from
// the training pairs, then scores the test pairs with real and binary
// descriptors of the test store.
inline ExperimentResult run_on_data(const PatchStore& train_store,
                                    std::span<const PairSpec> train_pairs_all,
                                    const PatchStore& test_store,
                                    std::span<const PairSpec> test_pairs,
                                    const NetworkConfig& network, const TrainingConfig& training,
                                    DctNormalization dct_mode = DctNormalization::kPerCoefficient,
                                    const EpochCallback& on_epoch = {}) {
  network.validate();
  training.validate();
  validate_pairs(test_store, test_pairs);
  auto [train_pairs, val_pairs] = split_train_validation(
      train_pairs_all, training.validation_fraction, derive_seed(training.seed, "split"));

  ExperimentResult r;
  r.stats = fit_stats_for_pairs<float>(train_store, train_pairs, network, dct_mode);
  const auto t0 = std::chrono::steady_clock::now();
  r.trained = train<float>(train_store, train_pairs, train_store, val_pairs, network, training,
                           r.stats, on_epoch);
  r.train_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  r.real = extract_descriptors(test_store, r.trained.params, network, r.stats);
  r.binary = quantize_set(r.real);
  r.test_pairs.assign(test_pairs.begin(), test_pairs.end());
  r.real_scores = score(r.test_pairs, match_pairs(r.real, r.real, r.test_pairs));
  r.binary_scores = score(r.test_pairs, match_pairs(r.binary, r.binary, r.test_pairs));
  const std::string label = network.label();
  r.real_report = evaluate(r.real_scores, label + " real");
  r.binary_report = evaluate(r.binary_scores, label + " binary");
  return r;
}

inline ExperimentResult run_experiment(const Experiment& e, const EpochCallback& on_epoch = {}) {
  const auto train_data = generate_synthetic(e.train_data);
  const auto test_data = generate_synthetic(e.test_data);
  return run_on_data(train_data.store, train_data.pairs, test_data.store, test_data.pairs,
                     e.network, e.training, e.dct_mode, on_epoch);
}

}  // namespace fusedesc
