#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fusedesc/autodiff.hpp"
#include "fusedesc/dataset.hpp"
#include "fusedesc/evaluation.hpp"
#include "fusedesc/json_util.hpp"
#include "fusedesc/network.hpp"
#include "fusedesc/parameters.hpp"
#include "fusedesc/preprocess.hpp"
#include "fusedesc/rng.hpp"

namespace fusedesc {

enum class ValidationMetric { kLoss, kFprAtTpr95 };

struct TrainingConfig {
  double learning_rate = 1e-4;
  std::size_t matching_per_batch = 100;
  std::size_t nonmatching_per_batch = 100;
  std::size_t max_epochs = 400;
  std::size_t patience_epochs = 10;
  std::uint64_t seed = 1;
  double validation_fraction = 0.1;
  ValidationMetric validation_metric = ValidationMetric::kLoss;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (matching_per_batch == 0 || nonmatching_per_batch == 0 || max_epochs == 0 ||
        patience_epochs == 0) {
      throw ConfigError("batch sizes, max_epochs and patience_epochs must be positive");
    }
    if (patience_epochs > max_epochs) throw ConfigError("patience_epochs exceeds max_epochs");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
      throw ConfigError("validation_fraction must be in [0,1)");
    }
  }
};

inline Json to_json(const TrainingConfig& c) {
  return Json{{"learning_rate", c.learning_rate},
              {"matching_per_batch", c.matching_per_batch},
              {"nonmatching_per_batch", c.nonmatching_per_batch},
              {"max_epochs", c.max_epochs},
              {"patience_epochs", c.patience_epochs},
              {"seed", c.seed},
              {"validation_fraction", c.validation_fraction},
              {"validation_metric",
               c.validation_metric == ValidationMetric::kLoss ? "loss" : "fpr_at_tpr95"}};
}

inline TrainingConfig training_config_from_json(const Json& j, TrainingConfig c = {}) {
  constexpr const char* where = "training config";
  json_util::reject_unknown_keys(j,
                                 {"learning_rate", "matching_per_batch",
                                  "nonmatching_per_batch", "max_epochs", "patience_epochs",
                                  "seed", "validation_fraction", "validation_metric"},
                                 where);
  json_util::read(j, "learning_rate", c.learning_rate, where);
  json_util::read_count(j, "matching_per_batch", c.matching_per_batch, where);
  json_util::read_count(j, "nonmatching_per_batch", c.nonmatching_per_batch, where);
  json_util::read_count(j, "max_epochs", c.max_epochs, where);
  json_util::read_count(j, "patience_epochs", c.patience_epochs, where);
  json_util::read_count(j, "seed", c.seed, where);
  json_util::read(j, "validation_fraction", c.validation_fraction, where);
  if (auto it = j.find("validation_metric"); it != j.end()) {
    const std::string m = it->is_string() ? it->get<std::string>() : "";
    if (m == "loss") {
      c.validation_metric = ValidationMetric::kLoss;
    } else if (m == "fpr_at_tpr95") {
      c.validation_metric = ValidationMetric::kFprAtTpr95;
    } else {
      throw ConfigError("training config: validation_metric must be \"loss\" or \"fpr_at_tpr95\"");
    }
  }
  c.validate();
  return c;
}

// Per-sample classification error (label - cosine)^2.
inline double loss(double label, double cosine) {
  const double r = label - cosine;
  return r * r;
}

using Batch = std::vector<PairSpec>;

// Each batch holds matching_per_batch matching and nonmatching_per_batch
// non-matching samples in shuffled order. Leftover samples that cannot fill a
// whole batch are dropped for that epoch.
inline std::vector<Batch> make_batches(std::span<const PairSpec> samples,
                                       const TrainingConfig& cfg, std::uint64_t epoch_seed) {
  std::vector<PairSpec> pos, neg;
  for (const auto& s : samples) (s.label == 1 ? pos : neg).push_back(s);
  if (pos.size() < cfg.matching_per_batch || neg.size() < cfg.nonmatching_per_batch) {
    throw DatasetError("need at least " + std::to_string(cfg.matching_per_batch) +
                       " matching and " + std::to_string(cfg.nonmatching_per_batch) +
                       " non-matching samples, have " + std::to_string(pos.size()) + " and " +
                       std::to_string(neg.size()));
  }
  Rng rng(epoch_seed);
  rng.shuffle(pos);
  rng.shuffle(neg);
  const std::size_t n = std::min(pos.size() / cfg.matching_per_batch,
                                 neg.size() / cfg.nonmatching_per_batch);
  std::vector<Batch> batches(n);
  for (std::size_t b = 0; b < n; ++b) {
    auto& batch = batches[b];
    batch.insert(batch.end(), pos.begin() + static_cast<long>(b * cfg.matching_per_batch),
                 pos.begin() + static_cast<long>((b + 1) * cfg.matching_per_batch));
    batch.insert(batch.end(), neg.begin() + static_cast<long>(b * cfg.nonmatching_per_batch),
                 neg.begin() + static_cast<long>((b + 1) * cfg.nonmatching_per_batch));
    rng.shuffle(batch);
  }
  return batches;
}

// Deterministic train/validation split that keeps both classes in the
// validation part.
inline std::pair<std::vector<PairSpec>, std::vector<PairSpec>> split_train_validation(
    std::span<const PairSpec> pairs, double validation_fraction, std::uint64_t seed) {
  std::vector<PairSpec> pos, neg;
  for (const auto& p : pairs) (p.label == 1 ? pos : neg).push_back(p);
  Rng rng(seed);
  rng.shuffle(pos);
  rng.shuffle(neg);
  std::vector<PairSpec> train, val;
  for (auto* cls : {&pos, &neg}) {
    const auto nv = static_cast<std::size_t>(std::llround(validation_fraction * cls->size()));
    val.insert(val.end(), cls->begin(), cls->begin() + static_cast<long>(nv));
    train.insert(train.end(), cls->begin() + static_cast<long>(nv), cls->end());
  }
  return {std::move(train), std::move(val)};
}

// Pair-indexed view of a patch store plus its fitted preprocessing.
template <class T>
class PairSource {
 public:
  PairSource(const PatchStore& store, const NetworkConfig& net, const PreprocStats& stats)
      : store_(&store), net_(net), stats_(&stats) {
    if (net.input_size != kPatchSide) {
      throw CompatibilityError("patch stores hold 64x64 patches but the network expects " +
                               std::to_string(net.input_size));
    }
    if (net.dct_coefficients > 0) dct_.emplace(net.input_size, net.dct_coefficients);
  }

  const PatchStore& store() const { return *store_; }

  NetworkInput<T> input(std::span<const std::size_t> indices) const {
    std::vector<Tensor<T>> raw;
    raw.reserve(indices.size());
    for (auto i : indices) raw.push_back(store_->patch<T>(i));
    return prepare_input<T>(raw, net_, *stats_, dct_ ? &*dct_ : nullptr);
  }

  // Left and right inputs of a set of pairs.
  std::pair<NetworkInput<T>, NetworkInput<T>> pair_inputs(std::span<const PairSpec> pairs) const {
    std::vector<std::size_t> a, b;
    for (const auto& p : pairs) {
      a.push_back(p.index_a);
      b.push_back(p.index_b);
    }
    return {input(a), input(b)};
  }

 private:
  const PatchStore* store_;
  NetworkConfig net_;
  const PreprocStats* stats_;
  std::optional<DctFeatures<T>> dct_;
};

// Fits preprocessing statistics on the distinct patches referenced by
// `pairs` (the training split only).
template <class T>
PreprocStats fit_stats_for_pairs(const PatchStore& store, std::span<const PairSpec> pairs,
                                 const NetworkConfig& net,
                                 DctNormalization mode = DctNormalization::kPerCoefficient) {
  std::set<std::size_t> used;
  for (const auto& p : pairs) {
    used.insert(p.index_a);
    used.insert(p.index_b);
  }
  std::vector<std::size_t> idx(used.begin(), used.end());
  return fit_preprocess_stats<T>(
      idx.size(), [&](std::size_t i) { return store.patch<T>(idx[i]); }, net.input_size,
      net.dct_coefficients, store.name(), mode);
}

// Eval-mode cosine similarity for each pair, batched.
template <class T>
std::vector<double> pair_cosines(ParameterStore<T>& params, const NetworkConfig& net,
                                 const PairSource<T>& source, std::span<const PairSpec> pairs,
                                 std::size_t chunk = 64) {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (std::size_t begin = 0; begin < pairs.size(); begin += chunk) {
    const auto part = pairs.subspan(begin, std::min(chunk, pairs.size() - begin));
    const auto [left, right] = source.pair_inputs(part);
    Tape<T> tape;
    const auto vars = siamese_forward(tape, params, net, left, right, Mode::kEval);
    for (T c : tape.value(vars.cosine).data()) out.push_back(static_cast<double>(c));
  }
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_error = 0.0;
};

template <class T>
struct TrainResult {
  ParameterStore<T> params;  // from the best-validation epoch
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

// One optimizer step on a batch. Returns the mean batch loss.
template <class T>
double train_step(ParameterStore<T>& params, const NetworkConfig& net,
                  const PairSource<T>& source, std::span<const PairSpec> batch,
                  double learning_rate) {
  const auto [left, right] = source.pair_inputs(batch);
  std::vector<T> labels;
  for (const auto& p : batch) labels.push_back(static_cast<T>(p.label));
  params.zero_grad();
  Tape<T> tape;
  const auto vars = siamese_forward(tape, params, net, left, right, Mode::kTrain);
  const Var l = mean_squared_error(tape, vars.cosine, std::move(labels));
  const double value = static_cast<double>(tape.value(l)[0]);
  if (!std::isfinite(value)) return value;
  tape.backward(l);
  adagrad_step(params, learning_rate);
  return value;
}

template <class T>
double validation_error(ParameterStore<T>& params, const NetworkConfig& net,
                        const PairSource<T>& source, std::span<const PairSpec> pairs,
                        ValidationMetric metric) {
  const auto cos = pair_cosines(params, net, source, pairs);
  if (metric == ValidationMetric::kLoss) {
    double s = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) s += loss(pairs[i].label, cos[i]);
    return s / static_cast<double>(pairs.size());
  }
  std::vector<ScoredPair> scored;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    scored.push_back({i, pairs[i].label, cosine_to_distance(cos[i])});
  }
  return fpr_at_tpr95(scored);
}

// Patience rule: stop once `patience` consecutive epochs fail to improve on
// the best validation error seen so far.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  // Records one epoch; true when it is a new best.
  bool observe(double error) {
    if (error < best_) {
      best_ = error;
      since_best_ = 0;
      return true;
    }
    ++since_best_;
    return false;
  }

  bool should_stop() const noexcept { return since_best_ >= patience_; }
  double best() const noexcept { return best_; }

 private:
  std::size_t patience_;
  std::size_t since_best_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains until the validation error has not improved for patience_epochs
// epochs or max_epochs is reached; returns the best-validation parameters.
template <class T>
TrainResult<T> train(const PatchStore& train_store, std::span<const PairSpec> train_pairs,
                     const PatchStore& val_store, std::span<const PairSpec> val_pairs,
                     const NetworkConfig& net, const TrainingConfig& cfg,
                     const PreprocStats& stats, const EpochCallback& on_epoch = {}) {
  net.validate();
  cfg.validate();
  validate_pairs(train_store, train_pairs);
  validate_pairs(val_store, val_pairs);
  if (val_pairs.empty()) throw DatasetError("validation split is empty");
  const PairSource<T> train_src(train_store, net, stats);
  const PairSource<T> val_src(val_store, net, stats);

  ParameterStore<T> params = init_parameters<T>(net, derive_seed(cfg.seed, "init"));
  TrainResult<T> result;
  EarlyStopping stopping(cfg.patience_epochs);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto batches = make_batches(train_pairs, cfg, derive_seed(cfg.seed, "batching", epoch));
    double total = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const double l = train_step(params, net, train_src, batches[b], cfg.learning_rate);
      if (!std::isfinite(l)) {
        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) +
                               ", batch " + std::to_string(b + 1));
      }
      total += l;
    }
    EpochRecord rec{epoch, total / static_cast<double>(batches.size()),
                    validation_error(params, net, val_src, val_pairs, cfg.validation_metric)};
    if (!std::isfinite(rec.validation_error)) {
      throw TrainingDiverged("non-finite validation error at epoch " + std::to_string(epoch));
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stopping.observe(rec.validation_error)) {
      result.best_epoch = epoch;
      result.params = params.snapshot_values();
    } else if (stopping.should_stop()) {
      result.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  return result;
}

inline void write_history_csv(std::span<const EpochRecord> history,
                              const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "epoch,train_loss,validation_error\n" << std::setprecision(17);
  for (const auto& r : history) {
    out << r.epoch << ',' << r.train_loss << ',' << r.validation_error << '\n';
  }
}

}  // namespace fusedesc
