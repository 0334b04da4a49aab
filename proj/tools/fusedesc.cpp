// fusedesc command-line tool.

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <thread>

#include "CLI11.hpp"
#include "fusedesc/fusedesc.hpp"

namespace fs = std::filesystem;
using namespace fusedesc;

namespace {

constexpr const char* kOutputRootEnv = "FUSEDESC_OUTPUT_ROOT";

Json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json_file(const Json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string sanitize(std::string s) {
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-') c = '_';
  }
  return s;
}

// Flags that override the config file only when given on the command line.
struct Overrides {
  std::vector<std::function<void(RunConfig&)>> apply;

  template <class V>
  CLI::Option* value(CLI::App* app, const std::string& flag, const std::string& help,
                     std::function<void(RunConfig&, const V&)> set) {
    auto holder = std::make_shared<V>();
    CLI::Option* opt = app->add_option(flag, *holder, help);
    apply.push_back([opt, holder, set](RunConfig& r) {
      if (opt->count() > 0) set(r, *holder);
    });
    return opt;
  }

  CLI::Option* flag(CLI::App* app, const std::string& flag, const std::string& help,
                    std::function<void(RunConfig&)> set) {
    CLI::Option* opt = app->add_flag(flag, help);
    apply.push_back([opt, set](RunConfig& r) {
      if (opt->count() > 0) set(r);
    });
    return opt;
  }

  CLI::Option* path(CLI::App* app, const std::string& flag, const std::string& key,
                    const std::string& help) {
    return value<std::string>(app, flag, help,
                              [key](RunConfig& r, const std::string& v) { r.paths[key] = v; });
  }

  template <class V>
  CLI::Option* option(CLI::App* app, const std::string& flag, const std::string& key,
                      const std::string& help) {
    return value<V>(app, flag, help, [key](RunConfig& r, const V& v) { r.options[key] = v; });
  }
};

struct Command {
  std::string name;
  CLI::App* app = nullptr;
  std::string config_file;
  Overrides overrides;
  std::vector<std::string> path_keys;
  std::vector<std::string> option_keys;
  std::function<int(const RunConfig&, const fs::path&)> run;
};

void add_common(Command& c) {
  c.app->add_option("-c,--config", c.config_file, "JSON run config; flags override its values")
      ->check(CLI::ExistingFile);
  c.overrides.value<std::string>(c.app, "-o,--out-dir", "output directory",
                                 [](RunConfig& r, const std::string& v) { r.output_dir = v; });
  c.overrides.value<std::uint64_t>(c.app, "--seed", "run seed",
                                   [](RunConfig& r, const std::uint64_t& v) { r.seed = v; });
}

void add_network_flags(Command& c) {
  auto& o = c.overrides;
  auto* app = c.app;
  using S = std::size_t;
  o.value<S>(app, "--modules", "convolutional modules M",
             [](RunConfig& r, const S& v) { r.network.modules = v; });
  o.flag(app, "--drop-final-pool", "omit the last module's max pooling (\"-mp\")",
         [](RunConfig& r) { r.network.drop_final_maxpool = true; });
  o.value<S>(app, "--filters", "filters in the first module",
             [](RunConfig& r, const S& v) { r.network.first_module_filters = v; });
  o.value<S>(app, "--dct", "DCT coefficients fused (0 disables)",
             [](RunConfig& r, const S& v) { r.network.dct_coefficients = v; });
  o.value<S>(app, "--fc-width", "width of the fully connected layer",
             [](RunConfig& r, const S& v) { r.network.fc_width = v; });
  o.value<S>(app, "-B,--bits", "descriptor length B",
             [](RunConfig& r, const S& v) { r.network.descriptor_size = v; });
  o.flag(app, "--tanh-bottleneck", "tanh on the descriptor layer",
         [](RunConfig& r) { r.network.tanh_bottleneck = true; });
}

void add_training_flags(Command& c) {
  auto& o = c.overrides;
  auto* app = c.app;
  using S = std::size_t;
  o.value<double>(app, "--lr", "Adagrad learning rate",
                  [](RunConfig& r, const double& v) { r.training.learning_rate = v; });
  o.value<S>(app, "--batch-matching", "matching pairs per batch",
             [](RunConfig& r, const S& v) { r.training.matching_per_batch = v; });
  o.value<S>(app, "--batch-nonmatching", "non-matching pairs per batch",
             [](RunConfig& r, const S& v) { r.training.nonmatching_per_batch = v; });
  o.value<S>(app, "--epochs", "maximum epochs",
             [](RunConfig& r, const S& v) { r.training.max_epochs = v; });
  o.value<S>(app, "--patience", "epochs without validation improvement before stopping",
             [](RunConfig& r, const S& v) { r.training.patience_epochs = v; });
  o.value<double>(app, "--validation-fraction", "share of training pairs held out",
                  [](RunConfig& r, const double& v) { r.training.validation_fraction = v; });
  o.value<std::string>(app, "--validation-metric", "loss or fpr_at_tpr95",
                       [](RunConfig& r, const std::string& v) {
                         r.training = training_config_from_json(
                             Json{{"validation_metric", v}}, r.training);
                       });
  o.option<std::string>(app, "--dct-normalization", "dct_normalization",
                        "per_coefficient (default) or global");
}

void add_synthetic_flags(Command& c) {
  auto& o = c.overrides;
  auto* app = c.app;
  using S = std::size_t;
  o.value<S>(app, "--base-patches", "distinct synthetic textures",
             [](RunConfig& r, const S& v) { r.synthetic.base_patches = v; });
  o.value<S>(app, "--matching", "matching pairs",
             [](RunConfig& r, const S& v) { r.synthetic.matching_pairs = v; });
  o.value<S>(app, "--nonmatching", "non-matching pairs",
             [](RunConfig& r, const S& v) { r.synthetic.nonmatching_pairs = v; });
  o.value<double>(app, "--noise", "additive noise std in grey levels",
                  [](RunConfig& r, const double& v) { r.synthetic.noise_std = v; });
  o.value<double>(app, "--shift", "maximum sub-pixel shift",
                  [](RunConfig& r, const double& v) { r.synthetic.shift_range = v; });
  o.value<double>(app, "--illumination", "illumination jitter",
                  [](RunConfig& r, const double& v) { r.synthetic.illumination_jitter = v; });
}

fs::path default_output_dir(const std::string& subcommand) {
  const char* root = std::getenv(kOutputRootEnv);
  return fs::path(root && *root ? root : "runs") / subcommand;
}

RunConfig resolve(Command& c) {
  RunConfig r;
  if (!c.config_file.empty()) {
    r = run_config_from_json(read_json_file(c.config_file));
    if (!r.subcommand.empty() && r.subcommand != c.name) {
      throw ConfigError("config file is for '" + r.subcommand + "', not '" + c.name + "'");
    }
  }
  r.subcommand = c.name;
  for (auto& f : c.overrides.apply) f(r);
  for (const auto& [k, v] : r.paths) {
    if (std::find(c.path_keys.begin(), c.path_keys.end(), k) == c.path_keys.end()) {
      throw ConfigError(c.name + ": unknown path '" + k + "'");
    }
  }
  for (const auto& [k, v] : r.options.items()) {
    if (std::find(c.option_keys.begin(), c.option_keys.end(), k) == c.option_keys.end()) {
      throw ConfigError(c.name + ": unknown option '" + k + "'");
    }
  }
  r.training.seed = r.seed;
  r.synthetic.seed = r.seed;
  if (r.output_dir.empty()) r.output_dir = default_output_dir(c.name).string();
  r.network.validate();
  r.training.validate();
  r.synthetic.validate();
  return r;
}

const std::string& need_path(const RunConfig& r, const std::string& key) {
  auto it = r.paths.find(key);
  if (it == r.paths.end() || it->second.empty()) {
    throw ConfigError(r.subcommand + ": missing required path '" + key + "'");
  }
  return it->second;
}

std::optional<std::string> maybe_path(const RunConfig& r, const std::string& key) {
  auto it = r.paths.find(key);
  if (it == r.paths.end() || it->second.empty()) return std::nullopt;
  return it->second;
}

template <class V>
V option_or(const RunConfig& r, const std::string& key, V fallback) {
  auto it = r.options.find(key);
  if (it == r.options.end()) return fallback;
  try {
    return it->get<V>();
  } catch (const Json::exception&) {
    throw ConfigError(r.subcommand + ": option '" + key + "' has the wrong type");
  }
}

DctNormalization dct_mode(const RunConfig& r) {
  const auto m = option_or<std::string>(r, "dct_normalization", "per_coefficient");
  if (m == "per_coefficient") return DctNormalization::kPerCoefficient;
  if (m == "global") return DctNormalization::kGlobal;
  throw ConfigError("dct_normalization must be per_coefficient or global");
}

// Pairs from a CSV listing, a Brown m50 listing (.txt), or sampled from the
// store when no listing is given.
std::vector<PairSpec> pairs_for(const RunConfig& r, const std::string& key,
                                const PatchStore& store, const std::string& sample_key) {
  if (auto p = maybe_path(r, key)) {
    auto pairs = fs::path(*p).extension() == ".txt" ? load_brown_pairs(*p, store)
                                                    : load_pairs_csv(*p);
    validate_pairs(store, pairs);
    return pairs;
  }
  const auto n = option_or<std::size_t>(r, sample_key, 0);
  if (n == 0) {
    throw ConfigError(r.subcommand + ": give '" + key + "' or a positive '" + sample_key + "'");
  }
  return sample_pairs(store, n, n, derive_seed(r.seed, "sampling-" + key));
}

void log_epoch(const EpochRecord& e) {
  std::cout << "epoch " << e.epoch << "  train_loss " << std::setprecision(6) << e.train_loss
            << "  validation " << e.validation_error << std::endl;
}

void write_eval_outputs(const std::vector<ScoredPair>& scores, const EvalReport& rep,
                        const fs::path& dir, const std::string& stem) {
  write_roc_csv(rep.curve, dir / (stem + "roc.csv"));
  write_roc_svg({{rep.config.empty() ? "ROC" : rep.config, rep.curve}}, "ROC", dir / (stem + "roc.svg"));
  write_scored_csv(scores, dir / (stem + "scores.csv"));
  write_json_file(Json{{"fpr_at_tpr95", rep.fpr_at_tpr95},
                       {"positives", rep.positives},
                       {"negatives", rep.negatives},
                       {"config", rep.config}},
                  dir / (stem + "report.json"));
}

// ---------------------------------------------------------------------------
// Subcommands.

int cmd_ingest(const RunConfig& r, const fs::path& out) {
  const auto store = ingest_brown(need_path(r, "src"));
  save_store(store, out / "store.pfps");
  std::set<std::uint64_t> points(store.point_ids().begin(), store.point_ids().end());
  std::cout << "ingested " << store.size() << " patches of " << points.size() << " points into "
            << (out / "store.pfps").string() << '\n';
  return 0;
}

int cmd_synth(const RunConfig& r, const fs::path& out) {
  const auto data = generate_synthetic(r.synthetic);
  save_store(data.store, out / "store.pfps");
  save_pairs_csv(data.pairs, out / "pairs.csv");
  std::cout << "wrote " << data.store.size() << " patches and " << data.pairs.size()
            << " pairs to " << out.string() << '\n';
  return 0;
}

int cmd_train(const RunConfig& r, const fs::path& out) {
  const auto store = load_store(need_path(r, "store"));
  const auto pairs = pairs_for(r, "pairs", store, "sample");
  std::vector<PairSpec> train_pairs, val_pairs;
  PatchStore val_store_data;
  const PatchStore* val_store = &store;
  if (auto vs = maybe_path(r, "val_store")) {
    val_store_data = load_store(*vs);
    val_store = &val_store_data;
    train_pairs = pairs;
    val_pairs = pairs_for(r, "val_pairs", val_store_data, "val_sample");
  } else {
    std::tie(train_pairs, val_pairs) = split_train_validation(
        pairs, r.training.validation_fraction, derive_seed(r.training.seed, "split"));
  }
  const auto stats = fit_stats_for_pairs<float>(store, train_pairs, r.network, dct_mode(r));
  std::cout << "training " << r.network.label() << " B=" << r.network.descriptor_size << " ("
            << parameter_count(r.network) << " parameters) on " << train_pairs.size()
            << " pairs, validating on " << val_pairs.size() << '\n';
  const auto result = train<float>(store, train_pairs, *val_store, val_pairs, r.network,
                                   r.training, stats, log_epoch);
  save_checkpoint(result.params, out / "checkpoint.pfck");
  save_preproc_stats(stats, out / "stats.pfst");
  write_history_csv(result.history, out / "history.csv");
  if (result.stopped_early) {
    std::cout << "stopped at epoch " << result.history.back().epoch << " (patience "
              << r.training.patience_epochs << ")\n";
  }
  std::cout << "best epoch " << result.best_epoch << ", validation "
            << result.history[result.best_epoch - 1].validation_error << '\n';
  return 0;
}

struct Model {
  NetworkConfig network;
  ParameterStore<float> params;
  PreprocStats stats;
};

Model load_model(const fs::path& dir) {
  Model m;
  m.network = run_config_from_json(read_json_file(dir / "config.json")).network;
  m.stats = load_preproc_stats(dir / "stats.pfst");
  try {
    m.params = load_checkpoint_for<float>(dir / "checkpoint.pfck", m.network);
  } catch (const ConfigError& e) {
    throw CompatibilityError(std::string("checkpoint does not fit its config: ") + e.what());
  }
  if (m.stats.dct.mean.size() != m.network.dct_coefficients) {
    throw CompatibilityError("stats hold " + std::to_string(m.stats.dct.mean.size()) +
                             " DCT coefficients, network expects " +
                             std::to_string(m.network.dct_coefficients));
  }
  return m;
}

int cmd_extract(const RunConfig& r, const fs::path& out) {
  auto model = load_model(need_path(r, "model"));
  const auto store = load_store(need_path(r, "store"));
  const bool binary = option_or<bool>(r, "binary", false);
  const auto set = extract_descriptors<float>(store, model.params, model.network, model.stats,
                                              binary ? DescriptorKind::kBinary
                                                     : DescriptorKind::kReal);
  const auto file = out / (binary ? "binary.pfds" : "descriptors.pfds");
  save_descriptors(set, file);
  std::cout << "wrote " << set.count << (binary ? " binary" : " real") << " descriptors (B="
            << set.bits << ") to " << file.string() << '\n';
  return 0;
}

int cmd_quantize(const RunConfig& r, const fs::path& out) {
  const auto bin = quantize_set(load_descriptors(need_path(r, "descriptors")));
  save_descriptors(bin, out / "binary.pfds");
  std::cout << "quantized " << bin.count << " descriptors to " << (out / "binary.pfds").string()
            << '\n';
  return 0;
}

int cmd_match(const RunConfig& r, const fs::path& out) {
  const auto a = load_descriptors(need_path(r, "a"));
  const auto b = load_descriptors(need_path(r, "b"));
  std::vector<double> d;
  if (auto p = maybe_path(r, "pairs")) {
    d = match_pairs(a, b, load_pairs_csv(*p));
  } else {
    d = match_rows(a, b);
  }
  write_distances_csv(d, out / "distances.csv");
  std::cout << "wrote " << d.size() << " distances to " << (out / "distances.csv").string()
            << '\n';
  return 0;
}

int cmd_eval(const RunConfig& r, const fs::path& out) {
  std::vector<ScoredPair> scores;
  if (auto s = maybe_path(r, "scores")) {
    scores = read_scored_csv(*s);
  } else {
    const auto pairs = load_pairs_csv(need_path(r, "pairs"));
    scores = score(pairs, read_distances_csv(need_path(r, "distances")));
  }
  const auto rep = evaluate(scores, option_or<std::string>(r, "label", ""));
  write_eval_outputs(scores, rep, out, "");
  std::cout << "fpr_at_tpr95 " << std::setprecision(17) << rep.fpr_at_tpr95 << " ("
            << rep.positives << " matching, " << rep.negatives << " non-matching)\n";
  return 0;
}

int cmd_analyze(const RunConfig& r, const fs::path& out) {
  const auto a = read_scored_csv(need_path(r, "a"));
  const auto b = read_scored_csv(need_path(r, "b"));
  const double threshold = option_or<double>(r, "threshold", 0.325);
  const auto k = option_or<std::size_t>(r, "k", 5);
  const auto rep = error_overlap(a, b, threshold);
  write_overlap_csv(rep, out / "overlap.csv");

  std::ofstream top(out / "top_errors.csv");
  top << "run,class,rank,pair_id,distance\n" << std::setprecision(17);
  for (const auto& [name, run] : {std::pair{"a", &a}, std::pair{"b", &b}}) {
    std::unordered_map<std::uint64_t, double> dist;
    for (const auto& p : *run) dist[p.id] = p.distance;
    for (auto [cls, label] : {std::pair{ErrorClass::kFalsePositive, "false_positive"},
                              std::pair{ErrorClass::kFalseNegative, "false_negative"}}) {
      const auto ids = top_k_errors(*run, cls, k);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        top << name << ',' << label << ',' << i + 1 << ',' << ids[i] << ',' << dist[ids[i]]
            << '\n';
      }
    }
  }
  std::cout << "common false negatives " << rep.false_negatives.intersection << '/'
            << rep.false_negatives.union_size << ", common false positives "
            << rep.false_positives.intersection << '/' << rep.false_positives.union_size
            << " at threshold " << threshold << '\n';
  return 0;
}

// One configuration of a sweep.
struct SweepRow {
  NetworkConfig network;
  std::string status = "planned";
  std::string error;
  double fpr_binary = std::nan("");
  double fpr_real = std::nan("");
};

std::vector<SweepRow> sweep_rows(const std::string& kind, const NetworkConfig& base) {
  std::vector<SweepRow> rows;
  auto add = [&](std::size_t m, bool mp, std::size_t dct, std::size_t bits) {
    SweepRow row;
    row.network = base;
    row.network.modules = m;
    row.network.drop_final_maxpool = mp;
    row.network.dct_coefficients = dct;
    row.network.descriptor_size = bits;
    rows.push_back(row);
  };
  const std::size_t fd = base.dct_coefficients > 0 ? base.dct_coefficients : 561;
  if (kind == "table1") {
    for (std::size_t m : {2, 3, 4}) {
      add(m, false, 0, base.descriptor_size);
      add(m, true, 0, base.descriptor_size);
    }
  } else if (kind == "table2") {
    for (auto [m, mp] : {std::pair<std::size_t, bool>{3, false}, {4, true}, {4, false}}) {
      add(m, mp, 0, base.descriptor_size);
      add(m, mp, fd, base.descriptor_size);
    }
  } else if (kind == "bitrate") {
    for (std::size_t b : {64, 128, 192, 256}) {
      add(base.modules, base.drop_final_maxpool, base.dct_coefficients, b);
    }
  } else {
    throw ConfigError("sweep kind must be table1, table2 or bitrate, got '" + kind + "'");
  }
  return rows;
}

struct SweepData {
  PatchStore train_store, test_store;
  std::vector<PairSpec> train_pairs, test_pairs;
  std::string setup;
};

SweepData sweep_data(const RunConfig& r) {
  SweepData d;
  if (maybe_path(r, "train_store")) {
    d.train_store = load_store(need_path(r, "train_store"));
    d.test_store = load_store(need_path(r, "test_store"));
    d.train_pairs = pairs_for(r, "train_pairs", d.train_store, "sample");
    d.test_pairs = pairs_for(r, "test_pairs", d.test_store, "test_sample");
    d.setup = d.train_store.name() + "/" + d.test_store.name();
    return d;
  }
  // Held-out synthetic test data: a fifth of the training spec, fresh seed.
  SyntheticSpec test = r.synthetic;
  test.seed = derive_seed(r.seed, "test-data");
  test.base_patches = std::max<std::size_t>(2, r.synthetic.base_patches / 5);
  test.matching_pairs = r.synthetic.matching_pairs / 5;
  test.nonmatching_pairs =
      std::min(r.synthetic.nonmatching_pairs / 5, test.base_patches * (test.base_patches - 1) / 2);
  auto train = generate_synthetic(r.synthetic);
  auto held = generate_synthetic(test);
  d.train_store = std::move(train.store);
  d.train_pairs = std::move(train.pairs);
  d.test_store = std::move(held.store);
  d.test_pairs = std::move(held.pairs);
  d.setup = "synthetic";
  return d;
}

void run_sweep_row(const RunConfig& r, const SweepData& data, SweepRow& row,
                   const fs::path& dir, std::mutex& log) {
  fs::create_directories(dir);
  RunConfig echo = r;
  echo.subcommand = "train";
  echo.network = row.network;
  echo.output_dir = dir.string();
  echo.options = Json::object();
  write_json_file(to_json(echo), dir / "config.json");
  try {
    const auto res = run_on_data(data.train_store, data.train_pairs, data.test_store,
                                 data.test_pairs, row.network, r.training, dct_mode(r));
    save_checkpoint(res.trained.params, dir / "checkpoint.pfck");
    save_preproc_stats(res.stats, dir / "stats.pfst");
    write_history_csv(res.trained.history, dir / "history.csv");
    write_eval_outputs(res.binary_scores, res.binary_report, dir, "binary_");
    write_eval_outputs(res.real_scores, res.real_report, dir, "real_");
    row.fpr_binary = res.binary_report.fpr_at_tpr95;
    row.fpr_real = res.real_report.fpr_at_tpr95;
    row.status = "ok";
  } catch (const std::exception& e) {
    row.status = "failed";
    row.error = e.what();
  }
  std::lock_guard lock(log);
  std::cout << row.network.label() << " B=" << row.network.descriptor_size << ": " << row.status;
  if (row.status == "ok") std::cout << ", binary fpr_at_tpr95 " << row.fpr_binary;
  if (!row.error.empty()) std::cout << " (" << row.error << ")";
  std::cout << std::endl;
}

int cmd_sweep(const RunConfig& r, const fs::path& out) {
  const auto kind = option_or<std::string>(r, "kind", "");
  auto rows = sweep_rows(kind, r.network);
  const bool dry_run = option_or<bool>(r, "dry_run", false);
  const auto jobs = std::max<std::size_t>(1, option_or<std::size_t>(r, "jobs", 1));

  std::string setup = "synthetic";
  if (!dry_run) {
    const auto data = sweep_data(r);
    setup = data.setup;
    std::mutex log;
    std::vector<std::thread> workers;
    std::atomic<std::size_t> next{0};
    auto work = [&] {
      for (std::size_t i; (i = next++) < rows.size();) {
        run_sweep_row(r, data, rows[i],
                      out / (std::to_string(i + 1) + "-" + sanitize(rows[i].network.label()) +
                             "-B" + std::to_string(rows[i].network.descriptor_size)),
                      log);
      }
    };
    for (std::size_t t = 1; t < jobs; ++t) workers.emplace_back(work);
    work();
    for (auto& w : workers) w.join();
  } else if (maybe_path(r, "train_store")) {
    setup = load_store(need_path(r, "train_store")).name() + "/" +
            load_store(need_path(r, "test_store")).name();
  }

  std::vector<SummaryRow> summary;
  Json listing = Json::array();
  for (const auto& row : rows) {
    const auto f = feature_counts(row.network);
    summary.push_back({setup, row.network.descriptor_size, row.network.label(), row.fpr_binary});
    Json j{{"config", row.network.label()},
           {"B", row.network.descriptor_size},
           {"F_C", f.conv_features},
           {"F_D", row.network.dct_coefficients},
           {"featuremaps", f.maps},
           {"featuremap_side", f.map_side},
           {"parameters", parameter_count(row.network)},
           {"status", row.status}};
    if (row.status == "ok") {
      j["fpr_at_tpr95_binary"] = row.fpr_binary;
      j["fpr_at_tpr95_real"] = row.fpr_real;
    }
    if (!row.error.empty()) j["error"] = row.error;
    listing.push_back(j);
    if (dry_run) {
      std::cout << std::left << std::setw(10) << row.network.label() << " B=" << std::setw(4)
                << row.network.descriptor_size << " F_C=" << std::setw(6) << f.conv_features
                << " F_D=" << std::setw(4) << row.network.dct_coefficients
                << " parameters=" << parameter_count(row.network) << '\n';
    }
  }
  write_summary_csv(summary, out / "summary.csv");
  write_json_file(Json{{"kind", kind}, {"setup", setup}, {"rows", listing}}, out / "sweep.json");
  const bool failed = std::any_of(rows.begin(), rows.end(),
                                  [](const SweepRow& row) { return row.status == "failed"; });
  if (failed) std::cerr << "some sweep runs failed; see sweep.json\n";
  return failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fused convolutional and DCT patch descriptors: training, extraction, matching "
               "and evaluation.\nDefault output root: $" +
               std::string(kOutputRootEnv) + " (or ./runs)."};
  app.require_subcommand(1);
  std::vector<std::unique_ptr<Command>> commands;
  auto add = [&](const std::string& name, const std::string& help,
                 std::function<int(const RunConfig&, const fs::path&)> run) -> Command& {
    auto c = std::make_unique<Command>();
    c->name = name;
    c->app = app.add_subcommand(name, help);
    c->run = std::move(run);
    add_common(*c);
    commands.push_back(std::move(c));
    return *commands.back();
  };

  {
    auto& c = add("ingest", "read a Brown-layout directory into a patch store", cmd_ingest);
    c.path_keys = {"src"};
    c.overrides.path(c.app, "src,--src", "src", "directory with patchesNNNN.bmp and info.txt");
  }
  {
    auto& c = add("synth", "generate a synthetic patch store and pair list", cmd_synth);
    add_synthetic_flags(c);
  }
  {
    auto& c = add("train", "train a descriptor network", cmd_train);
    c.path_keys = {"store", "pairs", "val_store", "val_pairs"};
    c.option_keys = {"sample", "val_sample", "dct_normalization"};
    c.overrides.path(c.app, "--store", "store", "training patch store (.pfps)");
    c.overrides.path(c.app, "--pairs", "pairs", "pair list (.csv, or Brown .txt)");
    c.overrides.path(c.app, "--val-store", "val_store", "separate validation store");
    c.overrides.path(c.app, "--val-pairs", "val_pairs", "validation pair list");
    c.overrides.option<std::size_t>(c.app, "--sample", "sample",
                                    "sample this many pairs per class when no list is given");
    c.overrides.option<std::size_t>(c.app, "--val-sample", "val_sample",
                                    "validation pairs per class to sample");
    add_network_flags(c);
    add_training_flags(c);
  }
  {
    auto& c = add("extract", "compute descriptors for every patch of a store", cmd_extract);
    c.path_keys = {"model", "store"};
    c.option_keys = {"binary"};
    c.overrides.path(c.app, "--model", "model", "training output directory");
    c.overrides.path(c.app, "--store", "store", "patch store (.pfps)");
    c.overrides.flag(c.app, "--binary", "sign-quantize while extracting",
                     [](RunConfig& r) { r.options["binary"] = true; });
  }
  {
    auto& c = add("quantize", "sign-quantize real-valued descriptors", cmd_quantize);
    c.path_keys = {"descriptors"};
    c.overrides.path(c.app, "descriptors,--descriptors", "descriptors", "real descriptors (.pfds)");
  }
  {
    auto& c = add("match", "distances between two descriptor sets", cmd_match);
    c.path_keys = {"a", "b", "pairs"};
    c.overrides.path(c.app, "a,--a", "a", "first descriptor set");
    c.overrides.path(c.app, "b,--b", "b", "second descriptor set");
    c.overrides.path(c.app, "--pairs", "pairs",
                     "pair list; index_a and index_b refer to patch ids in a and b "
                     "(default: row i against row i)");
  }
  {
    auto& c = add("eval", "ROC and FPR at 95% TPR", cmd_eval);
    c.path_keys = {"scores", "distances", "pairs"};
    c.option_keys = {"label"};
    c.overrides.path(c.app, "--scores", "scores", "scored pairs (pair_id,label,distance)");
    c.overrides.path(c.app, "--distances", "distances", "distances CSV from match");
    c.overrides.path(c.app, "--pairs", "pairs", "pair list giving the labels");
    c.overrides.option<std::string>(c.app, "--label", "label", "curve label");
  }
  {
    auto& c = add("sweep", "train and evaluate a family of configurations", cmd_sweep);
    c.path_keys = {"train_store", "train_pairs", "test_store", "test_pairs"};
    c.option_keys = {"kind", "dry_run", "jobs", "sample", "test_sample", "dct_normalization"};
    c.overrides.option<std::string>(c.app, "kind,--kind", "kind", "table1, table2 or bitrate");
    c.overrides.flag(c.app, "--dry-run", "list the configurations without training",
                     [](RunConfig& r) { r.options["dry_run"] = true; });
    c.overrides.option<std::size_t>(c.app, "-j,--jobs", "jobs", "configurations run in parallel");
    c.overrides.path(c.app, "--train-store", "train_store", "training store (default: synthetic)");
    c.overrides.path(c.app, "--train-pairs", "train_pairs", "training pair list");
    c.overrides.path(c.app, "--test-store", "test_store", "test store");
    c.overrides.path(c.app, "--test-pairs", "test_pairs", "test pair list");
    c.overrides.option<std::size_t>(c.app, "--sample", "sample", "training pairs per class");
    c.overrides.option<std::size_t>(c.app, "--test-sample", "test_sample", "test pairs per class");
    add_network_flags(c);
    add_training_flags(c);
    add_synthetic_flags(c);
  }
  {
    auto& c = add("analyze-errors", "overlap and top-K errors of two scored runs", cmd_analyze);
    c.path_keys = {"a", "b"};
    c.option_keys = {"threshold", "k"};
    c.overrides.path(c.app, "a,--a", "a", "scores CSV of the first run");
    c.overrides.path(c.app, "b,--b", "b", "scores CSV of the second run");
    c.overrides.option<double>(c.app, "--threshold", "threshold", "match threshold (0.325)");
    c.overrides.option<std::size_t>(c.app, "-k", "k", "errors listed per class (5)");
  }

  CLI11_PARSE(app, argc, argv);

  for (auto& c : commands) {
    if (!c->app->parsed()) continue;
    try {
      const RunConfig r = resolve(*c);
      const fs::path out = r.output_dir;
      fs::create_directories(out);
      write_json_file(to_json(r), out / "config.json");
      return c->run(r, out);
    } catch (const ConfigError& e) {
      std::cerr << c->name << ": configuration error: " << e.what() << '\n';
      return 2;
    } catch (const std::exception& e) {
      std::cerr << c->name << ": " << e.what() << '\n';
      return 1;
    }
  }
  return 1;
}
