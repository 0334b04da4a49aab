#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fusedesc/binary_io.hpp"
#include "fusedesc/errors.hpp"
#include "fusedesc/image_io.hpp"
#include "fusedesc/json_util.hpp"
#include "fusedesc/rng.hpp"
#include "fusedesc/tensor.hpp"

namespace fusedesc {

inline constexpr std::size_t kPatchSide = 64;
inline constexpr std::size_t kPatchPixels = kPatchSide * kPatchSide;
inline constexpr std::size_t kMosaicSide = 1024;
inline constexpr std::size_t kMosaicGrid = kMosaicSide / kPatchSide;        // 16
inline constexpr std::size_t kPatchesPerMosaic = kMosaicGrid * kMosaicGrid;  // 256

// 64x64 8-bit patches with the 3D-point identity of each.
class PatchStore {
 public:
  PatchStore() = default;
  explicit PatchStore(std::string name) : name_(std::move(name)) {}

  const std::string& name() const noexcept { return name_; }
  void set_name(std::string n) { name_ = std::move(n); }
  std::size_t size() const noexcept { return point_ids_.size(); }

  void add(std::span<const std::uint8_t> pixels, std::uint64_t point_id) {
    if (pixels.size() != kPatchPixels) {
      throw DimensionError("patch must be 64x64, got " + std::to_string(pixels.size()) +
                           " pixels");
    }
    pixels_.insert(pixels_.end(), pixels.begin(), pixels.end());
    point_ids_.push_back(point_id);
  }

  std::span<const std::uint8_t> bytes(std::size_t i) const {
    if (i >= size()) throw BoundsError("patch index " + std::to_string(i) + " out of range");
    return {pixels_.data() + i * kPatchPixels, kPatchPixels};
  }

  std::uint64_t point_id(std::size_t i) const { return point_ids_.at(i); }
  const std::vector<std::uint64_t>& point_ids() const noexcept { return point_ids_; }
  const std::vector<std::uint8_t>& pixels() const noexcept { return pixels_; }

  // Patch as a [64,64] tensor of grey levels 0..255.
  template <class T>
  Tensor<T> patch(std::size_t i) const {
    const auto b = bytes(i);
    return Tensor<T>({kPatchSide, kPatchSide}, std::vector<T>(b.begin(), b.end()));
  }

  friend bool operator==(const PatchStore& a, const PatchStore& b) {
    return a.pixels_ == b.pixels_ && a.point_ids_ == b.point_ids_;
  }

 private:
  std::string name_;
  std::vector<std::uint8_t> pixels_;
  std::vector<std::uint64_t> point_ids_;
};

struct PairSpec {
  std::size_t index_a = 0;
  std::size_t index_b = 0;
  int label = 0;  // 1 = same 3D point

  friend bool operator==(const PairSpec&, const PairSpec&) = default;
};

inline int pair_label(const PatchStore& store, std::size_t a, std::size_t b) {
  return store.point_id(a) == store.point_id(b) ? 1 : 0;
}

// Checks indices and that every label agrees with the point identities.
inline void validate_pairs(const PatchStore& store, std::span<const PairSpec> pairs) {
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (p.index_a >= store.size() || p.index_b >= store.size()) {
      throw BoundsError("pair " + std::to_string(i) + " references a patch outside the store");
    }
    if (p.index_a == p.index_b) {
      throw ConsistencyError("pair " + std::to_string(i) + " uses the same patch twice");
    }
    if (p.label != pair_label(store, p.index_a, p.index_b)) {
      throw ConsistencyError("pair " + std::to_string(i) +
                             " label disagrees with the point identities");
    }
  }
}

// ---------------------------------------------------------------------------
// Brown-style layout: patchesNNNN.bmp mosaics (1024x1024, 16x16 grid of
// 64x64 patches, row-major) plus info.txt whose first token per line is the
// 3D point id of the corresponding patch.

inline std::vector<std::filesystem::path> list_mosaics(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto name = entry.path().filename().string();
    auto ext = entry.path().extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (name.rfind("patches", 0) == 0 && (ext == ".bmp" || ext == ".png")) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

inline std::vector<std::uint64_t> read_info_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConsistencyError("missing info file " + path.string());
  std::vector<std::uint64_t> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    long long id;
    if (!(ls >> id)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      throw FormatError(path.filename().string() + ": bad line " + std::to_string(line_no), 0);
    }
    if (id < 0) throw FormatError("negative point id on line " + std::to_string(line_no), 0);
    ids.push_back(static_cast<std::uint64_t>(id));
  }
  return ids;
}

// The info file fixes the patch count; the last mosaic may be partially
// filled, so the count must land within the final mosaic.
inline PatchStore ingest_brown(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DatasetError("not a directory: " + dir.string());
  const auto mosaics = list_mosaics(dir);
  if (mosaics.empty()) throw DatasetError("no patch mosaics in " + dir.string());
  const auto ids = read_info_file(dir / "info.txt");
  const std::size_t capacity = mosaics.size() * kPatchesPerMosaic;
  if (ids.size() > capacity || ids.size() + kPatchesPerMosaic <= capacity) {
    throw ConsistencyError("info.txt lists " + std::to_string(ids.size()) + " patches but " +
                           std::to_string(mosaics.size()) + " mosaics hold up to " +
                           std::to_string(capacity));
  }
  PatchStore store(dir.filename().string());
  std::vector<std::uint8_t> patch(kPatchPixels);
  for (std::size_t m = 0; m < mosaics.size(); ++m) {
    const GrayImage img = load_gray_image(mosaics[m]);
    if (img.width != kMosaicSide || img.height != kMosaicSide) {
      throw FormatError(mosaics[m].filename().string() + ": mosaic is " +
                            std::to_string(img.width) + "x" + std::to_string(img.height) +
                            ", expected 1024x1024",
                        18);
    }
    for (std::size_t cell = 0; cell < kPatchesPerMosaic; ++cell) {
      const std::size_t index = m * kPatchesPerMosaic + cell;
      if (index >= ids.size()) break;
      const std::size_t r0 = (cell / kMosaicGrid) * kPatchSide;
      const std::size_t c0 = (cell % kMosaicGrid) * kPatchSide;
      for (std::size_t y = 0; y < kPatchSide; ++y) {
        std::copy_n(img.pixels.begin() + (r0 + y) * kMosaicSide + c0, kPatchSide,
                    patch.begin() + y * kPatchSide);
      }
      store.add(patch, ids[index]);
    }
  }
  return store;
}

// Writes a store as mosaics + info.txt (the inverse of ingest_brown).
inline void write_brown(const PatchStore& store, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t mosaics = (store.size() + kPatchesPerMosaic - 1) / kPatchesPerMosaic;
  for (std::size_t m = 0; m < mosaics; ++m) {
    GrayImage img{kMosaicSide, kMosaicSide,
                  std::vector<std::uint8_t>(kMosaicSide * kMosaicSide, 0), false};
    for (std::size_t cell = 0; cell < kPatchesPerMosaic; ++cell) {
      const std::size_t index = m * kPatchesPerMosaic + cell;
      if (index >= store.size()) break;
      const auto b = store.bytes(index);
      const std::size_t r0 = (cell / kMosaicGrid) * kPatchSide;
      const std::size_t c0 = (cell % kMosaicGrid) * kPatchSide;
      for (std::size_t y = 0; y < kPatchSide; ++y) {
        std::copy_n(b.begin() + y * kPatchSide, kPatchSide,
                    img.pixels.begin() + (r0 + y) * kMosaicSide + c0);
      }
    }
    char name[32];
    std::snprintf(name, sizeof name, "patches%04zu.bmp", m);
    save_bmp(img, dir / name);
  }
  std::ofstream info(dir / "info.txt");
  for (std::uint64_t id : store.point_ids()) info << id << " 0\n";
}

// Pre-sampled Brown pair listings (m50_*.txt): "patchID1 pointID1 unused
// patchID2 pointID2 unused unused" per line.
inline std::vector<PairSpec> load_brown_pairs(const std::filesystem::path& path,
                                              const PatchStore& store) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open pair listing " + path.string());
  std::vector<PairSpec> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    long long a, pa, u1, b, pb;
    if (!(ls >> a >> pa >> u1 >> b >> pb) || a < 0 || b < 0) {
      throw FormatError(path.filename().string() + ": bad line " + std::to_string(line_no), 0);
    }
    PairSpec p{static_cast<std::size_t>(a), static_cast<std::size_t>(b), pa == pb ? 1 : 0};
    if (p.index_a >= store.size() || p.index_b >= store.size() ||
        store.point_id(p.index_a) != static_cast<std::uint64_t>(pa) ||
        store.point_id(p.index_b) != static_cast<std::uint64_t>(pb)) {
      throw ConsistencyError(path.filename().string() + ": line " + std::to_string(line_no) +
                             " disagrees with the patch store");
    }
    pairs.push_back(p);
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Pair sampling: uniform without replacement within each class, no duplicate
// unordered pairs, deterministic under the seed.

namespace detail {

inline std::uint64_t pair_key(std::size_t a, std::size_t b) {
  if (a > b) std::swap(a, b);
  return (static_cast<std::uint64_t>(a) << 32) | static_cast<std::uint64_t>(b);
}

}  // namespace detail

inline std::vector<PairSpec> sample_pairs(const PatchStore& store, std::size_t n_matching,
                                          std::size_t n_nonmatching, std::uint64_t seed) {
  const std::size_t n = store.size();
  if (n >= (std::size_t{1} << 32)) throw DatasetError("store too large for pair sampling");
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> groups_by_id;
  std::vector<std::uint64_t> id_order;
  for (std::size_t i = 0; i < n; ++i) {
    auto [it, inserted] = groups_by_id.try_emplace(store.point_id(i));
    if (inserted) id_order.push_back(store.point_id(i));
    it->second.push_back(i);
  }
  std::vector<const std::vector<std::size_t>*> groups;
  std::vector<std::uint64_t> cumulative;  // cumulative matching-pair counts
  std::uint64_t available_match = 0;
  for (auto id : id_order) {
    const auto& g = groups_by_id[id];
    const std::uint64_t c = g.size() * (g.size() - 1) / 2;
    if (c == 0) continue;
    available_match += c;
    groups.push_back(&g);
    cumulative.push_back(available_match);
  }
  const std::uint64_t total_pairs = static_cast<std::uint64_t>(n) * (n - (n > 0)) / 2;
  const std::uint64_t available_non = total_pairs - available_match;
  if (n_matching > available_match) {
    throw DatasetError("requested " + std::to_string(n_matching) + " matching pairs, only " +
                       std::to_string(available_match) + " exist");
  }
  if (n_nonmatching > available_non) {
    throw DatasetError("requested " + std::to_string(n_nonmatching) +
                       " non-matching pairs, only " + std::to_string(available_non) + " exist");
  }

  Rng rng(seed);
  std::vector<PairSpec> out;
  out.reserve(n_matching + n_nonmatching);

  // Dense requests enumerate the class and take a shuffled prefix; sparse
  // requests use rejection sampling.
  auto dense = [](std::uint64_t want, std::uint64_t avail) { return want * 2 > avail; };

  if (n_matching > 0) {
    if (dense(n_matching, available_match)) {
      std::vector<PairSpec> all;
      for (const auto* g : groups)
        for (std::size_t i = 0; i < g->size(); ++i)
          for (std::size_t j = i + 1; j < g->size(); ++j) all.push_back({(*g)[i], (*g)[j], 1});
      rng.shuffle(all);
      out.insert(out.end(), all.begin(), all.begin() + static_cast<long>(n_matching));
    } else {
      std::unordered_set<std::uint64_t> seen;
      while (seen.size() < n_matching) {
        const std::uint64_t r = rng.below(available_match);
        const std::size_t gi = static_cast<std::size_t>(
            std::upper_bound(cumulative.begin(), cumulative.end(), r) - cumulative.begin());
        const auto& g = *groups[gi];
        const std::size_t a = rng.below(g.size());
        std::size_t b = rng.below(g.size() - 1);
        if (b >= a) ++b;
        if (seen.insert(detail::pair_key(g[a], g[b])).second) out.push_back({g[a], g[b], 1});
      }
    }
  }
  if (n_nonmatching > 0) {
    if (dense(n_nonmatching, available_non)) {
      std::vector<PairSpec> all;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
          if (store.point_id(i) != store.point_id(j)) all.push_back({i, j, 0});
      rng.shuffle(all);
      out.insert(out.end(), all.begin(), all.begin() + static_cast<long>(n_nonmatching));
    } else {
      std::unordered_set<std::uint64_t> seen;
      while (seen.size() < n_nonmatching) {
        const std::size_t a = rng.below(n);
        std::size_t b = rng.below(n - 1);
        if (b >= a) ++b;
        if (store.point_id(a) == store.point_id(b)) continue;
        if (seen.insert(detail::pair_key(a, b)).second) out.push_back({a, b, 0});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic desk-scale data. Each base patch is a band-limited texture (a sum
// of random 2D cosines). A matching partner re-renders the same texture with a
// sub-pixel shift, a multiplicative illumination change and additive noise.

struct SyntheticSpec {
  std::size_t base_patches = 500;
  std::size_t matching_pairs = 500;
  std::size_t nonmatching_pairs = 500;
  double illumination_jitter = 0.2;  // gain drawn from 1 +- jitter
  double shift_range = 1.0;          // pixels, uniform in +-range per axis
  double noise_std = 4.0;            // grey levels
  std::size_t components = 12;
  double max_frequency = 6.0;        // cycles per patch
  std::uint64_t seed = 1;

  void validate() const {
    if (base_patches < 2) throw ConfigError("synthetic data needs at least 2 base patches");
    if (illumination_jitter < 0 || shift_range < 0 || noise_std < 0 || max_frequency < 0) {
      throw ConfigError("synthetic jitter amplitudes must be non-negative");
    }
    if (illumination_jitter >= 1.0) throw ConfigError("illumination_jitter must be below 1");
    if (components == 0) throw ConfigError("synthetic textures need at least one component");
  }
};

inline Json to_json(const SyntheticSpec& s) {
  return Json{{"base_patches", s.base_patches},
              {"matching_pairs", s.matching_pairs},
              {"nonmatching_pairs", s.nonmatching_pairs},
              {"illumination_jitter", s.illumination_jitter},
              {"shift_range", s.shift_range},
              {"noise_std", s.noise_std},
              {"components", s.components},
              {"max_frequency", s.max_frequency},
              {"seed", s.seed}};
}

inline SyntheticSpec synthetic_spec_from_json(const Json& j, SyntheticSpec s = {}) {
  constexpr const char* where = "synthetic spec";
  json_util::reject_unknown_keys(j,
                                 {"base_patches", "matching_pairs", "nonmatching_pairs",
                                  "illumination_jitter", "shift_range", "noise_std",
                                  "components", "max_frequency", "seed"},
                                 where);
  json_util::read_count(j, "base_patches", s.base_patches, where);
  json_util::read_count(j, "matching_pairs", s.matching_pairs, where);
  json_util::read_count(j, "nonmatching_pairs", s.nonmatching_pairs, where);
  json_util::read(j, "illumination_jitter", s.illumination_jitter, where);
  json_util::read(j, "shift_range", s.shift_range, where);
  json_util::read(j, "noise_std", s.noise_std, where);
  json_util::read_count(j, "components", s.components, where);
  json_util::read(j, "max_frequency", s.max_frequency, where);
  json_util::read_count(j, "seed", s.seed, where);
  s.validate();
  return s;
}

struct SyntheticData {
  PatchStore store;
  std::vector<PairSpec> pairs;
};

namespace detail {

struct Texture {
  struct Wave {
    double fx, fy, phase, amplitude;
  };
  std::vector<Wave> waves;

  static Texture random(Rng& rng, std::size_t components, double max_frequency) {
    Texture t;
    double power = 0.0;
    for (std::size_t k = 0; k < components; ++k) {
      const double radius = rng.uniform(0.5, std::max(0.5, max_frequency));
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double amp = rng.uniform(0.5, 1.0) / radius;  // 1/f falloff
      t.waves.push_back({radius * std::cos(angle), radius * std::sin(angle),
                         rng.uniform(0.0, 2.0 * std::numbers::pi), amp});
      power += amp * amp / 2.0;
    }
    for (auto& w : t.waves) w.amplitude /= std::sqrt(power);  // unit variance
    return t;
  }

  void render(double dx, double dy, double gain, double noise_std, Rng& rng,
              std::vector<std::uint8_t>& out) const {
    out.resize(kPatchPixels);
    const double scale = 2.0 * std::numbers::pi / kPatchSide;
    for (std::size_t y = 0; y < kPatchSide; ++y) {
      for (std::size_t x = 0; x < kPatchSide; ++x) {
        double v = 0.0;
        for (const auto& w : waves) {
          v += w.amplitude *
               std::cos(scale * (w.fx * (x + dx) + w.fy * (y + dy)) + w.phase);
        }
        double pixel = 128.0 + 40.0 * gain * v;
        if (noise_std > 0.0) pixel += noise_std * rng.normal();
        out[y * kPatchSide + x] =
            static_cast<std::uint8_t>(std::clamp(std::lround(pixel), 0L, 255L));
      }
    }
  }
};

}  // namespace detail

inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Rng noise(derive_seed(spec.seed, "noise"));
  SyntheticData data;
  data.store.set_name("synthetic-" + std::to_string(spec.seed));

  std::vector<detail::Texture> textures;
  std::vector<std::uint8_t> pixels;
  for (std::size_t b = 0; b < spec.base_patches; ++b) {
    textures.push_back(detail::Texture::random(rng, spec.components, spec.max_frequency));
    textures.back().render(0.0, 0.0, 1.0, 0.0, noise, pixels);
    data.store.add(pixels, b);
  }
  for (std::size_t m = 0; m < spec.matching_pairs; ++m) {
    const std::size_t base = m % spec.base_patches;
    const double dx = rng.uniform(-spec.shift_range, spec.shift_range);
    const double dy = rng.uniform(-spec.shift_range, spec.shift_range);
    const double gain =
        1.0 + rng.uniform(-spec.illumination_jitter, spec.illumination_jitter);
    textures[base].render(dx, dy, gain, spec.noise_std, noise, pixels);
    data.store.add(pixels, base);
    data.pairs.push_back({base, data.store.size() - 1, 1});
  }
  const std::uint64_t available =
      static_cast<std::uint64_t>(spec.base_patches) * (spec.base_patches - 1) / 2;
  if (spec.nonmatching_pairs > available) {
    throw DatasetError("too many non-matching pairs for " +
                       std::to_string(spec.base_patches) + " base patches");
  }
  std::unordered_set<std::uint64_t> seen;
  while (seen.size() < spec.nonmatching_pairs) {
    const std::size_t a = rng.below(spec.base_patches);
    std::size_t b = rng.below(spec.base_patches - 1);
    if (b >= a) ++b;
    if (seen.insert(detail::pair_key(a, b)).second) data.pairs.push_back({a, b, 0});
  }
  return data;
}

// ---------------------------------------------------------------------------
// PFPS store file: "PFPS", count (u64), count * 4096 pixel bytes, count point
// ids (u64). Little-endian.

inline std::vector<std::uint8_t> encode_store(const PatchStore& store) {
  io::ByteWriter w;
  w.magic("PFPS");
  w.u64(store.size());
  w.raw(store.pixels().data(), store.pixels().size());
  for (std::uint64_t id : store.point_ids()) w.u64(id);
  return w.bytes();
}

inline PatchStore decode_store(std::vector<std::uint8_t> bytes, std::string name = {}) {
  io::ByteReader r(std::move(bytes));
  r.expect_magic("PFPS");
  const std::uint64_t count = r.u64("patch count");
  if (count > r.remaining() / kPatchPixels) {
    r.need(count * kPatchPixels, "patch pixels");
  }
  r.need(count * (kPatchPixels + 8), "patch payload");
  std::vector<std::uint8_t> pixels(count * kPatchPixels);
  r.raw(pixels.data(), pixels.size(), "patch pixels");
  PatchStore store(std::move(name));
  for (std::uint64_t i = 0; i < count; ++i) {
    store.add(std::span<const std::uint8_t>(pixels.data() + i * kPatchPixels, kPatchPixels),
              r.u64("point id"));
  }
  r.expect_end();
  return store;
}

inline void save_store(const PatchStore& store, const std::filesystem::path& path) {
  io::write_file(path, encode_store(store));
}

inline PatchStore load_store(const std::filesystem::path& path) {
  return decode_store(io::read_file(path), path.stem().string());
}

// Pair list CSV: header "index_a,index_b,label", one pair per row; the row
// number (from 0) is the pair id.
inline void save_pairs_csv(std::span<const PairSpec> pairs, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "index_a,index_b,label\n";
  for (const auto& p : pairs) out << p.index_a << ',' << p.index_b << ',' << p.label << '\n';
}

inline std::vector<PairSpec> load_pairs_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open pair list " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("index_a,index_b,label", 0) != 0) {
    throw FormatError(path.filename().string() + ": missing header", 0);
  }
  std::vector<PairSpec> pairs;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    long long a, b;
    int label;
    char c1, c2;
    std::istringstream ls(line);
    if (!(ls >> a >> c1 >> b >> c2 >> label) || c1 != ',' || c2 != ',' || a < 0 || b < 0 ||
        (label != 0 && label != 1)) {
      throw FormatError(path.filename().string() + ": bad row " + std::to_string(line_no), 0);
    }
    pairs.push_back({static_cast<std::size_t>(a), static_cast<std::size_t>(b), label});
  }
  return pairs;
}

}  // namespace fusedesc
