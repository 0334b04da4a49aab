#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "test_support.hpp"

using namespace fusedesc;
using fusedesc::testing::TempDir;

namespace {

// Patch i is filled with a value derived from i so cells are easy to tell apart.
PatchStore numbered_store(std::size_t n, std::size_t points) {
  PatchStore s("numbered");
  std::vector<std::uint8_t> px(kPatchPixels);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < kPatchPixels; ++k) {
      px[k] = static_cast<std::uint8_t>((i * 37 + k / kPatchSide) % 251);
    }
    s.add(px, i % points);
  }
  return s;
}

double pixel_l2(const PatchStore& s, std::size_t a, std::size_t b) {
  double d = 0;
  const auto x = s.bytes(a), y = s.bytes(b);
  for (std::size_t k = 0; k < kPatchPixels; ++k) {
    const double e = static_cast<double>(x[k]) - y[k];
    d += e * e;
  }
  return std::sqrt(d);
}

}  // namespace

TEST(Brown, IngestRoundTripAndCellAddressing) {
  TempDir dir("brown");
  const auto store = numbered_store(300, 40);
  write_brown(store, dir.path());
  EXPECT_TRUE(std::filesystem::exists(dir / "patches0000.bmp"));
  EXPECT_TRUE(std::filesystem::exists(dir / "patches0001.bmp"));
  const auto back = ingest_brown(dir.path());
  EXPECT_EQ(back, store);
  EXPECT_EQ(back.size(), 300u);

  // Index 257 is mosaic 1, cell 1: rows 0..63, columns 64..127.
  const GrayImage m1 = load_gray_image(dir / "patches0001.bmp");
  const auto p = back.bytes(257);
  for (std::size_t y = 0; y < kPatchSide; ++y) {
    for (std::size_t x = 0; x < kPatchSide; ++x) {
      ASSERT_EQ(p[y * kPatchSide + x], m1.pixels[y * kMosaicSide + 64 + x]);
    }
  }
  EXPECT_EQ(back.point_id(257), 257u % 40);
}

TEST(Brown, IngestIsDeterministic) {
  TempDir dir("brown-det");
  write_brown(numbered_store(20, 5), dir.path());
  EXPECT_EQ(encode_store(ingest_brown(dir.path())), encode_store(ingest_brown(dir.path())));
}

TEST(Brown, InfoFileConsistency) {
  TempDir dir("brown-info");
  write_brown(numbered_store(20, 5), dir.path());
  {
    std::ofstream info(dir / "info.txt", std::ios::app);
    for (int i = 0; i < 300; ++i) info << "1 0\n";
  }
  EXPECT_THROW(ingest_brown(dir.path()), ConsistencyError);
  std::filesystem::remove(dir / "info.txt");
  EXPECT_THROW(ingest_brown(dir.path()), ConsistencyError);
  {
    std::ofstream info(dir / "info.txt");
    info << "3 0\nnot-a-number 0\n";
  }
  EXPECT_THROW(ingest_brown(dir.path()), FormatError);
  TempDir empty("brown-empty");
  EXPECT_THROW(ingest_brown(empty.path()), DatasetError);
}

TEST(Brown, PairListingAgainstStore) {
  TempDir dir("brown-pairs");
  const auto store = numbered_store(10, 3);
  {
    std::ofstream f(dir / "m50.txt");
    f << "0 0 0 3 0 0 0\n1 1 0 2 2 0 0\n";
  }
  const auto pairs = load_brown_pairs(dir / "m50.txt", store);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0], (PairSpec{0, 3, 1}));
  EXPECT_EQ(pairs[1], (PairSpec{1, 2, 0}));
  {
    std::ofstream f(dir / "bad.txt");
    f << "0 1 0 3 0 0 0\n";
  }
  EXPECT_THROW(load_brown_pairs(dir / "bad.txt", store), ConsistencyError);
}

TEST(SamplePairs, CountsLabelsAndUniqueness) {
  const auto store = numbered_store(200, 50);
  for (auto [m, n] : {std::pair<std::size_t, std::size_t>{100, 150}, {250, 10}, {300, 0}}) {
    const auto pairs = sample_pairs(store, m, n, 17);
    ASSERT_EQ(pairs.size(), m + n);
    std::size_t pos = 0;
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& p : pairs) {
      EXPECT_EQ(p.label, pair_label(store, p.index_a, p.index_b));
      EXPECT_NE(p.index_a, p.index_b);
      EXPECT_TRUE(seen.emplace(std::min(p.index_a, p.index_b), std::max(p.index_a, p.index_b))
                      .second);
      pos += p.label;
    }
    EXPECT_EQ(pos, m);
    EXPECT_NO_THROW(validate_pairs(store, pairs));
  }
}

TEST(SamplePairs, DeterministicUnderSeed) {
  const auto store = numbered_store(100, 20);
  EXPECT_EQ(sample_pairs(store, 40, 40, 5), sample_pairs(store, 40, 40, 5));
  EXPECT_NE(sample_pairs(store, 40, 40, 5), sample_pairs(store, 40, 40, 6));
}

TEST(SamplePairs, RequestsBeyondAvailabilityThrow) {
  const auto store = numbered_store(6, 3);  // three points with two views each
  EXPECT_EQ(sample_pairs(store, 3, 12, 1).size(), 15u);
  EXPECT_THROW(sample_pairs(store, 4, 0, 1), DatasetError);
  EXPECT_THROW(sample_pairs(store, 0, 13, 1), DatasetError);
}

TEST(ValidatePairs, RejectsBadIndicesAndLabels) {
  const auto store = numbered_store(6, 3);
  const std::vector<PairSpec> out_of_range = {{0, 6, 0}};
  EXPECT_THROW(validate_pairs(store, out_of_range), BoundsError);
  const std::vector<PairSpec> mislabelled = {{0, 3, 0}};
  EXPECT_THROW(validate_pairs(store, mislabelled), ConsistencyError);
  const std::vector<PairSpec> self = {{2, 2, 1}};
  EXPECT_THROW(validate_pairs(store, self), ConsistencyError);
}

TEST(Synthetic, ShapeLabelsAndDeterminism) {
  SyntheticSpec spec;
  spec.base_patches = 30;
  spec.matching_pairs = 20;
  spec.nonmatching_pairs = 25;
  spec.seed = 4;
  const auto a = generate_synthetic(spec);
  EXPECT_EQ(a.store.size(), 50u);
  EXPECT_EQ(a.pairs.size(), 45u);
  EXPECT_NO_THROW(validate_pairs(a.store, a.pairs));
  const auto b = generate_synthetic(spec);
  EXPECT_EQ(a.store, b.store);
  EXPECT_EQ(a.pairs, b.pairs);
  spec.seed = 5;
  EXPECT_FALSE(generate_synthetic(spec).store == a.store);
}

TEST(Synthetic, ZeroJitterPartnersAreIdentical) {
  SyntheticSpec spec;
  spec.base_patches = 10;
  spec.matching_pairs = 10;
  spec.nonmatching_pairs = 5;
  spec.illumination_jitter = 0;
  spec.shift_range = 0;
  spec.noise_std = 0;
  const auto d = generate_synthetic(spec);
  for (const auto& p : d.pairs) {
    if (p.label == 1) {
      EXPECT_EQ(pixel_l2(d.store, p.index_a, p.index_b), 0.0);
    }
  }
}

TEST(Synthetic, MatchingPartnersAreCloserInPixelSpace) {
  SyntheticSpec spec;
  spec.base_patches = 60;
  spec.matching_pairs = 60;
  spec.nonmatching_pairs = 60;
  const auto d = generate_synthetic(spec);
  double match = 0, non = 0;
  for (const auto& p : d.pairs) {
    (p.label ? match : non) += pixel_l2(d.store, p.index_a, p.index_b) / 60.0;
  }
  EXPECT_LT(match, non);
}

TEST(Synthetic, SpecJsonRejectsUnknownKeys) {
  SyntheticSpec s;
  s.noise_std = 2.5;
  const auto back = synthetic_spec_from_json(to_json(s));
  EXPECT_EQ(back.noise_std, 2.5);
  EXPECT_THROW(synthetic_spec_from_json(Json{{"noise", 1.0}}), ConfigError);
  EXPECT_THROW(synthetic_spec_from_json(Json{{"illumination_jitter", 1.5}}), ConfigError);
}

TEST(Pfps, RoundTripAndTruncation) {
  const auto store = numbered_store(3, 2);
  const auto bytes = encode_store(store);
  EXPECT_EQ(bytes.size(), 4u + 8 + 3 * (kPatchPixels + 8));
  EXPECT_EQ(decode_store(bytes), store);
  for (std::size_t cut : {0ul, 3ul, 11ul, 12ul, 4000ul, bytes.size() - 8, bytes.size() - 1}) {
    try {
      decode_store(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + static_cast<long>(cut)));
      FAIL() << "accepted truncation at " << cut;
    } catch (const FormatError& e) {
      EXPECT_LE(e.offset(), cut);
    }
  }
  auto extra = bytes;
  extra.push_back(1);
  EXPECT_THROW(decode_store(extra), FormatError);
  EXPECT_EQ(decode_store(encode_store(PatchStore{})).size(), 0u);
}

TEST(PairsCsv, RoundTripAndMalformedRows) {
  TempDir dir("pairs");
  const std::vector<PairSpec> pairs = {{0, 1, 1}, {4, 2, 0}};
  save_pairs_csv(pairs, dir / "p.csv");
  EXPECT_EQ(load_pairs_csv(dir / "p.csv"), pairs);
  {
    std::ofstream f(dir / "bad.csv");
    f << "index_a,index_b,label\n1,2,3\n";
  }
  EXPECT_THROW(load_pairs_csv(dir / "bad.csv"), FormatError);
}
