#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_support.hpp"

using namespace fusedesc;
using fusedesc::testing::gradient_check;
using fusedesc::testing::random_tensor;

namespace {

// Direct nested-loop wide convolution of one [C,H,W] image.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w,
                           const Tensor<double>& b) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), K = w.dim(0), k = w.dim(2);
  const long pad = static_cast<long>(k / 2);
  Tensor<double> out({K, H, W});
  for (std::size_t o = 0; o < K; ++o)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        double s = b[o];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long sy = static_cast<long>(y + ky) - pad;
              const long sx = static_cast<long>(xx + kx) - pad;
              if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W))
                continue;
              s += w[((o * C + c) * k + ky) * k + kx] *
                   x[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)];
            }
        out[(o * H + y) * W + xx] = s;
      }
  return out;
}

Var scalarize(Tape<double>& t, Var v, std::uint64_t seed) {
  Rng rng(seed);
  return dot_constant(t, v, random_tensor(t.value(v).shape(), rng));
}

}  // namespace

TEST(Tensor, ShapeAndDataLengthAgree) {
  Tensor<float> t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_THROW(Tensor<float>({2, 0}), DimensionError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), DimensionError);
  EXPECT_TRUE(Tensor<float>().empty());
}

TEST(Tensor, FiniteCheckDetectsNan) {
  Tensor<double> t({2}, {1.0, std::nan("")});
  EXPECT_FALSE(t.all_finite());
  t[1] = 2.0;
  EXPECT_TRUE(t.all_finite());
}

TEST(Conv2d, DefaultPatchShapeIsPreserved) {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({1, 64, 64}, 0.5f));
  auto w = tape.constant(Tensor<float>({64, 1, 5, 5}, 0.01f));
  auto b = tape.constant(Tensor<float>({64}));
  EXPECT_EQ(tape.value(conv2d(tape, x, w, b)).shape(), (Shape{64, 64, 64}));
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  Rng rng(3);
  const auto x = random_tensor({2, 7, 9}, rng);
  Tensor<double> w({2, 2, 5, 5});
  w[((0 * 2 + 0) * 5 + 2) * 5 + 2] = 1.0;
  w[((1 * 2 + 1) * 5 + 2) * 5 + 2] = 1.0;
  Tape<double> tape;
  const auto y = conv2d(tape, tape.constant(x), tape.constant(w),
                        tape.constant(Tensor<double>({2})));
  EXPECT_EQ(tape.value(y), x);
}

TEST(Conv2d, ConstantInputWithOnesKernel) {
  const double c = 1.5;
  Tape<double> tape;
  const auto y = conv2d(tape, tape.constant(Tensor<double>({1, 8, 8}, c)),
                        tape.constant(Tensor<double>({1, 1, 5, 5}, 1.0)),
                        tape.constant(Tensor<double>({1})));
  const auto& v = tape.value(y);
  EXPECT_DOUBLE_EQ(v[3 * 8 + 3], 25 * c);
  EXPECT_DOUBLE_EQ(v[0], 9 * c);
  EXPECT_DOUBLE_EQ(v[7 * 8 + 7], 9 * c);
  EXPECT_DOUBLE_EQ(v[0 * 8 + 3], 15 * c);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  Rng rng(11);
  for (auto [C, H, W, K] : {std::array<std::size_t, 4>{1, 5, 5, 2}, {3, 6, 4, 4},
                            {2, 1, 1, 3}, {2, 3, 11, 2}}) {
    const auto x = random_tensor({C, H, W}, rng);
    const auto w = random_tensor({K, C, 5, 5}, rng);
    const auto b = random_tensor({K}, rng);
    Tape<double> tape;
    const auto y = conv2d(tape, tape.constant(x), tape.constant(w), tape.constant(b));
    const auto expect = conv_oracle(x, w, b);
    ASSERT_EQ(tape.value(y).shape(), expect.shape());
    for (std::size_t i = 0; i < expect.size(); ++i) {
      EXPECT_NEAR(tape.value(y)[i], expect[i], 1e-12);
    }
  }
}

TEST(Conv2d, ChannelMismatchIsDimensionError) {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({3, 8, 8}));
  auto w = tape.constant(Tensor<float>({4, 2, 5, 5}));
  auto b = tape.constant(Tensor<float>({4}));
  EXPECT_THROW(conv2d(tape, x, w, b), DimensionError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  const double err = gradient_check(
      {random_tensor({2, 2, 6, 6}, rng), random_tensor({3, 2, 5, 5}, rng),
       random_tensor({3}, rng)},
      [](Tape<double>& t, const std::vector<Var>& v) {
        return scalarize(t, conv2d(t, v[0], v[1], v[2]), 1);
      });
  EXPECT_LT(err, 1e-4);
}

TEST(Maxpool, SmallCases) {
  Tape<double> tape;
  auto y = maxpool2x2(tape, tape.constant(Tensor<double>({1, 2, 2}, {1, 2, 3, 4})));
  EXPECT_EQ(tape.value(y), Tensor<double>({1, 1, 1}, {4}));
  auto z = maxpool2x2(tape, tape.constant(Tensor<double>({2, 4, 6}, 2.5)));
  EXPECT_EQ(tape.value(z), Tensor<double>({2, 2, 3}, 2.5));
  auto big = maxpool2x2(tape, tape.constant(Tensor<double>({64, 64, 64})));
  EXPECT_EQ(tape.value(big).shape(), (Shape{64, 32, 32}));
  EXPECT_THROW(maxpool2x2(tape, tape.constant(Tensor<double>({1, 3, 4}))), DimensionError);
}

TEST(Maxpool, GradientGoesToFirstMaximum) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({1, 2, 4}, {5, 5, 1, 2, 5, 0, 3, 3}));
  auto y = maxpool2x2(tape, x);
  tape.backward(dot_constant(tape, y, Tensor<double>({1, 1, 2}, {1.0, 1.0})));
  EXPECT_EQ(tape.grad(x), Tensor<double>({1, 2, 4}, {1, 0, 0, 0, 0, 0, 1, 0}));
}

TEST(Maxpool, ExactlyOneGradientPerWindow) {
  Rng rng(8);
  Tape<double> tape;
  auto x = tape.variable(random_tensor({2, 3, 6, 8}, rng));
  tape.backward(scalarize(tape, maxpool2x2(tape, x), 2));
  const auto& g = tape.grad(x);
  for (std::size_t plane = 0; plane < 6; ++plane)
    for (std::size_t wy = 0; wy < 3; ++wy)
      for (std::size_t wx = 0; wx < 4; ++wx) {
        int nonzero = 0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx)
            nonzero += g[plane * 48 + (2 * wy + dy) * 8 + 2 * wx + dx] != 0.0;
        EXPECT_EQ(nonzero, 1);
      }
}

TEST(Tanh, ValuesAndDerivativeAtZero) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({3}, {0.0, 20.0, -0.3}));
  auto y = tanh_activation(tape, x);
  EXPECT_EQ(tape.value(y)[0], 0.0);
  EXPECT_GT(tape.value(y)[1], 0.0);
  EXPECT_LE(tape.value(y)[1], 1.0);
  tape.backward(dot_constant(tape, y, Tensor<double>({3}, {1, 0, 0})));
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 1.0);
}

TEST(Linear, HandEvaluatedCases) {
  Tape<double> tape;
  auto y = linear(tape, tape.constant(Tensor<double>({2}, {1, 2})),
                  tape.constant(Tensor<double>({1, 2}, {3, 4})),
                  tape.constant(Tensor<double>({1}, {5})));
  EXPECT_EQ(tape.value(y), Tensor<double>({1}, {16}));

  Tensor<double> eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  const Tensor<double> x({3}, {0.5, -2, 7});
  auto z = linear(tape, tape.constant(x), tape.constant(eye), tape.constant(Tensor<double>({3})));
  EXPECT_EQ(tape.value(z), x);

  EXPECT_THROW(linear(tape, tape.constant(x), tape.constant(Tensor<double>({2, 4})),
                      tape.constant(Tensor<double>({2}))),
               DimensionError);
}

TEST(Linear, FusedWidthForDefaultConfig) {
  Tape<float> tape;
  auto y = linear(tape, tape.constant(Tensor<float>({16945}, 0.001f)),
                  tape.constant(Tensor<float>({512, 16945}, 0.001f)),
                  tape.constant(Tensor<float>({512})));
  EXPECT_EQ(tape.value(y).shape(), (Shape{512}));
}

TEST(Linear, QuadraticOutputMatchesHandGradient) {
  // L = |Wx - t|^2  =>  dL/dW = 2 (Wx - t) x^T
  Rng rng(21);
  const auto W = random_tensor({3, 4}, rng);
  const auto x = random_tensor({4}, rng);
  const auto target = random_tensor({3}, rng);
  Tape<double> tape;
  auto w = tape.variable(W);
  Tensor<double> neg_t({3});
  for (std::size_t i = 0; i < 3; ++i) neg_t[i] = -target[i];
  auto r = linear(tape, tape.constant(x), w, tape.constant(neg_t));
  tape.backward(sum_squares(tape, r));
  for (std::size_t i = 0; i < 3; ++i) {
    double wx = 0.0;
    for (std::size_t j = 0; j < 4; ++j) wx += W.at(i, j) * x[j];
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_NEAR(tape.grad(w).at(i, j), 2.0 * (wx - target[i]) * x[j], 1e-12);
    }
  }
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  const double err = gradient_check(
      {random_tensor({3, 5}, rng), random_tensor({4, 5}, rng), random_tensor({4}, rng)},
      [](Tape<double>& t, const std::vector<Var>& v) {
        return scalarize(t, linear(t, v[0], v[1], v[2]), 3);
      });
  EXPECT_LT(err, 1e-4);
}

TEST(BatchNorm, TrainModeOutputIsStandardized) {
  ParameterStore<double> store;
  store.add("bn.running_mean", Tensor<double>({3}), false);
  store.add("bn.running_var", Tensor<double>({3}, 1.0), false);
  store.add("bn.running_steps", Tensor<double>({1}), false);
  Rng rng(4);
  Tape<double> tape;
  auto y = spatial_batchnorm(tape, tape.constant(random_tensor({4, 3, 5, 5}, rng, -3, 7)),
                             tape.constant(Tensor<double>({3}, 1.0)),
                             tape.constant(Tensor<double>({3})),
                             BatchNormState<double>::bind(store, "bn"), Mode::kTrain);
  const auto& v = tape.value(y);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) {
        const double x = v[(n * 3 + c) * 25 + i];
        s += x;
        ss += x * x;
      }
    EXPECT_NEAR(s / 100, 0.0, 1e-12);
    EXPECT_NEAR(ss / 100, 1.0, 1e-3);
  }
  EXPECT_EQ(store.value("bn.running_steps")[0], 1.0);
}

TEST(BatchNorm, ConstantBatchAndZeroGamma) {
  ParameterStore<double> store;
  store.add("bn.running_mean", Tensor<double>({2}), false);
  store.add("bn.running_var", Tensor<double>({2}, 1.0), false);
  store.add("bn.running_steps", Tensor<double>({1}), false);
  const auto state = BatchNormState<double>::bind(store, "bn");
  Tape<double> tape;
  auto c = spatial_batchnorm(tape, tape.constant(Tensor<double>({2, 2, 2, 2}, 3.0)),
                             tape.constant(Tensor<double>({2}, 1.0)),
                             tape.constant(Tensor<double>({2})), state, Mode::kTrain);
  for (double v : tape.value(c).data()) EXPECT_NEAR(v, 0.0, 1e-9);

  Rng rng(1);
  auto z = spatial_batchnorm(tape, tape.constant(random_tensor({2, 2, 2, 2}, rng)),
                             tape.constant(Tensor<double>({2})),
                             tape.constant(Tensor<double>({2}, {0.25, -4.0})), state,
                             Mode::kTrain);
  const auto& zv = tape.value(z);
  for (std::size_t i = 0; i < zv.size(); ++i) {
    EXPECT_EQ(zv[i], (i / 4) % 2 == 0 ? 0.25 : -4.0);
  }
}

TEST(BatchNorm, EvalBeforeTrainIsRejected) {
  ParameterStore<float> store;
  store.add("bn.running_mean", Tensor<float>({1}), false);
  store.add("bn.running_var", Tensor<float>({1}, 1.0f), false);
  store.add("bn.running_steps", Tensor<float>({1}), false);
  Tape<float> tape;
  EXPECT_THROW(spatial_batchnorm(tape, tape.constant(Tensor<float>({2, 1, 2, 2})),
                                 tape.constant(Tensor<float>({1}, 1.0f)),
                                 tape.constant(Tensor<float>({1})),
                                 BatchNormState<float>::bind(store, "bn"), Mode::kEval),
               UninitializedStatsError);
  EXPECT_THROW(spatial_batchnorm(tape, tape.constant(Tensor<float>({1, 1, 2, 2})),
                                 tape.constant(Tensor<float>({1}, 1.0f)),
                                 tape.constant(Tensor<float>({1})),
                                 BatchNormState<float>::bind(store, "bn"), Mode::kTrain),
               DimensionError);
}

TEST(BatchNorm, GradientMatchesFiniteDifferencesInBothModes) {
  for (Mode mode : {Mode::kTrain, Mode::kEval}) {
    ParameterStore<double> store;
    store.add("bn.running_mean", Tensor<double>({2}, {0.3, -0.2}), false);
    store.add("bn.running_var", Tensor<double>({2}, {1.7, 0.6}), false);
    store.add("bn.running_steps", Tensor<double>({1}, 1.0), false);
    Rng rng(9);
    const double err = gradient_check(
        {random_tensor({3, 2, 3, 3}, rng), random_tensor({2}, rng, 0.5, 1.5),
         random_tensor({2}, rng)},
        [&](Tape<double>& t, const std::vector<Var>& v) {
          return scalarize(t,
                           spatial_batchnorm(t, v[0], v[1], v[2],
                                             BatchNormState<double>::bind(store, "bn"), mode),
                           4);
        });
    EXPECT_LT(err, 1e-4) << (mode == Mode::kTrain ? "train" : "eval");
  }
}

TEST(Cosine, ExamplesAndDegenerateInput) {
  Tape<double> tape;
  auto c1 = cosine_distance(tape, tape.constant(Tensor<double>({3}, {1, 2, 3})),
                            tape.constant(Tensor<double>({3}, {1, 2, 3})));
  EXPECT_DOUBLE_EQ(tape.value(c1)[0], 1.0);
  auto c2 = cosine_distance(tape, tape.constant(Tensor<double>({2}, {1, 0})),
                            tape.constant(Tensor<double>({2}, {0, 1})));
  EXPECT_EQ(tape.value(c2)[0], 0.0);
  auto c3 = cosine_distance(tape, tape.constant(Tensor<double>({3}, {1, 2, 3})),
                            tape.constant(Tensor<double>({3}, {4, 5, 6})));
  EXPECT_NEAR(tape.value(c3)[0], 32.0 / (std::sqrt(14.0) * std::sqrt(77.0)), 1e-15);
  EXPECT_THROW(cosine_distance(tape, tape.constant(Tensor<double>({2})),
                               tape.constant(Tensor<double>({2}, {1, 1}))),
               DegenerateInputError);
}

TEST(Cosine, GradientMatchesFiniteDifferences) {
  Rng rng(12);
  const double err = gradient_check(
      {random_tensor({4, 6}, rng), random_tensor({4, 6}, rng)},
      [](Tape<double>& t, const std::vector<Var>& v) {
        return mean_squared_error(t, cosine_distance(t, v[0], v[1]),
                                  std::vector<double>{1, 0, 1, 0});
      });
  EXPECT_LT(err, 1e-4);
}

TEST(Reshaping, FlattenConcatSliceGradients) {
  Rng rng(13);
  const double err = gradient_check(
      {random_tensor({3, 2, 2, 2}, rng), random_tensor({3, 4}, rng)},
      [](Tape<double>& t, const std::vector<Var>& v) {
        auto joined = concat_columns(t, flatten(t, v[0]), v[1]);
        auto top = slice_rows(t, joined, 1, 2);
        return scalarize(t, tanh_activation(t, top), 5);
      });
  EXPECT_LT(err, 1e-4);
}

TEST(Tape, SharedInputAccumulatesBothBranches) {
  // f(x) = <tanh(x), a> + <x, b>  versus the fused expression's derivative.
  Rng rng(14);
  const auto x0 = random_tensor({5}, rng);
  const auto a = random_tensor({5}, rng);
  const auto b = random_tensor({5}, rng);
  Tape<double> tape;
  auto x = tape.variable(x0);
  auto f = add(tape, dot_constant(tape, tanh_activation(tape, x), a), dot_constant(tape, x, b));
  tape.backward(f);
  for (std::size_t i = 0; i < 5; ++i) {
    const double th = std::tanh(x0[i]);
    EXPECT_NEAR(tape.grad(x)[i], a[i] * (1 - th * th) + b[i], 1e-14);
  }
}

TEST(Tape, BackwardVisitsInReverseOrder) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({2}, {0.1, 0.2}));
  auto y = tanh_activation(tape, x);
  auto z = tanh_activation(tape, y);
  auto s = sum_squares(tape, z);
  tape.backward(s);
  const auto& trace = tape.backward_trace();
  ASSERT_EQ(trace.size(), 3u);
  EXPECT_TRUE(std::is_sorted(trace.rbegin(), trace.rend()));
  EXPECT_EQ(trace.front(), s.index);
  EXPECT_EQ(trace.back(), y.index);
}

TEST(Tape, EmptyTapeAndUnusedParameter) {
  Tape<double> empty;
  EXPECT_THROW(empty.backward(Var{0}), EmptyTapeError);

  ParameterStore<double> store;
  store.add("used", Tensor<double>({2}, {1, 2}));
  store.add("unused", Tensor<double>({2}, {3, 4}));
  Tape<double> tape;
  tape.backward(sum_squares(tape, tape.parameter(store, "used")));
  EXPECT_EQ(store.gradient("unused"), Tensor<double>({2}));
  EXPECT_EQ(store.gradient("used"), Tensor<double>({2}, {2, 4}));
}

TEST(Adagrad, StepRules) {
  ParameterStore<double> store;
  store.add("w", Tensor<double>({3}, {1.0, -2.0, 0.5}));
  const double lr = 0.1;

  adagrad_step(store, lr);
  EXPECT_EQ(store.value("w"), Tensor<double>({3}, {1.0, -2.0, 0.5}));
  EXPECT_EQ(store.at("w").accumulator, Tensor<double>({3}));

  store.gradient("w") = Tensor<double>({3}, {0.3, -4.0, 1e-3});
  adagrad_step(store, lr);
  const auto after1 = store.value("w");
  EXPECT_NEAR(after1[0] - 1.0, -lr, 1e-9);
  EXPECT_NEAR(after1[1] + 2.0, lr, 1e-9);
  EXPECT_NEAR(after1[2] - 0.5, -lr, 1e-6);

  adagrad_step(store, lr);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_LT(std::abs(store.value("w")[i] - after1[i]), std::abs(after1[i] - (i == 0 ? 1.0 : i == 1 ? -2.0 : 0.5)));
  }
}

TEST(Adagrad, AccumulatorNeverDecreasesAndBuffersAreSkipped) {
  ParameterStore<double> store;
  store.add("w", Tensor<double>({4}));
  store.add("bn.running_mean", Tensor<double>({4}, 7.0), false);
  Rng rng(2);
  std::vector<double> prev(4, 0.0);
  for (int step = 0; step < 20; ++step) {
    store.gradient("w") = random_tensor({4}, rng, -3, 3);
    store.gradient("bn.running_mean") = random_tensor({4}, rng);
    adagrad_step(store, 0.01);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_GE(store.at("w").accumulator[i], prev[i]);
      prev[i] = store.at("w").accumulator[i];
    }
  }
  EXPECT_EQ(store.value("bn.running_mean"), Tensor<double>({4}, 7.0));
}

TEST(Checkpoint, RoundTripIsBitExactAndTruncationIsPositioned) {
  ParameterStore<float> store;
  Rng rng(77);
  Tensor<float> w({3, 2, 5, 5});
  for (auto& v : w.data()) v = static_cast<float>(rng.normal());
  store.add("conv1.weight", w);
  store.add("conv1.bn.running_var", Tensor<float>({3}, 0.25f), false);
  const auto bytes = encode_checkpoint(store);
  const auto back = decode_checkpoint<float>(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_FALSE(back.at("conv1.bn.running_var").trainable);
  EXPECT_TRUE(back.at("conv1.weight").trainable);

  for (std::size_t cut : {std::size_t{2}, std::size_t{5}, std::size_t{12}, bytes.size() - 1}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    try {
      decode_checkpoint<float>(part);
      FAIL() << "truncation at " << cut << " accepted";
    } catch (const FormatError& e) {
      EXPECT_LE(e.offset(), cut);
    }
  }
  // A cut on a record boundary still parses; the missing entry is caught when
  // the store is checked against its network configuration.
  ParameterStore<float> one;
  one.add("a", Tensor<float>({2}, 1.0f));
  one.add("b", Tensor<float>({2}, 2.0f));
  const auto two = encode_checkpoint(one);
  const auto first = decode_checkpoint<float>(
      std::vector<std::uint8_t>(two.begin(), two.begin() + 5 + 4 + 1 + 4 + 4 + 8));
  EXPECT_EQ(first.size(), 1u);

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint<float>(bad), FormatError);
}
