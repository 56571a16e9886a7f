#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "chaneq/numeric.hpp"
#include "support.hpp"

namespace chaneq {
namespace {

using test::max_rel_dev;
using test::naive_conv;
using test::random_tensor;

TEST(Conv2d, ScalarMultiplyAdd) {
  const Tensor x({1, 1, 1, 1}, 3.0);
  const Tensor k({1, 1, 1, 1}, 2.0);
  const Tensor y = conv2d(x, k, Tensor::vector({1.0}), {}, Padding::Valid);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 7.0);
}

TEST(Conv2d, IdentityKernelReturnsInput) {
  Rng rng(1);
  const Tensor x = random_tensor({1, 4, 5, 3}, rng);
  Tensor k({1, 1, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) k.at(0, 0, c, c) = 1.0;
  EXPECT_EQ(conv2d(x, k, Tensor({3}), {}, Padding::Same), x);
}

TEST(Conv2d, OnesKernelOnOnesSumsNine) {
  const Tensor y = conv2d(Tensor({1, 3, 3, 1}, 1.0), Tensor({3, 3, 1, 1}, 1.0), Tensor({1}), {},
                          Padding::Valid);
  ASSERT_EQ(y.size(), 1u);
  EXPECT_EQ(y[0], 9.0);
}

TEST(Conv2d, SamePaddingCountsOnlyInBoundsTaps) {
  const Tensor y = conv2d(Tensor({1, 3, 3, 1}, 1.0), Tensor({3, 3, 1, 1}, 1.0), Tensor({1}), {},
                          Padding::Same);
  EXPECT_EQ(y.at(0, 0, 0, 0), 4.0);
  EXPECT_EQ(y.at(0, 0, 1, 0), 6.0);
  EXPECT_EQ(y.at(0, 1, 1, 0), 9.0);
}

TEST(Conv2d, MatchesDirectLoopOracle) {
  Rng rng(7);
  for (std::size_t stride : {1u, 2u}) {
    for (bool same : {false, true}) {
      const Tensor x = random_tensor({1, 7, 6, 3}, rng);
      const Tensor k = random_tensor({3, 3, 3, 4}, rng);
      const Tensor b = random_tensor({4}, rng);
      const Tensor got = conv2d(x, k, b, {stride, stride}, same ? Padding::Same : Padding::Valid);
      const Tensor want = naive_conv(x, k, b, stride, same);
      ASSERT_EQ(got.shape(), want.shape());
      EXPECT_LE(max_rel_dev(want, got), 1e-14);
    }
  }
}

TEST(Conv2d, LinearInKernelAndBias) {
  Rng rng(3);
  const Tensor x = random_tensor({1, 5, 5, 2}, rng);
  const Tensor k = random_tensor({3, 3, 2, 3}, rng);
  const Tensor b = random_tensor({3}, rng);
  const double alpha = 1.7;
  const Tensor lhs = conv2d(x, k.scaled(alpha), b.scaled(alpha), {}, Padding::Same);
  const Tensor rhs = conv2d(x, k, b, {}, Padding::Same).scaled(alpha);
  EXPECT_LE(max_rel_dev(rhs, lhs), 1e-12);
}

TEST(Conv2d, ChannelMismatchNamesDimension) {
  try {
    conv2d(Tensor({1, 3, 3, 2}), Tensor({1, 1, 3, 1}), Tensor({1}), {}, Padding::Valid);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("c_in"), std::string::npos) << e.what();
  }
}

TEST(DepthwiseConv2d, PerChannelScaling) {
  Tensor k({1, 1, 2, 1});
  k[0] = 2.0;
  k[1] = 3.0;
  const Tensor y = depthwise_conv2d(Tensor({1, 1, 1, 2}, 1.0), k, Tensor({2}), {}, Padding::Valid);
  EXPECT_EQ(y.values(), (std::vector<double>{2.0, 3.0}));
}

TEST(DepthwiseConv2d, ZeroKernelBroadcastsBias) {
  const Tensor y = depthwise_conv2d(Tensor({1, 2, 2, 2}, 5.0), Tensor({3, 3, 2, 1}),
                                    Tensor::vector({0.5, -1.5}), {}, Padding::Same);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], i % 2 == 0 ? 0.5 : -1.5);
}

TEST(DepthwiseConv2d, EqualsIndependentSingleChannelConvs) {
  Rng rng(11);
  const Tensor x = random_tensor({1, 4, 4, 3}, rng);
  const Tensor k = random_tensor({3, 3, 3, 1}, rng);
  const Tensor b = random_tensor({3}, rng);
  const Tensor y = depthwise_conv2d(x, k, b, {}, Padding::Same);
  for (std::size_t c = 0; c < 3; ++c) {
    Tensor xc({1, 4, 4, 1}), kc({3, 3, 1, 1});
    for (std::size_t i = 0; i < 16; ++i) xc[i] = x[i * 3 + c];
    for (std::size_t i = 0; i < 9; ++i) kc[i] = k[i * 3 + c];
    const Tensor yc = conv2d(xc, kc, Tensor::vector({b[c]}), {}, Padding::Same);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y[i * 3 + c], yc[i]);
  }
}

TEST(DepthwiseConv2d, PerturbingOneChannelLeavesOthers) {
  Rng rng(12);
  Tensor x = random_tensor({1, 5, 5, 4}, rng);
  const Tensor k = random_tensor({3, 3, 4, 1}, rng);
  const Tensor b = random_tensor({4}, rng);
  const Tensor before = depthwise_conv2d(x, k, b, {}, Padding::Same);
  for (std::size_t i = 0; i < 25; ++i) x[i * 4 + 2] += 0.5;
  const Tensor after = depthwise_conv2d(x, k, b, {}, Padding::Same);
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (i % 4 == 2) continue;
    EXPECT_EQ(before[i], after[i]);
  }
}

TEST(Geometry, OutputExtentAndValidTaps) {
  EXPECT_EQ(conv_output_extent(8, 3, 1, Padding::Same), 8u);
  EXPECT_EQ(conv_output_extent(8, 3, 2, Padding::Same), 4u);
  EXPECT_EQ(conv_output_extent(8, 3, 1, Padding::Valid), 6u);
  EXPECT_EQ(conv_output_extent(8, 3, 2, Padding::Valid), 3u);
  EXPECT_DOUBLE_EQ(mean_valid_taps(8, 3, 1, Padding::Valid), 3.0);
  // Two border positions see two taps each, six interior positions see three.
  EXPECT_DOUBLE_EQ(mean_valid_taps(8, 3, 1, Padding::Same), 22.0 / 8.0);
  EXPECT_DOUBLE_EQ(mean_valid_taps(5, 1, 1, Padding::Same), 1.0);
}

TEST(Activation, Definitions) {
  const Tensor x = Tensor::vector({-1.0, 0.0, 2.0});
  EXPECT_EQ(apply_activation(x, Activation::relu()).values(), (std::vector<double>{0.0, 0.0, 2.0}));
  EXPECT_EQ(activate(7.5, Activation::relu6(), 0), 6.0);
  EXPECT_EQ(activate(-4.0, Activation::prelu({0.25}), 0), -1.0);
  EXPECT_EQ(apply_activation(x, Activation::linear()), x);
}

TEST(Activation, PreluPerChannelSlopes) {
  Tensor x({1, 1, 2, 2}, -2.0);
  const Tensor y = apply_activation(x, Activation::prelu({0.5, 0.25}));
  EXPECT_EQ(y.values(), (std::vector<double>{-1.0, -0.5, -1.0, -0.5}));
}

TEST(Activation, PositiveHomogeneity) {
  Rng rng(5);
  const Tensor x = random_tensor({1, 4, 4, 2}, rng, -5.0, 5.0);
  for (const Activation& act : {Activation::linear(), Activation::relu(), Activation::prelu({0.1, 0.3})}) {
    EXPECT_TRUE(act.positively_homogeneous());
    for (double alpha : {0.25, 2.0, 8.0}) {
      EXPECT_EQ(apply_activation(x.scaled(alpha), act), apply_activation(x, act).scaled(alpha));
    }
    for (double alpha : {0.3, 1.7, 3.9}) {
      EXPECT_LE(max_rel_dev(apply_activation(x, act).scaled(alpha), apply_activation(x.scaled(alpha), act)),
                1e-15);
    }
  }
}

TEST(Activation, Relu6IsNotHomogeneousAboveCeiling) {
  const Activation act = Activation::relu6();
  EXPECT_FALSE(act.positively_homogeneous());
  EXPECT_NE(activate(2.0 * 4.0, act, 0), 2.0 * activate(4.0, act, 0));
  EXPECT_EQ(activate(2.0 * 2.5, act, 0), 2.0 * activate(2.5, act, 0));
}

TEST(Junctions, AddAndConcat) {
  const std::vector<Tensor> parts{Tensor({1, 1, 1, 2}, 1.0), Tensor({1, 1, 1, 2}, 2.0)};
  EXPECT_EQ(add(parts).values(), (std::vector<double>{3.0, 3.0}));
  const std::vector<Tensor> mixed{Tensor({1, 1, 1, 1}, 1.0), Tensor({1, 1, 1, 2}, 2.0)};
  EXPECT_EQ(concat_channels(mixed).values(), (std::vector<double>{1.0, 2.0, 2.0}));
  EXPECT_THROW(add(mixed), ShapeError);
}

TEST(ChannelStats, SmallCases) {
  const auto s = channel_stats(Tensor({1, 1, 2, 1}, std::vector<double>{-1.0, 2.0}));
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].min, -1.0);
  EXPECT_EQ(s[0].max, 2.0);
  EXPECT_EQ(s[0].energy, 5.0);
  const auto z = channel_stats(Tensor({1, 2, 2, 1}));
  EXPECT_EQ(z[0].min, 0.0);
  EXPECT_EQ(z[0].max, 0.0);
  EXPECT_EQ(z[0].energy, 0.0);
  EXPECT_THROW(channel_stats(Tensor{}), ShapeError);
}

TEST(ChannelStats, MatchesElementLoop) {
  Rng rng(9);
  const Tensor x = random_tensor({1, 6, 5, 3}, rng, -3.0, 2.0);
  const auto s = channel_stats(x);
  for (std::size_t c = 0; c < 3; ++c) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, e = 0.0;
    for (std::size_t i = c; i < x.size(); i += 3) {
      lo = std::min(lo, x[i]);
      hi = std::max(hi, x[i]);
      e += x[i] * x[i];
    }
    EXPECT_EQ(s[c].min, lo);
    EXPECT_EQ(s[c].max, hi);
    EXPECT_NEAR(s[c].energy, e, 1e-12 * e);
  }
}

TEST(Tensor, RejectsLengthMismatch) {
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1.0, 2.0, 3.0}), ShapeError);
  EXPECT_THROW(Tensor({4}).reshaped({3}), ShapeError);
}

TEST(CompensatedSum, RecoversCancelledTerms) {
  CompensatedSum s;
  for (double v : {1.0, 1e100, 1.0, -1e100}) s += v;
  EXPECT_EQ(s.value(), 2.0);
}

}  // namespace
}  // namespace chaneq
