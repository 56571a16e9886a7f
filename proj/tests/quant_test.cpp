#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "chaneq/numeric.hpp"
#include "chaneq/quant.hpp"
#include "support.hpp"

namespace chaneq {
namespace {

using test::conv;
using test::point_input;
using test::random_tensor;

TEST(QuantSpec, ScaleIsRangeOverTwoToTheBits) {
  const QuantSpec a = QuantSpec::affine(0.0, 256.0, 8);
  EXPECT_EQ(a.scale, 1.0);
  EXPECT_EQ(a.zero_point, 0);
  const QuantSpec s = QuantSpec::symmetric(-3.0, 4);
  EXPECT_EQ(s.min, -3.0);
  EXPECT_EQ(s.max, 3.0);
  EXPECT_EQ(s.scale, 6.0 / 16.0);
  EXPECT_TRUE(s.is_signed);
  EXPECT_EQ(s.zero_point, 0);
}

TEST(QuantSpec, AffineRangeAlwaysContainsZero) {
  const QuantSpec a = QuantSpec::affine(2.0, 10.0, 8);
  EXPECT_EQ(a.min, 0.0);
  EXPECT_EQ(quantize_dequantize(0.0, a), 0.0);
  const QuantSpec b = QuantSpec::affine(-1.0, 3.0, 8);
  EXPECT_EQ(quantize_dequantize(0.0, b), 0.0);
  EXPECT_EQ(static_cast<double>(b.zero_point), 64.0);
}

TEST(QuantSpec, DegenerateRangeForcesUnitScale) {
  const QuantSpec d = QuantSpec::affine(0.0, 0.0, 8);
  EXPECT_TRUE(d.degenerate);
  EXPECT_EQ(d.scale, 1.0);
  EXPECT_TRUE(QuantSpec::symmetric(0.0, 8).degenerate);
  EXPECT_THROW(QuantSpec::symmetric_with_scale(0.0, 16), QuantError);
}

TEST(QuantizeDequantize, WorkedExample) {
  EXPECT_EQ(quantize_dequantize(3.4, QuantSpec::affine(0.0, 256.0, 8)), 3.0);
}

TEST(QuantizeDequantize, RoundsHalfToEven) {
  const QuantSpec s = QuantSpec::affine(0.0, 256.0, 8);
  EXPECT_EQ(quantize_dequantize(2.5, s), 2.0);
  EXPECT_EQ(quantize_dequantize(3.5, s), 4.0);
  EXPECT_EQ(quantize_dequantize(-0.5, QuantSpec::symmetric(128.0, 8)), -0.0);
}

TEST(QuantizeDequantize, ClampsAndKeepsGridPoints) {
  const QuantSpec s = QuantSpec::affine(-2.0, 6.0, 4);
  EXPECT_EQ(quantize_dequantize(100.0, s), 6.0);
  EXPECT_EQ(quantize_dequantize(-100.0, s), -2.0);
  for (int k = -4; k <= 12; ++k) EXPECT_EQ(quantize_dequantize(k * s.scale, s), k * s.scale);
  EXPECT_THROW(quantize_dequantize(std::numeric_limits<double>::quiet_NaN(), s), QuantError);
  EXPECT_THROW(quantize_dequantize(std::numeric_limits<double>::infinity(), s), QuantError);
}

TEST(QuantizeDequantize, ErrorBoundedByHalfStepAndIdempotent) {
  Rng rng(17);
  const QuantSpec s = QuantSpec::affine(-1.3, 4.1, 8);
  double worst = 0.0;
  for (int i = 0; i < 1'000'000; ++i) {
    const double x = rng.uniform(-2.0, 5.0);
    const double q = quantize_dequantize(x, s);
    worst = std::max(worst, std::abs(q - std::clamp(x, s.min, s.max)));
    if (i % 1000 == 0) {
      ASSERT_EQ(quantize_dequantize(q, s), q);
    }
  }
  EXPECT_LE(worst, s.scale / 2.0 * (1.0 + 1e-12));
}

TEST(QuantizeDequantize, UniformInputGivesUniformNoise) {
  Rng rng(23);
  const QuantSpec s = QuantSpec::affine(0.0, 3.0, 8);
  CompensatedSum sq;
  const int n = 1'000'000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform(s.min, s.max);
    const double e = quantize_dequantize(x, s) - x;
    sq += e * e;
  }
  const double ratio = sq.value() / n / (s.scale * s.scale / 12.0);
  EXPECT_GE(ratio, 0.9);
  EXPECT_LE(ratio, 1.1);
}

double tensor_sqnr_db(const Tensor& x, int bits) {
  double lo = 0.0, hi = 0.0;
  for (double v : x.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const Tensor q = quantize_dequantize(x, QuantSpec::affine(lo, hi, bits));
  double s = 0.0, e = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += x[i] * x[i];
    e += (q[i] - x[i]) * (q[i] - x[i]);
  }
  return 10.0 * std::log10(s / e);
}

TEST(QuantizeDequantize, OneMoreBitAddsSixDecibels) {
  Rng rng(29);
  const Tensor x = random_tensor({1, 100, 100, 10}, rng, 0.0, 1.0);
  EXPECT_NEAR(tensor_sqnr_db(x, 9) - tensor_sqnr_db(x, 8), 6.02, 0.3);
}

Graph two_layer_net(Rng& rng) {
  return Graph(InputSpec{"input", 4, 4, 2},
               {conv("a", {"input"}, random_tensor({3, 3, 2, 3}, rng), random_tensor({3}, rng, 0.0, 0.2),
                     Activation::relu()),
                conv("b", {"a"}, random_tensor({1, 1, 3, 2}, rng), random_tensor({2}, rng))},
               {"b"});
}

TEST(Calibrate, OneSampleIdentityNet) {
  const Graph g(point_input(1), {conv("id", {"input"}, Tensor({1, 1, 1, 1}, 1.0), Tensor({1}))}, {"id"});
  const auto samples = test::constant_samples(g.input(), {5.0});
  const CalibrationRecord r = calibrate(g, samples, 1);
  EXPECT_EQ(r.at("id").activation.max(), 5.0);
  EXPECT_EQ(r.sample_count, 1u);
  EXPECT_THROW(r.at("nope"), QuantError);
}

TEST(Calibrate, ZeroInputThroughReluIsDegenerate) {
  const Graph g(point_input(1),
                {conv("a", {"input"}, Tensor({1, 1, 1, 1}, 1.0), Tensor({1}), Activation::relu())}, {"a"});
  const CalibrationRecord r = calibrate(g, test::constant_samples(g.input(), {0.0, 0.0}), 2);
  EXPECT_EQ(r.at("a").activation.max(), 0.0);
  EXPECT_TRUE(r.at("a").activation_spec.degenerate);
  EXPECT_FALSE(r.diagnostics.empty());
}

TEST(Calibrate, MatchesStoreAllOracle) {
  Rng rng(31);
  const Graph g = two_layer_net(rng);
  std::vector<Tensor> samples;
  for (int i = 0; i < 64; ++i) samples.push_back(random_tensor({1, 4, 4, 2}, rng, 0.0, 1.0));
  const CalibrationRecord r = calibrate(g, samples, 64);
  std::map<std::string, std::vector<double>> lo, hi, e;
  for (const auto& x : samples) {
    const ExecResult res = execute(g, x, TapRequest::all());
    for (const auto& [id, t] : res.taps) {
      const std::size_t c = t.channels();
      lo[id].resize(c, std::numeric_limits<double>::infinity());
      hi[id].resize(c, -std::numeric_limits<double>::infinity());
      e[id].resize(c, 0.0);
      for (std::size_t i = 0; i < t.size(); ++i) {
        lo[id][i % c] = std::min(lo[id][i % c], t[i]);
        hi[id][i % c] = std::max(hi[id][i % c], t[i]);
        e[id][i % c] += t[i] * t[i];
      }
    }
  }
  for (const auto& id : {"a", "b"}) {
    const ActivationStats& s = r.at(id).activation;
    EXPECT_EQ(s.ch_min, lo[id]);
    EXPECT_EQ(s.ch_max, hi[id]);
    for (std::size_t c = 0; c < s.channels(); ++c) EXPECT_NEAR(s.ch_sumsq[c], e[id][c], 1e-12 * e[id][c]);
    EXPECT_EQ(s.elements_per_channel, 64u * 16u);
  }
}

TEST(Calibrate, ThreadCountDoesNotChangeResult) {
  Rng rng(37);
  const Graph g = two_layer_net(rng);
  std::vector<Tensor> samples;
  for (int i = 0; i < 20; ++i) samples.push_back(random_tensor({1, 4, 4, 2}, rng, 0.0, 1.0));
  const CalibrationRecord one = calibrate(g, samples, 20, {}, 1);
  const CalibrationRecord four = calibrate(g, samples, 20, {}, 4);
  for (const auto& [id, lc] : one.layers) {
    EXPECT_EQ(lc.activation.ch_sumsq, four.at(id).activation.ch_sumsq);
    EXPECT_EQ(lc.activation_spec, four.at(id).activation_spec);
  }
}

TEST(Calibrate, EmptyStreamAndShortStream) {
  Rng rng(41);
  const Graph g = two_layer_net(rng);
  EXPECT_THROW(calibrate(g, std::vector<Tensor>{}, 4), QuantError);
  const std::vector<Tensor> two{random_tensor({1, 4, 4, 2}, rng), random_tensor({1, 4, 4, 2}, rng)};
  const CalibrationRecord r = calibrate(g, two, 64);
  EXPECT_EQ(r.sample_count, 2u);
  EXPECT_FALSE(r.diagnostics.empty());
}

TEST(Calibrate, BiasScaleIsInputTimesWeightScale) {
  Rng rng(43);
  const Graph g = two_layer_net(rng);
  std::vector<Tensor> samples{random_tensor({1, 4, 4, 2}, rng, 0.0, 1.0)};
  const CalibrationRecord r = calibrate(g, samples, 1);
  const auto& b = r.at("b");
  EXPECT_DOUBLE_EQ(b.bias_spec->scale, r.at("a").activation_spec.scale * b.weight_spec->scale);
  EXPECT_EQ(b.bias_spec->bits, 16);
  EXPECT_TRUE(b.weight_spec->is_signed);
  EXPECT_FALSE(b.activation_spec.is_signed);
}

TEST(QuantizeGraph, OnGridWeightsAreExact) {
  // Max |w| = 2 at 8 bits puts the grid at multiples of 1/64.
  Tensor k({1, 1, 2, 2}, std::vector<double>{2.0, -1.0, 0.5, 0.25});
  const Graph g(InputSpec{"input", 3, 3, 2}, {conv("a", {"input"}, k, Tensor({2}))}, {"a"});
  Rng rng(47);
  std::vector<Tensor> samples{random_tensor({1, 3, 3, 2}, rng)};
  const CalibrationRecord r = calibrate(g, samples, 1);
  const Graph q = quantize_graph(g, r, QuantMode::WeightsOnly);
  EXPECT_EQ(execute(q, samples[0]).output(), execute(g, samples[0]).output());
}

TEST(QuantizeGraph, MissingCalibrationNamesLayer) {
  Rng rng(53);
  const Graph g = two_layer_net(rng);
  std::vector<Tensor> samples{random_tensor({1, 4, 4, 2}, rng)};
  CalibrationRecord r = calibrate(g, samples, 1);
  r.layers.erase("b");
  try {
    quantize_graph(g, r, QuantMode::Full);
    FAIL() << "expected QuantError";
  } catch (const QuantError& e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
  }
}

TEST(QuantizeGraph, MoreBitsNeverIncreaseOutputError) {
  Rng rng(59);
  for (int trial = 0; trial < 5; ++trial) {
    const Graph g = two_layer_net(rng);
    std::vector<Tensor> samples;
    for (int i = 0; i < 8; ++i) samples.push_back(random_tensor({1, 4, 4, 2}, rng, 0.0, 1.0));
    const CalibrationRecord base = calibrate(g, samples, 8);
    double previous = std::numeric_limits<double>::infinity();
    for (int bits : {4, 8, 12, 16, 24}) {
      const Graph q = quantize_graph(g, with_bits(base, g, {bits, bits, 32}), QuantMode::Full);
      double mse = 0.0;
      for (const auto& x : samples) {
        const Tensor a = execute(g, x).output(), b = execute(q, x).output();
        for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
      }
      EXPECT_LE(mse, previous) << "bits " << bits;
      previous = mse;
    }
    EXPECT_LT(previous, 1e-9);
  }
}

TEST(QuantMode, Names) {
  for (QuantMode m : {QuantMode::WeightsOnly, QuantMode::ActivationsOnly, QuantMode::Full})
    EXPECT_EQ(quant_mode_from_string(to_string(m)), m);
  EXPECT_THROW(quant_mode_from_string("half"), QuantError);
}

}  // namespace
}  // namespace chaneq
