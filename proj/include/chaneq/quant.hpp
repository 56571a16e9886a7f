#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "chaneq/tensor.hpp"

namespace chaneq {

class QuantError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-tensor uniform quantizer: scale = (max - min) / 2^bits.
struct QuantSpec {
  double min = 0.0;
  double max = 0.0;
  int bits = 8;
  bool is_signed = false;
  double scale = 1.0;
  std::int64_t zero_point = 0;
  bool degenerate = false;  ///< max == min; scale forced to 1

  /// Symmetric signed spec covering [-max_abs, max_abs], zero point 0.
  static QuantSpec symmetric(double max_abs, int bits);
  /// Affine unsigned spec; the range is widened to include zero.
  static QuantSpec affine(double min, double max, int bits);
  /// Symmetric signed spec with a given step.
  static QuantSpec symmetric_with_scale(double scale, int bits);

  double range() const { return max - min; }
  bool operator==(const QuantSpec&) const = default;
};

/// Clamp to [min, max], round-half-to-even onto the grid, dequantize.
/// Throws QuantError on non-finite values.
double quantize_dequantize(double x, const QuantSpec& spec);
Tensor quantize_dequantize(const Tensor& x, const QuantSpec& spec);

struct BitWidths {
  int weights = 8;
  int activations = 8;
  int bias = 16;
  bool operator==(const BitWidths&) const = default;
};

/// Extrema and energy of one tapped tensor, both per channel and in total.
struct ActivationStats {
  std::vector<double> ch_min;
  std::vector<double> ch_max;
  std::vector<double> ch_sumsq;
  std::uint64_t elements_per_channel = 0;
  /// Per channel fraction of elements that are not exactly zero.
  std::vector<double> ch_nonzero;
  /// Per channel mean squared slope of the activation at the observed
  /// points, inferred from post-activation values (1 for linear, active
  /// fraction for ReLU).
  std::vector<double> ch_gain;

  std::size_t channels() const { return ch_max.size(); }
  double min() const;
  double max() const;
  /// Largest per-channel |extremum|.
  std::vector<double> ch_abs_max() const;
  /// E{y^2} over all elements.
  double mean_square() const;
  /// E{y^2} of one channel.
  double channel_mean_square(std::size_t c) const;
  /// 1 when the statistic was not recorded.
  double nonzero_fraction(std::size_t c) const { return ch_nonzero.empty() ? 1.0 : ch_nonzero[c]; }
  double gain(std::size_t c) const { return ch_gain.empty() ? 1.0 : ch_gain[c]; }
};

struct LayerCalibration {
  ActivationStats activation;
  QuantSpec activation_spec;
  std::optional<QuantSpec> weight_spec;
  std::optional<QuantSpec> bias_spec;
};

/// Calibrated ranges for every node plus the graph input.
struct CalibrationRecord {
  BitWidths bits;
  std::size_t sample_count = 0;
  ActivationStats input;
  QuantSpec input_spec;
  std::map<std::string, LayerCalibration> layers;
  std::vector<std::string> diagnostics;

  const LayerCalibration& at(const std::string& id) const;
};

class Graph;

/// Runs `count` samples through the float graph tapping every node and
/// accumulates running extrema, energies and activation statistics.
/// Samples are processed by `threads` workers and merged in sample order.
CalibrationRecord calibrate(const Graph& graph, std::span<const Tensor> samples,
                            std::size_t count = 64, BitWidths bits = {},
                            std::size_t threads = 1);

/// Recomputes weight and bias specs from the graph's current kernels and
/// activation specs from the stored statistics.
void refresh_specs(CalibrationRecord& record, const Graph& graph);

/// Same statistics, different bit widths.
CalibrationRecord with_bits(const CalibrationRecord& record, const Graph& graph, BitWidths bits);

enum class QuantMode { WeightsOnly, ActivationsOnly, Full };

const char* to_string(QuantMode mode);
QuantMode quant_mode_from_string(const std::string& name);

/// Returns a copy of `graph` whose kernels/biases are fake-quantized
/// (WeightsOnly, Full) and whose node outputs are fake-quantized at run time
/// (ActivationsOnly, Full).
Graph quantize_graph(const Graph& graph, const CalibrationRecord& calib, QuantMode mode);

}  // namespace chaneq
