#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "chaneq/graph.hpp"
#include "chaneq/quant.hpp"

namespace chaneq {

class NoiseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// signal / noise; +inf when the noise vanishes, NaN when the signal does.
double sqnr_linear(double signal, double noise);
double to_db(double linear);
/// dB value for CSV output: "inf" for +inf, "undef" for NaN.
std::string format_db(double db);

/// Noise energies predicted from calibration statistics alone.
struct NoisePrediction {
  std::string layer_id;
  std::size_t topo_index = 0;
  double signal = 0.0;   ///< E{Y^2}
  double noise_w = 0.0;  ///< weights-only noise energy at this node
  double noise_a = 0.0;  ///< activations-only noise energy at this node
};

/// Propagates weight and activation quantization noise through the graph
/// channel by channel. A layer adds K^2 * sum_i E{X_i^2} * E{dW^2} of weight
/// noise to every output channel, and noise on input channel i reaches
/// output channel o amplified by the squared weights of the kernel slice
/// linking them. Pre-activation noise is attenuated by the channel's
/// observed mean squared activation slope, and the output quantizer adds
/// E{dY^2} on the nonzero elements. The cross term between weight noise and
/// propagated noise is ignored.
std::vector<NoisePrediction> predict_noise(const Graph& graph, const CalibrationRecord& calib);

struct LayerSqnr {
  std::string layer_id;
  std::size_t topo_index = 0;
  double signal = 0.0;
  double noise_w = 0.0;
  double noise_a = 0.0;
  double noise_full = 0.0;
  double pred_signal = 0.0;
  double pred_noise_w = 0.0;
  double pred_noise_a = 0.0;

  double sqnr_w_db() const { return to_db(sqnr_linear(signal, noise_w)); }
  double sqnr_a_db() const { return to_db(sqnr_linear(signal, noise_a)); }
  double sqnr_full_db() const { return to_db(sqnr_linear(signal, noise_full)); }
  double pred_sqnr_w_db() const { return to_db(sqnr_linear(pred_signal, pred_noise_w)); }
  double pred_sqnr_a_db() const { return to_db(sqnr_linear(pred_signal, pred_noise_a)); }
};

struct SqnrReport {
  std::vector<LayerSqnr> layers;  ///< topological order
  std::size_t sample_count = 0;
  /// End-to-end mean squared error of the graph outputs against float.
  double output_signal = 0.0;
  double output_mse_w = 0.0;
  double output_mse_a = 0.0;
  double output_mse_full = 0.0;

  const LayerSqnr& at(const std::string& id) const;
};

inline constexpr const char* kSqnrEstimator =
    "measured energies are sample means over all elements of each node output; "
    "predicted energies use calibration statistics and uniform quantization noise";

/// Runs the float graph and its weights-only, activations-only and full
/// fake-quantized variants on the same samples with every node tapped.
/// `full_override` replaces the full-mode graph, e.g. after bias correction.
SqnrReport measure_sqnr(const Graph& float_graph, const CalibrationRecord& calib,
                        std::span<const Tensor> samples, std::size_t threads = 1,
                        const Graph* full_override = nullptr);

/// CSV with columns layer_id, topo_index, signal_energy, noise_w, noise_a,
/// noise_full, sqnr_w_db, sqnr_a_db, sqnr_full_db, pred_sqnr_w_db,
/// pred_sqnr_a_db. A '#' line documenting the estimator precedes the header;
/// `timestamp` is appended to it when given.
std::string sqnr_csv(const SqnrReport& report, const std::optional<std::string>& timestamp = {});

enum class OeTarget { Weights, Activations };

struct OeLayer {
  std::string layer_id;
  std::size_t topo_index = 0;
  double current_db = 0.0;  ///< sum(T^2) / sum(dT^2) with uniform noise
  double optimal_db = 0.0;  ///< same with every channel scaled to the tensor extremum
};

/// Optimal-equalization bound per layer: the SQNR reached if every
/// channel's extremum matched the tensor extremum while the quantization
/// step stays fixed. Junctions appear only for the activation target.
std::vector<OeLayer> optimal_equalization_bound(const Graph& graph, const CalibrationRecord& calib,
                                                OeTarget target);

std::string oe_csv(std::span<const OeLayer> weights, std::span<const OeLayer> activations);

enum class RunSort { ByFirstRun, PerRun };
enum class SortKey { Weights, Activations, Full };

RunSort run_sort_from_string(const std::string& name);
SortKey sort_key_from_string(const std::string& name);

/// Side-by-side CSV of several reports. ByFirstRun orders every run by the
/// first run's `key` SQNR; PerRun sorts each run independently. Rows are in
/// descending SQNR order. Throws NoiseError when layer sets differ.
std::string compare_runs(std::span<const SqnrReport> reports, std::span<const std::string> names,
                         RunSort sort, SortKey key = SortKey::Activations);

/// Mean of a per-layer dB column, skipping undefined layers and treating
/// +inf as absent.
double mean_finite_db(const SqnrReport& report, SortKey key);

}  // namespace chaneq
