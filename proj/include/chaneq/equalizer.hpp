#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "chaneq/graph.hpp"
#include "chaneq/quant.hpp"

namespace chaneq {

inline constexpr double kDefaultMaxScale = 16.0;
inline constexpr double kDefaultAttenuationFloor = 0.7;
inline constexpr std::size_t kDefaultBiasCorrectionSamples = 1000;
inline constexpr std::size_t kMinBiasCorrectionSamples = 32;

/// Per-output-channel positive factors applied to one layer.
struct ScaleVector {
  std::string layer_id;
  std::vector<double> factors;
  double s_max = kDefaultMaxScale;

  static ScaleVector ones(std::string layer_id, std::size_t channels, double s_max);
  bool all_ones(double tol = 0.0) const;
};

enum class SkipReason { NonHomogeneousActivation, JunctionConsumer, NetworkOutput, NoCalibration };

const char* to_string(SkipReason reason);
SkipReason skip_reason_from_string(const std::string& name);

struct LayerEligibility {
  std::string layer_id;
  std::optional<SkipReason> skipped;  ///< empty when eligible

  bool eligible() const { return !skipped.has_value(); }
};

/// One entry per layer node, in topological order.
struct EligibilityReport {
  std::vector<LayerEligibility> layers;

  const LayerEligibility& at(const std::string& id) const;
};

class EqualizationError : public std::runtime_error {
 public:
  EqualizationError(const std::string& what, std::optional<SkipReason> reason = std::nullopt)
      : std::runtime_error(what), reason_(reason) {}
  std::optional<SkipReason> reason() const { return reason_; }

 private:
  std::optional<SkipReason> reason_;
};

/// Why `layer_id` cannot be factorized, if anything. `calib` may be null
/// when calibration is not needed. ReLU6 layers pass when `relu6_guarded`.
std::optional<SkipReason> check_eligibility(const Graph& graph, const std::string& layer_id,
                                            const CalibrationRecord* calib, bool relu6_guarded);

EligibilityReport assess_eligibility(const Graph& graph, const CalibrationRecord* calib,
                                     bool relu6_guarded);

/// Inversely proportional factorization: output channel i of the layer
/// (kernel slice and bias) is multiplied by c_i and every kernel slice of its
/// consumers that reads channel i is divided by c_i. Throws
/// EqualizationError for ineligible layers or non-positive factors.
/// `relu6_attested` lets the caller vouch that c_i * max_i <= 6 holds.
Graph factorize_pair(const Graph& graph, const ScaleVector& scales, bool relu6_attested = false);

/// max |w| per output channel of a layer kernel.
std::vector<double> kernel_out_channel_max(const Node& layer);
/// max |w| per input channel of a consumer kernel.
std::vector<double> kernel_in_channel_max(const Node& consumer);
/// Element-wise max of kernel_in_channel_max over every consumer of `layer_id`.
std::vector<double> successor_in_channel_max(const Graph& graph, const std::string& layer_id);

/// Largest factor per channel that keeps the tensor's [min, max] range:
/// min over the max-side ratio and the min-side ratio. Channels that never
/// reach a side impose no bound from it (+inf).
std::vector<double> activation_headroom(std::span<const double> ch_min,
                                        std::span<const double> ch_max);
/// max(ker) / ker_i, +inf for all-zero channels.
std::vector<double> kernel_headroom(std::span<const double> ker_ch_max);

/// min(kernel ratio, activation ratio, s_max) per channel. Infinite ratios
/// on both sides clamp to s_max and are reported in `diagnostics`.
std::vector<double> one_step_scales(std::span<const double> ker_ch_max,
                                    std::span<const double> act_ch_min,
                                    std::span<const double> act_ch_max, double s_max,
                                    std::vector<std::string>* diagnostics = nullptr);

/// Both ratios multiplied by sucInChMax / sucInMax, then min with s_max; no
/// normalization.
std::vector<double> two_step_raw_scales(std::span<const double> ker_ch_max,
                                        std::span<const double> act_ch_min,
                                        std::span<const double> act_ch_max,
                                        std::span<const double> suc_in_ch_max, double s_max,
                                        std::vector<std::string>* diagnostics = nullptr);

/// Channels whose calibrated activation max is below 6 may be amplified.
std::vector<bool> relu6_guard(const LayerCalibration& calib);
/// Applies the guard: amplifiable channels are capped at 6 / max_i, others at 1.
void apply_relu6_guard(std::vector<double>& factors, std::span<const double> act_ch_max,
                       const std::vector<bool>& amplifiable);

enum class TwoStepMode { Standard, MobileNet };

struct EqualizationResult {
  Graph graph;
  std::vector<ScaleVector> scales;  ///< one per layer node, all-ones when skipped
  EligibilityReport report;
  CalibrationRecord calibration;    ///< analytically updated statistics
  std::vector<std::string> diagnostics;

  const ScaleVector& scales_for(const std::string& id) const;
};

/// Greedy single pass in topological order using per-channel weight and
/// activation headroom.
EqualizationResult one_step_equalize(const Graph& graph, const CalibrationRecord& calib,
                                     double s_max = kDefaultMaxScale);

/// Attenuates channels the successor already attenuates before equalizing.
/// Standard mode renormalizes so min(scale) == 1; MobileNet mode keeps
/// attenuation but never below `attenuation_floor`.
EqualizationResult two_step_equalize(const Graph& graph, const CalibrationRecord& calib,
                                     double s_max = kDefaultMaxScale,
                                     TwoStepMode mode = TwoStepMode::Standard,
                                     double attenuation_floor = kDefaultAttenuationFloor);

/// Multiplies the stored per-channel statistics of `layer_id` by the factors.
void rescale_calibration(CalibrationRecord& calib, const std::string& layer_id,
                         std::span<const double> factors);

struct BiasCorrectionResult {
  Graph graph;
  /// Bias delta applied per layer (after snapping to the bias grid).
  std::map<std::string, std::vector<double>> corrections;
  std::vector<std::string> diagnostics;
};

/// Matches per-channel post-activation means of the quantized graph to the
/// float graph, one layer at a time in topological order, by shifting biases.
BiasCorrectionResult bias_correct(const Graph& float_graph, const Graph& quant_graph,
                                  std::span<const Tensor> samples,
                                  std::size_t count = kDefaultBiasCorrectionSamples,
                                  std::size_t min_samples = kMinBiasCorrectionSamples);

/// Per-channel mean of every node output over the samples.
std::map<std::string, std::vector<double>> channel_means(const Graph& graph,
                                                         std::span<const Tensor> samples);

}  // namespace chaneq
