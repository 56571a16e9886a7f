#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "chaneq/equalizer.hpp"
#include "chaneq/model_io.hpp"
#include "chaneq/noise.hpp"
#include "chaneq/quant.hpp"
#include "chaneq/serialize.hpp"

namespace chaneq {

/// Invalid configuration; the CLI maps it to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class EqualizationMode { None, OneStep, TwoStep, TwoStepMobileNet };

const char* to_string(EqualizationMode mode);
EqualizationMode equalization_mode_from_string(const std::string& name);

struct PipelineConfig {
  std::string model;        ///< manifest path
  std::string weights;      ///< blob path; derived from the manifest when empty
  std::string calibration;  ///< calibration JSON path
  /// Directory of raw samples: one little-endian f64 (H, W, C) tensor per
  /// file, taken in file name order.
  std::string samples_dir;
  std::optional<FixtureSpec> fixture;  ///< fixture samples (and model for `fixture`/`demo`)
  std::size_t calibration_count = 64;
  bool held_out = false;  ///< analyze on samples disjoint from calibration
  BitWidths bits;
  double s_max = kDefaultMaxScale;
  EqualizationMode mode = EqualizationMode::None;
  double attenuation_floor = kDefaultAttenuationFloor;
  bool bias_correction = false;
  std::size_t bias_correction_count = kDefaultBiasCorrectionSamples;
  std::string out_dir = "out";
  std::size_t threads = 1;
  bool no_fold = false;
  bool timestamp = false;
  RunSort sort = RunSort::ByFirstRun;
  SortKey sort_key = SortKey::Activations;
  /// analyze: "name=manifest[,calibration]" entries; defaults to one run
  /// built from `model` and `calibration`.
  std::vector<std::string> runs;
};

/// Throws ConfigError when a field is out of range.
void validate(const PipelineConfig& config);

/// "<dir>/<name>.json" and "<dir>/<name>.bin".
struct ModelPaths {
  std::string manifest;
  std::string weights;
};
ModelPaths model_paths(const std::string& dir, const std::string& name);
/// Blob path that belongs to a manifest: ".json" replaced by ".bin".
std::string default_weights_path(const std::string& manifest);

/// Loads `count` samples starting at `offset` from the configured source.
std::vector<Tensor> load_samples(const PipelineConfig& config, const InputSpec& input,
                                 std::size_t count, std::size_t offset = 0);

LoadedModel load_configured_model(const PipelineConfig& config);

struct CommandResult {
  std::vector<std::string> artifacts;
  Json summary = Json::object();
  std::vector<std::string> diagnostics;
};

CommandResult cmd_fixture(const PipelineConfig& config);
CommandResult cmd_calibrate(const PipelineConfig& config);
CommandResult cmd_equalize(const PipelineConfig& config);
CommandResult cmd_quantize(const PipelineConfig& config);
CommandResult cmd_analyze(const PipelineConfig& config);
/// Fixture, calibration, every equalization mode and analysis in one go.
CommandResult cmd_demo(const PipelineConfig& config);

/// Equalizes `graph` in the configured mode; None returns all-ones scales.
EqualizationResult equalize(const Graph& graph, const CalibrationRecord& calib,
                            const PipelineConfig& config);

}  // namespace chaneq
