#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "chaneq/graph.hpp"
#include "chaneq/serialize.hpp"

namespace chaneq {

inline constexpr const char* kManifestFormat = "chaneq-model";
inline constexpr int kManifestVersion = 1;

enum class DType { F32, F64 };

const char* to_string(DType dtype);
DType dtype_from_string(const std::string& name);

class ModelIoError : public std::runtime_error {
 public:
  enum class Code { Io, Format, Version, MissingTensor, Checksum, Shape, UnknownOp, Topology, EmptyGraph };

  ModelIoError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

const char* to_string(ModelIoError::Code code);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(const unsigned char* bytes, std::size_t size);

struct LoadOptions {
  bool fold_batchnorm = true;
};

struct LoadedModel {
  Graph graph;
  DType dtype = DType::F64;
  std::string source;
  /// Contents of the sidecar file, when one exists next to the manifest.
  std::optional<Json> sidecar;
};

/// Sidecar path for a manifest: "<manifest>.sidecar.json".
std::string sidecar_path(const std::string& manifest_path);

/// Reads a manifest and its little-endian weights blob. Quantization
/// annotations found in the sidecar are re-attached to the nodes.
LoadedModel load_model(const std::string& manifest_path, const std::string& weights_path,
                       const LoadOptions& options = {});

struct SaveOptions {
  DType dtype = DType::F64;
  std::string source;
  /// Extra sections merged into the sidecar (e.g. equalization scales).
  Json sidecar_extra = Json::object();
};

/// Writes manifest, blob and sidecar. The sidecar always records the node
/// quantization annotations, possibly empty.
void save_model(const Graph& graph, const std::string& manifest_path,
                const std::string& weights_path, const SaveOptions& options = {});

/// Deterministic generator on top of mt19937_64 with a fixed conversion to
/// floating point, so streams match across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

/// splitmix64 finalizer; decorrelates derived seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

/// Reproducible sample stream: sample i depends only on (seed, i).
/// Elements are uniform in [lo, hi).
class SampleStream {
 public:
  SampleStream() = default;
  SampleStream(std::uint64_t seed, InputSpec input, double lo = 0.0, double hi = 1.0)
      : seed_(seed), input_(std::move(input)), lo_(lo), hi_(hi) {}

  Tensor sample(std::size_t index) const;
  std::vector<Tensor> take(std::size_t count, std::size_t offset = 0) const;
  const InputSpec& input() const { return input_; }

 private:
  std::uint64_t seed_ = 0;
  InputSpec input_;
  double lo_ = 0.0, hi_ = 1.0;
};

/// First sample index of the default held-out set.
inline constexpr std::size_t kHeldOutOffset = 1u << 20;
/// Samples used to set channel extrema during fixture generation.
inline constexpr std::size_t kFixtureGenerationSamples = 64;

enum class Topology { Chain, Residual, DepthwiseChain };

const char* to_string(Topology topology);
Topology topology_from_string(const std::string& name);

struct FixtureSpec {
  std::size_t layers = 4;
  std::size_t channels = 8;
  double imbalance = 1.0;  ///< ratio between the largest and smallest channel extremum
  std::uint64_t seed = 0;
  Topology topology = Topology::Chain;
  ActivationKind activation = ActivationKind::ReLU;
  /// Largest channel extremum. For ReLU6 fixtures this applies before the clip.
  double peak = 4.0;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t input_channels = 3;
};

struct Fixture {
  Graph graph;
  SampleStream samples;
};

/// The sample stream of a fixture, without building its network.
SampleStream fixture_samples(const FixtureSpec& spec);

/// Builds a pseudorandom network whose per-channel output extrema on the
/// first kFixtureGenerationSamples samples are spaced geometrically between
/// peak and peak / imbalance, in a seeded channel order. Extrema are set by
/// scaling kernel output channels layer by layer.
Fixture make_fixture(const FixtureSpec& spec);

}  // namespace chaneq
