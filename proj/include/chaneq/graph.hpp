#pragma once

#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "chaneq/quant.hpp"
#include "chaneq/tensor.hpp"

namespace chaneq {

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OpKind { Conv, DepthwiseConv, BatchNorm, Add, Concat };

const char* to_string(OpKind op);
OpKind op_kind_from_string(const std::string& name);

inline bool is_layer(OpKind op) { return op == OpKind::Conv || op == OpKind::DepthwiseConv; }
inline bool is_junction(OpKind op) { return op == OpKind::Add || op == OpKind::Concat; }

inline constexpr double kDefaultBatchNormEpsilon = 1e-5;

struct BatchNormParams {
  std::vector<double> gamma, beta, mean, var;
  double epsilon = kDefaultBatchNormEpsilon;
};

/// Fake-quantization annotations attached by quantize_graph. Kernels and
/// biases of an annotated node already hold dequantized values; the
/// activation spec is applied to the post-activation output at run time.
struct NodeQuant {
  std::optional<QuantSpec> weight;
  std::optional<QuantSpec> bias;
  std::optional<QuantSpec> activation;

  bool empty() const { return !weight && !bias && !activation; }
};

/// One graph node. Conv and DepthwiseConv are the layers; BatchNorm only
/// exists until folding; Add and Concat are junctions.
struct Node {
  std::string id;
  OpKind op = OpKind::Conv;
  std::vector<std::string> inputs;
  Tensor kernel;  ///< (kh, kw, c_in, c_out), depthwise (kh, kw, c, 1)
  Tensor bias;    ///< (c_out)
  Activation activation;
  Stride stride;
  Padding padding = Padding::Same;
  std::optional<BatchNormParams> batch_norm;
  bool bn_folded = false;
  NodeQuant quant;

  /// Output channel count of a layer node (kernel c_out, or c for depthwise).
  std::size_t layer_out_channels() const;
  std::size_t kernel_height() const { return kernel.dim(0); }
  std::size_t kernel_width() const { return kernel.dim(1); }
};

struct InputSpec {
  std::string name = "input";
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  bool operator==(const InputSpec&) const = default;
};

/// Immutable topologically sorted DAG. Construction validates ids, edges,
/// acyclicity and channel agreement along every edge. Rewrites build a new
/// Graph from a modified node list.
class Graph {
 public:
  Graph(InputSpec input, std::vector<Node> nodes, std::vector<std::string> outputs);

  const InputSpec& input() const { return input_; }
  /// Nodes in topological order; ties keep declaration order.
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<std::string>& outputs() const { return outputs_; }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  std::size_t index_of(const std::string& id) const;
  const Node& node(const std::string& id) const { return nodes_[index_of(id)]; }

  /// Consumers of `id` in topological order. Accepts the graph input name.
  std::vector<std::string> successors(const std::string& id) const;
  /// Producers of `id` in operand order; the graph input appears by name.
  std::vector<std::string> predecessors(const std::string& id) const;

  std::size_t out_channels(const std::string& id) const;
  bool is_output(const std::string& id) const;

  std::vector<std::pair<std::string, std::string>> edges() const;

 private:
  InputSpec input_;
  std::vector<Node> nodes_;
  std::vector<std::string> outputs_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::size_t> channels_;
  std::vector<std::vector<std::size_t>> consumers_;
  std::vector<std::size_t> input_consumers_;
};

/// Absorbs every BatchNorm node into its producing layer.
Graph fold_batchnorm(const Graph& graph);

class TapRequest {
 public:
  static TapRequest none() { return {}; }
  static TapRequest all() {
    TapRequest t;
    t.all_ = true;
    return t;
  }
  static TapRequest of(std::set<std::string> ids) {
    TapRequest t;
    t.ids_ = std::move(ids);
    return t;
  }
  bool wants(const std::string& id) const { return all_ || ids_.count(id) != 0; }
  const std::set<std::string>& ids() const { return ids_; }
  bool everything() const { return all_; }

 private:
  bool all_ = false;
  std::set<std::string> ids_;
};

struct ExecResult {
  std::vector<Tensor> outputs;         ///< in graph output order
  std::map<std::string, Tensor> taps;  ///< post-activation (post fake-quant) outputs

  const Tensor& output() const { return outputs.front(); }
};

/// Computes one node from its operand values, including activation and any
/// activation fake-quantization.
Tensor evaluate_node(const Node& node, std::span<const Tensor> operands);

/// Forward pass in topological order.
ExecResult execute(const Graph& graph, const Tensor& input,
                   const TapRequest& taps = TapRequest::none());

/// Layer-node ids (Conv and DepthwiseConv) in topological order.
std::vector<std::string> layer_ids(const Graph& graph);

}  // namespace chaneq
