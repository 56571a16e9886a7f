#include "chaneq/graph.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

namespace chaneq {

const char* to_string(OpKind op) {
  switch (op) {
    case OpKind::Conv: return "conv";
    case OpKind::DepthwiseConv: return "depthwise_conv";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::Add: return "add";
    case OpKind::Concat: return "concat";
  }
  return "?";
}

OpKind op_kind_from_string(const std::string& name) {
  if (name == "conv") return OpKind::Conv;
  if (name == "depthwise_conv") return OpKind::DepthwiseConv;
  if (name == "batch_norm") return OpKind::BatchNorm;
  if (name == "add") return OpKind::Add;
  if (name == "concat") return OpKind::Concat;
  throw GraphError("unknown op '" + name + "'");
}

std::size_t Node::layer_out_channels() const {
  if (op == OpKind::DepthwiseConv) return kernel.dim(2);
  return kernel.dim(3);
}

namespace {

std::size_t expected_arity(OpKind op) {
  return is_junction(op) ? 0 : 1;  // 0: two or more
}

}  // namespace

Graph::Graph(InputSpec input, std::vector<Node> nodes, std::vector<std::string> outputs)
    : input_(std::move(input)), outputs_(std::move(outputs)) {
  if (input_.channels == 0) throw GraphError("graph input '" + input_.name + "' has no channels");
  if (nodes.empty()) throw GraphError("graph has no nodes");

  std::map<std::string, std::size_t> decl;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    if (n.id.empty()) throw GraphError("node " + std::to_string(i) + " has an empty id");
    if (n.id == input_.name) throw GraphError("node id '" + n.id + "' collides with graph input");
    if (!decl.emplace(n.id, i).second) throw GraphError("duplicate node id '" + n.id + "'");
  }

  // Kahn's algorithm; the min-heap keeps declaration order among ready nodes.
  std::vector<std::size_t> pending(nodes.size(), 0);
  std::vector<std::vector<std::size_t>> users(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    const std::size_t arity = expected_arity(n.op);
    if (arity == 1 && n.inputs.size() != 1) {
      throw GraphError("node '" + n.id + "' (" + to_string(n.op) + ") needs exactly one input, has " +
                       std::to_string(n.inputs.size()));
    }
    if (arity == 0 && n.inputs.size() < 2) {
      throw GraphError("junction '" + n.id + "' needs at least two inputs");
    }
    for (const auto& src : n.inputs) {
      if (src == input_.name) continue;
      auto it = decl.find(src);
      if (it == decl.end()) throw GraphError("node '" + n.id + "' reads unknown node '" + src + "'");
      users[it->second].push_back(i);
      ++pending[i];
    }
  }
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (pending[i] == 0) ready.push(i);
  std::vector<std::size_t> order;
  while (!ready.empty()) {
    const std::size_t i = ready.top();
    ready.pop();
    order.push_back(i);
    for (auto u : users[i])
      if (--pending[u] == 0) ready.push(u);
  }
  if (order.size() != nodes.size()) throw GraphError("graph contains a cycle");

  nodes_.reserve(nodes.size());
  for (auto i : order) nodes_.push_back(std::move(nodes[i]));
  for (std::size_t i = 0; i < nodes_.size(); ++i) index_[nodes_[i].id] = i;

  channels_.resize(nodes_.size());
  consumers_.resize(nodes_.size());
  auto channels_of = [&](const std::string& src) {
    return src == input_.name ? input_.channels : channels_[index_.at(src)];
  };

  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    auto& n = nodes_[i];
    for (const auto& src : n.inputs) {
      if (src == input_.name) {
        input_consumers_.push_back(i);
      } else {
        consumers_[index_.at(src)].push_back(i);
      }
    }
    const std::size_t in_c = channels_of(n.inputs.front());
    std::size_t out_c = in_c;
    switch (n.op) {
      case OpKind::Conv: {
        if (n.kernel.rank() != 4) {
          throw GraphError("node '" + n.id + "': kernel must be rank 4, got " +
                           shape_to_string(n.kernel.shape()));
        }
        if (n.kernel.dim(2) != in_c) {
          throw GraphError("node '" + n.id + "': kernel c_in " + std::to_string(n.kernel.dim(2)) +
                           " does not match producer channels " + std::to_string(in_c));
        }
        out_c = n.kernel.dim(3);
        break;
      }
      case OpKind::DepthwiseConv: {
        if (n.kernel.rank() == 3) n.kernel = n.kernel.reshaped({n.kernel.dim(0), n.kernel.dim(1), n.kernel.dim(2), 1});
        if (n.kernel.rank() != 4 || n.kernel.dim(3) != 1) {
          throw GraphError("node '" + n.id + "': depthwise kernel must be (kh, kw, c, 1), got " +
                           shape_to_string(n.kernel.shape()));
        }
        if (n.kernel.dim(2) != in_c) {
          throw GraphError("node '" + n.id + "': depthwise channels " +
                           std::to_string(n.kernel.dim(2)) + " do not match producer channels " +
                           std::to_string(in_c));
        }
        break;
      }
      case OpKind::BatchNorm: {
        if (!n.batch_norm) throw GraphError("node '" + n.id + "': batch_norm without parameters");
        const auto& bn = *n.batch_norm;
        for (const auto* v : {&bn.gamma, &bn.beta, &bn.mean, &bn.var}) {
          if (v->size() != in_c) {
            throw GraphError("node '" + n.id + "': batch_norm parameter length " +
                             std::to_string(v->size()) + " does not match channels " +
                             std::to_string(in_c));
          }
        }
        break;
      }
      case OpKind::Add: {
        for (const auto& src : n.inputs) {
          if (channels_of(src) != in_c) {
            throw GraphError("add '" + n.id + "': operand '" + src + "' has " +
                             std::to_string(channels_of(src)) + " channels, expected " +
                             std::to_string(in_c));
          }
        }
        break;
      }
      case OpKind::Concat: {
        out_c = 0;
        for (const auto& src : n.inputs) out_c += channels_of(src);
        break;
      }
    }
    if (is_layer(n.op) && n.bias.size() != out_c) {
      throw GraphError("node '" + n.id + "': bias length " + std::to_string(n.bias.size()) +
                       " does not match output channels " + std::to_string(out_c));
    }
    if (n.activation.kind == ActivationKind::PReLU) {
      const auto ns = n.activation.slopes.size();
      if (ns != 1 && ns != out_c) {
        throw GraphError("node '" + n.id + "': PReLU slope count " + std::to_string(ns) +
                         " does not match output channels " + std::to_string(out_c));
      }
      for (double s : n.activation.slopes)
        if (!(s >= 0.0)) throw GraphError("node '" + n.id + "': PReLU slopes must be >= 0");
    }
    channels_[i] = out_c;
  }

  if (outputs_.empty()) throw GraphError("graph has no outputs");
  for (const auto& o : outputs_)
    if (!contains(o)) throw GraphError("unknown output node '" + o + "'");
}

std::size_t Graph::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw GraphError("unknown node '" + id + "'");
  return it->second;
}

std::vector<std::string> Graph::successors(const std::string& id) const {
  const auto& list = id == input_.name ? input_consumers_ : consumers_[index_of(id)];
  std::vector<std::string> out;
  for (auto i : list)
    if (out.empty() || out.back() != nodes_[i].id) out.push_back(nodes_[i].id);
  return out;
}

std::vector<std::string> Graph::predecessors(const std::string& id) const {
  return nodes_[index_of(id)].inputs;
}

std::size_t Graph::out_channels(const std::string& id) const {
  if (id == input_.name) return input_.channels;
  return channels_[index_of(id)];
}

bool Graph::is_output(const std::string& id) const {
  return std::find(outputs_.begin(), outputs_.end(), id) != outputs_.end();
}

std::vector<std::pair<std::string, std::string>> Graph::edges() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& n : nodes_)
    for (const auto& src : n.inputs) out.emplace_back(src, n.id);
  return out;
}

std::vector<std::string> layer_ids(const Graph& graph) {
  std::vector<std::string> ids;
  for (const auto& n : graph.nodes())
    if (is_layer(n.op)) ids.push_back(n.id);
  return ids;
}

namespace {

// Scales output channel `ch` of a layer kernel by `factor`.
void scale_kernel_output_channel(Tensor& kernel, OpKind op, std::size_t ch, double factor) {
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), cin = kernel.dim(2);
  if (op == OpKind::DepthwiseConv) {
    for (std::size_t y = 0; y < kh; ++y)
      for (std::size_t x = 0; x < kw; ++x) kernel.at(y, x, ch, 0) *= factor;
    return;
  }
  for (std::size_t y = 0; y < kh; ++y)
    for (std::size_t x = 0; x < kw; ++x)
      for (std::size_t i = 0; i < cin; ++i) kernel.at(y, x, i, ch) *= factor;
}

}  // namespace

Graph fold_batchnorm(const Graph& graph) {
  std::vector<Node> nodes = graph.nodes();
  std::vector<std::string> outputs = graph.outputs();
  std::map<std::string, std::string> renamed;  // bn id -> producer id
  std::vector<bool> drop(nodes.size(), false);

  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& bn_node = nodes[i];
    if (bn_node.op != OpKind::BatchNorm) continue;
    const std::string& src = bn_node.inputs.front();
    if (src == graph.input().name || !is_layer(graph.node(src).op)) {
      throw GraphError("batch_norm '" + bn_node.id + "' follows '" + src +
                       "', which is not a conv layer (unsupported topology)");
    }
    const std::size_t p = graph.index_of(src);
    Node& producer = nodes[p];
    if (producer.activation.kind != ActivationKind::Linear) {
      throw GraphError("batch_norm '" + bn_node.id + "' follows non-linear activation of '" + src +
                       "' (unsupported topology)");
    }
    if (graph.successors(src).size() != 1 || graph.is_output(src)) {
      throw GraphError("batch_norm '" + bn_node.id + "': producer '" + src +
                       "' has other consumers (unsupported topology)");
    }
    const auto& bn = *bn_node.batch_norm;
    for (std::size_t c = 0; c < bn.gamma.size(); ++c) {
      const double s = bn.gamma[c] / std::sqrt(bn.var[c] + bn.epsilon);
      scale_kernel_output_channel(producer.kernel, producer.op, c, s);
      producer.bias[c] = (producer.bias[c] - bn.mean[c]) * s + bn.beta[c];
    }
    producer.activation = bn_node.activation;
    producer.bn_folded = true;
    renamed[bn_node.id] = src;
    drop[i] = true;
  }
  if (renamed.empty()) return graph;

  std::vector<Node> kept;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (drop[i]) continue;
    for (auto& src : nodes[i].inputs) {
      auto it = renamed.find(src);
      if (it != renamed.end()) src = it->second;
    }
    kept.push_back(std::move(nodes[i]));
  }
  for (auto& o : outputs) {
    auto it = renamed.find(o);
    if (it != renamed.end()) o = it->second;
  }
  return Graph(graph.input(), std::move(kept), std::move(outputs));
}

Tensor evaluate_node(const Node& n, std::span<const Tensor> operands) {
  Tensor y;
  switch (n.op) {
    case OpKind::Conv:
      y = conv2d(operands[0], n.kernel, n.bias, n.stride, n.padding);
      break;
    case OpKind::DepthwiseConv:
      y = depthwise_conv2d(operands[0], n.kernel, n.bias, n.stride, n.padding);
      break;
    case OpKind::BatchNorm: {
      y = operands[0];
      const auto& bn = *n.batch_norm;
      const std::size_t c = y.channels();
      auto d = y.data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        const std::size_t ch = i % c;
        d[i] = bn.gamma[ch] * (d[i] - bn.mean[ch]) / std::sqrt(bn.var[ch] + bn.epsilon) +
               bn.beta[ch];
      }
      break;
    }
    case OpKind::Add:
      y = add(operands);
      break;
    case OpKind::Concat:
      y = concat_channels(operands);
      break;
  }
  y = apply_activation(y, n.activation);
  if (n.quant.activation) y = quantize_dequantize(y, *n.quant.activation);
  return y;
}

ExecResult execute(const Graph& graph, const Tensor& input, const TapRequest& taps) {
  const auto& in = graph.input();
  if (input.rank() != 4 || input.dim(1) != in.height || input.dim(2) != in.width ||
      input.dim(3) != in.channels) {
    throw ShapeError("graph input '" + in.name + "' expects (N, " + std::to_string(in.height) +
                     ", " + std::to_string(in.width) + ", " + std::to_string(in.channels) +
                     "), got " + shape_to_string(input.shape()));
  }
  const auto& nodes = graph.nodes();
  std::vector<Tensor> values(nodes.size());
  ExecResult result;
  std::vector<Tensor> operands;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    operands.clear();
    for (const auto& src : n.inputs)
      operands.push_back(src == in.name ? input : values[graph.index_of(src)]);
    try {
      values[i] = evaluate_node(n, operands);
    } catch (const ShapeError& e) {
      throw ShapeError("node '" + n.id + "': " + e.what());
    }
    if (taps.wants(n.id)) result.taps.emplace(n.id, values[i]);
  }
  for (const auto& o : graph.outputs()) result.outputs.push_back(values[graph.index_of(o)]);
  return result;
}

}  // namespace chaneq
