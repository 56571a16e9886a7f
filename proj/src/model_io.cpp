#include "chaneq/model_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>

namespace chaneq {

const char* to_string(DType dtype) { return dtype == DType::F32 ? "f32" : "f64"; }

DType dtype_from_string(const std::string& name) {
  if (name == "f32") return DType::F32;
  if (name == "f64") return DType::F64;
  throw ModelIoError(ModelIoError::Code::Format, "unknown dtype '" + name + "'");
}

const char* to_string(ModelIoError::Code code) {
  using C = ModelIoError::Code;
  switch (code) {
    case C::Io: return "io";
    case C::Format: return "format";
    case C::Version: return "version";
    case C::MissingTensor: return "missing_tensor";
    case C::Checksum: return "checksum";
    case C::Shape: return "shape";
    case C::UnknownOp: return "unknown_op";
    case C::Topology: return "topology";
    case C::EmptyGraph: return "empty_graph";
  }
  return "unknown";
}

std::uint64_t fnv1a64(const unsigned char* bytes, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string sidecar_path(const std::string& manifest_path) { return manifest_path + ".sidecar.json"; }

namespace {

using Code = ModelIoError::Code;

std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

void append_le(std::vector<unsigned char>& out, std::uint64_t bits, std::size_t bytes) {
  for (std::size_t b = 0; b < bytes; ++b) out.push_back(static_cast<unsigned char>(bits >> (8 * b)));
}

std::uint64_t read_le(const unsigned char* p, std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t b = 0; b < bytes; ++b) v |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return v;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

class BlobWriter {
 public:
  explicit BlobWriter(DType dtype) : dtype_(dtype) {}

  std::string add(const std::string& name, const Shape& shape, std::span<const double> values) {
    const std::size_t offset = blob_.size();
    for (double v : values) {
      if (dtype_ == DType::F64) {
        append_le(blob_, std::bit_cast<std::uint64_t>(v), 8);
      } else {
        append_le(blob_, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
      }
    }
    const std::size_t length = blob_.size() - offset;
    tensors_[name] = Json{{"shape", shape},
                          {"dtype", to_string(dtype_)},
                          {"offset", offset},
                          {"length", length},
                          {"fnv1a64", hex64(fnv1a64(blob_.data() + offset, length))}};
    return name;
  }

  const std::vector<unsigned char>& blob() const { return blob_; }
  Json& tensors() { return tensors_; }

 private:
  DType dtype_;
  std::vector<unsigned char> blob_;
  Json tensors_ = Json::object();
};

class BlobReader {
 public:
  BlobReader(const Json& table, std::vector<unsigned char> blob)
      : table_(table), blob_(std::move(blob)) {
    validate_layout();
  }

  Tensor get(const std::string& name) const {
    if (!table_.contains(name))
      throw ModelIoError(Code::MissingTensor, "manifest references missing tensor '" + name + "'");
    const Json& t = table_.at(name);
    const Shape shape = t.at("shape").get<Shape>();
    const DType dtype = dtype_from_string(t.at("dtype").get<std::string>());
    const std::size_t offset = t.at("offset").get<std::size_t>();
    const std::size_t length = t.at("length").get<std::size_t>();
    const std::size_t width = dtype_size(dtype);
    if (length != shape_elements(shape) * width) {
      throw ModelIoError(Code::Shape, "tensor '" + name + "' has shape " + shape_to_string(shape) +
                                          " but " + std::to_string(length) + " bytes");
    }
    const unsigned char* p = blob_.data() + offset;
    if (t.contains("fnv1a64") && t.at("fnv1a64").get<std::string>() != hex64(fnv1a64(p, length))) {
      throw ModelIoError(Code::Checksum, "checksum mismatch for tensor '" + name + "'");
    }
    std::vector<double> values(shape_elements(shape));
    for (std::size_t i = 0; i < values.size(); ++i) {
      const std::uint64_t bits = read_le(p + i * width, width);
      values[i] = dtype == DType::F64
                      ? std::bit_cast<double>(bits)
                      : static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)));
    }
    return Tensor(shape, std::move(values));
  }

 private:
  void validate_layout() const {
    std::vector<std::pair<std::size_t, std::string>> spans;
    for (const auto& [name, t] : table_.items()) {
      const std::size_t offset = t.at("offset").get<std::size_t>();
      const std::size_t length = t.at("length").get<std::size_t>();
      if (offset > blob_.size() || length > blob_.size() - offset) {
        throw ModelIoError(Code::Shape, "tensor '" + name + "' extends past the end of the weights blob");
      }
      spans.emplace_back(offset, name);
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i) {
      const auto& prev = table_.at(spans[i - 1].second);
      const std::size_t end = prev.at("offset").get<std::size_t>() + prev.at("length").get<std::size_t>();
      if (end > spans[i].first) {
        throw ModelIoError(Code::Format, "tensors '" + spans[i - 1].second + "' and '" +
                                             spans[i].second + "' overlap");
      }
    }
  }

  const Json& table_;
  std::vector<unsigned char> blob_;
};

std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelIoError(Code::Io, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Json activation_json(const Node& n, BlobWriter& w) {
  Json a{{"kind", to_string(n.activation.kind)}};
  if (n.activation.kind == ActivationKind::PReLU) {
    const auto& s = n.activation.slopes;
    a["slopes"] = w.add(n.id + ".slopes", {s.size()}, s);
  }
  return a;
}

}  // namespace

void save_model(const Graph& graph, const std::string& manifest_path,
                const std::string& weights_path, const SaveOptions& options) {
  if (graph.nodes().empty()) throw ModelIoError(Code::EmptyGraph, "cannot save an empty graph");
  BlobWriter w(options.dtype);
  Json nodes = Json::array();
  for (const auto& n : graph.nodes()) {
    Json j{{"id", n.id}, {"op", to_string(n.op)}, {"inputs", n.inputs}};
    if (is_layer(n.op)) {
      j["kernel"] = w.add(n.id + ".kernel", n.kernel.shape(), n.kernel.data());
      j["bias"] = w.add(n.id + ".bias", n.bias.shape(), n.bias.data());
      j["stride"] = {n.stride.h, n.stride.w};
      j["padding"] = to_string(n.padding);
      j["bn_folded"] = n.bn_folded;
    }
    if (n.op == OpKind::BatchNorm) {
      const auto& bn = *n.batch_norm;
      const std::size_t c = bn.gamma.size();
      j["batch_norm"] = {{"gamma", w.add(n.id + ".gamma", {c}, bn.gamma)},
                         {"beta", w.add(n.id + ".beta", {c}, bn.beta)},
                         {"mean", w.add(n.id + ".mean", {c}, bn.mean)},
                         {"var", w.add(n.id + ".var", {c}, bn.var)},
                         {"epsilon", bn.epsilon}};
    }
    j["activation"] = activation_json(n, w);
    nodes.push_back(std::move(j));
  }
  const auto& in = graph.input();
  Json manifest{{"format", kManifestFormat},
                {"version", kManifestVersion},
                {"metadata",
                 {{"source", options.source},
                  {"input_name", in.name},
                  {"input_shape", {in.height, in.width, in.channels}}}},
                {"outputs", graph.outputs()},
                {"nodes", std::move(nodes)},
                {"tensors", std::move(w.tensors())}};

  std::ofstream blob(weights_path, std::ios::binary);
  if (!blob) throw ModelIoError(Code::Io, "cannot write '" + weights_path + "'");
  blob.write(reinterpret_cast<const char*>(w.blob().data()), static_cast<std::streamsize>(w.blob().size()));
  if (!blob) throw ModelIoError(Code::Io, "write to '" + weights_path + "' failed");

  Json sidecar{{"format", "chaneq-sidecar"}, {"version", kManifestVersion},
               {"quant", quant_annotations_to_json(graph)}};
  for (const auto& [key, value] : options.sidecar_extra.items()) sidecar[key] = value;
  try {
    write_text_file(manifest_path, dump(manifest));
    write_text_file(sidecar_path(manifest_path), dump(sidecar));
  } catch (const std::runtime_error& e) {
    throw ModelIoError(Code::Io, e.what());
  }
}

LoadedModel load_model(const std::string& manifest_path, const std::string& weights_path,
                       const LoadOptions& options) {
  Json m;
  try {
    m = read_json_file(manifest_path);
  } catch (const std::runtime_error& e) {
    throw ModelIoError(Code::Io, e.what());
  }
  try {
    if (m.value("format", "") != kManifestFormat)
      throw ModelIoError(Code::Format, "'" + manifest_path + "' is not a chaneq model manifest");
    const int version = m.at("version").get<int>();
    if (version != kManifestVersion)
      throw ModelIoError(Code::Version, "unsupported manifest version " + std::to_string(version));

    const BlobReader blob(m.at("tensors"), read_bytes(weights_path));
    const auto& meta = m.at("metadata");
    const auto shape = meta.at("input_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw ModelIoError(Code::Shape, "input_shape must be [height, width, channels]");
    InputSpec input{meta.value("input_name", "input"), shape[0], shape[1], shape[2]};

    std::vector<Node> nodes;
    DType dtype = DType::F64;
    for (const auto& j : m.at("nodes")) {
      Node n;
      n.id = j.at("id").get<std::string>();
      const std::string op = j.at("op").get<std::string>();
      try {
        n.op = op_kind_from_string(op);
      } catch (const GraphError&) {
        throw ModelIoError(Code::UnknownOp, "node '" + n.id + "' has unknown op '" + op + "'");
      }
      n.inputs = j.at("inputs").get<std::vector<std::string>>();
      if (is_layer(n.op)) {
        const std::string kname = j.at("kernel").get<std::string>();
        n.kernel = blob.get(kname);
        n.bias = blob.get(j.at("bias").get<std::string>());
        dtype = dtype_from_string(m.at("tensors").at(kname).at("dtype").get<std::string>());
        const auto stride = j.value("stride", std::vector<std::size_t>{1, 1});
        if (stride.size() != 2) throw ModelIoError(Code::Format, "node '" + n.id + "' stride must have 2 entries");
        n.stride = {stride[0], stride[1]};
        n.padding = padding_from_string(j.value("padding", "same"));
        n.bn_folded = j.value("bn_folded", false);
      }
      if (n.op == OpKind::BatchNorm) {
        const auto& b = j.at("batch_norm");
        BatchNormParams p;
        p.gamma = blob.get(b.at("gamma").get<std::string>()).values();
        p.beta = blob.get(b.at("beta").get<std::string>()).values();
        p.mean = blob.get(b.at("mean").get<std::string>()).values();
        p.var = blob.get(b.at("var").get<std::string>()).values();
        p.epsilon = b.value("epsilon", kDefaultBatchNormEpsilon);
        n.batch_norm = std::move(p);
      }
      const auto& a = j.at("activation");
      n.activation.kind = activation_kind_from_string(a.at("kind").get<std::string>());
      if (a.contains("slopes")) n.activation.slopes = blob.get(a.at("slopes").get<std::string>()).values();
      nodes.push_back(std::move(n));
    }
    if (nodes.empty()) throw ModelIoError(Code::EmptyGraph, "manifest has no nodes");

    Graph graph = [&] {
      try {
        return Graph(input, std::move(nodes), m.at("outputs").get<std::vector<std::string>>());
      } catch (const GraphError& e) {
        throw ModelIoError(Code::Topology, e.what());
      } catch (const ShapeError& e) {
        throw ModelIoError(Code::Shape, e.what());
      }
    }();

    std::optional<Json> sidecar;
    const std::string sp = sidecar_path(manifest_path);
    if (std::ifstream(sp)) {
      sidecar = read_json_file(sp);
      if (sidecar->contains("quant") && !sidecar->at("quant").empty())
        graph = attach_quant_annotations(graph, sidecar->at("quant"));
    }
    if (options.fold_batchnorm) graph = fold_batchnorm(graph);
    return {std::move(graph), dtype, meta.value("source", ""), std::move(sidecar)};
  } catch (const Json::exception& e) {
    throw ModelIoError(Code::Format, "malformed manifest '" + manifest_path + "': " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ModelIoError(Code::Format, "malformed manifest '" + manifest_path + "': " + e.what());
  }
}

double Rng::normal() {
  if (spare_) {
    const double v = *spare_;
    spare_.reset();
    return v;
  }
  double u1 = uniform();
  while (u1 == 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  return r * std::cos(theta);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

Tensor SampleStream::sample(std::size_t index) const {
  Rng rng(mix_seed(seed_, index));
  Tensor t({1, input_.height, input_.width, input_.channels});
  for (double& v : t.data()) v = rng.uniform(lo_, hi_);
  return t;
}

std::vector<Tensor> SampleStream::take(std::size_t count, std::size_t offset) const {
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample(offset + i));
  return out;
}

const char* to_string(Topology topology) {
  switch (topology) {
    case Topology::Chain: return "chain";
    case Topology::Residual: return "residual";
    case Topology::DepthwiseChain: return "depthwise-chain";
  }
  return "chain";
}

Topology topology_from_string(const std::string& name) {
  if (name == "chain") return Topology::Chain;
  if (name == "residual") return Topology::Residual;
  if (name == "depthwise-chain") return Topology::DepthwiseChain;
  throw std::invalid_argument("unknown topology '" + name + "'");
}

namespace {

constexpr int kDeadChannelRetries = 8;
// Channels active on fewer elements get redrawn; a rarely firing channel
// would need a huge gain to reach its target extremum.
constexpr double kMinChannelActivity = 0.1;

void init_layer(Node& n, Rng& rng) {
  const std::size_t kh = n.kernel.dim(0), kw = n.kernel.dim(1);
  const std::size_t fan_in = kh * kw * (n.op == OpKind::DepthwiseConv ? 1 : n.kernel.dim(2));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : n.kernel.data()) v = sd * rng.normal();
  for (double& v : n.bias.data()) v = rng.uniform(0.0, 0.2);
}

void redraw_channel(Node& n, std::size_t ch, Rng& rng) {
  const std::size_t c = n.layer_out_channels();
  const std::size_t fan_in = n.kernel.size() / c;
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  auto d = n.kernel.data();
  for (std::size_t k = ch; k < d.size(); k += c) d[k] = sd * rng.normal();
  n.bias[ch] = rng.uniform(0.1, 0.5);
}

Node make_layer(std::string id, OpKind op, std::string input, std::size_t k, std::size_t cin,
                std::size_t cout, ActivationKind act, Rng& rng) {
  Node n;
  n.id = std::move(id);
  n.op = op;
  n.inputs = {std::move(input)};
  n.kernel = op == OpKind::DepthwiseConv ? Tensor({k, k, cout, 1}) : Tensor({k, k, cin, cout});
  n.bias = Tensor({cout});
  n.activation.kind = act;
  if (act == ActivationKind::PReLU) {
    n.activation.slopes.resize(cout);
    for (double& s : n.activation.slopes) s = rng.uniform(0.05, 0.3);
  }
  n.padding = Padding::Same;
  init_layer(n, rng);
  return n;
}

struct ChannelProfile {
  std::vector<double> extremum;  ///< max |y|
  std::vector<double> activity;  ///< fraction of nonzero elements

  bool weak(std::size_t c) const { return extremum[c] == 0.0 || activity[c] < kMinChannelActivity; }
};

// Per-channel profile of node `index` over the samples, with the node's
// activation evaluated as ReLU when it is ReLU6.
ChannelProfile channel_profile(const std::vector<Node>& nodes, const InputSpec& input,
                                    const std::vector<std::string>& outputs, std::size_t index,
                                    const std::vector<Tensor>& samples) {
  std::vector<Node> probe = nodes;
  if (probe[index].activation.kind == ActivationKind::ReLU6)
    probe[index].activation = Activation::relu();
  const Graph g(input, std::move(probe), outputs);
  const std::string id = nodes[index].id;
  const std::size_t channels = g.out_channels(id);
  ChannelProfile p{std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0)};
  double elements = 0.0;
  for (const auto& s : samples) {
    const auto r = execute(g, s, TapRequest::of({id}));
    const Tensor& t = r.taps.at(id);
    const auto stats = channel_stats(t);
    for (std::size_t c = 0; c < channels; ++c)
      p.extremum[c] = std::max({p.extremum[c], std::abs(stats[c].min), std::abs(stats[c].max)});
    const auto d = t.data();
    for (std::size_t k = 0; k < d.size(); ++k)
      if (d[k] != 0.0) p.activity[k % channels] += 1.0;
    elements += static_cast<double>(d.size() / channels);
  }
  for (double& a : p.activity) a /= elements;
  return p;
}

}  // namespace

SampleStream fixture_samples(const FixtureSpec& spec) {
  return SampleStream(mix_seed(spec.seed, 1),
                      InputSpec{"input", spec.height, spec.width, spec.input_channels});
}

Fixture make_fixture(const FixtureSpec& spec) {
  if (spec.layers < 2) throw std::invalid_argument("fixture needs at least 2 layers");
  if (spec.channels < 2) throw std::invalid_argument("fixture needs at least 2 channels");
  if (!(spec.imbalance >= 1.0)) throw std::invalid_argument("fixture imbalance must be >= 1");
  if (!(spec.peak > 0.0)) throw std::invalid_argument("fixture peak must be positive");

  Rng rng(mix_seed(spec.seed, 0));
  const InputSpec input{"input", spec.height, spec.width, spec.input_channels};
  const std::size_t c = spec.channels;
  const ActivationKind act = spec.activation;
  std::vector<Node> nodes;
  std::vector<std::string> outputs;
  auto id = [](const char* prefix, std::size_t i) { return std::string(prefix) + std::to_string(i); };

  if (spec.topology == Topology::Chain) {
    std::string prev = input.name;
    std::size_t cin = input.channels;
    for (std::size_t i = 0; i < spec.layers; ++i) {
      nodes.push_back(make_layer(id("conv", i), OpKind::Conv, prev, 3, cin, c, act, rng));
      prev = nodes.back().id;
      cin = c;
    }
  } else if (spec.topology == Topology::DepthwiseChain) {
    nodes.push_back(make_layer("conv0", OpKind::Conv, input.name, 3, input.channels, c, act, rng));
    for (std::size_t i = 1; i < spec.layers; ++i) {
      const bool dw = i % 2 == 1;
      nodes.push_back(make_layer(id(dw ? "dw" : "pw", i), dw ? OpKind::DepthwiseConv : OpKind::Conv,
                                 nodes.back().id, dw ? 3 : 1, c, c, act, rng));
    }
  } else {
    // stem, then blocks of conv -> conv(linear) -> add(skip), then a head.
    nodes.push_back(make_layer("stem", OpKind::Conv, input.name, 3, input.channels, c, act, rng));
    std::string skip = "stem";
    std::size_t made = 1, block = 0;
    while (made + 2 < spec.layers) {
      const std::string a = id("block", block) + "_a", b = id("block", block) + "_b";
      nodes.push_back(make_layer(a, OpKind::Conv, skip, 3, c, c, act, rng));
      nodes.push_back(make_layer(b, OpKind::Conv, a, 3, c, c, ActivationKind::Linear, rng));
      Node add;
      add.id = id("add", block);
      add.op = OpKind::Add;
      add.inputs = {skip, b};
      add.activation.kind = act == ActivationKind::PReLU ? ActivationKind::ReLU : act;
      nodes.push_back(std::move(add));
      skip = nodes.back().id;
      made += 2;
      ++block;
    }
    while (made < spec.layers) {
      nodes.push_back(make_layer(id("head", made), OpKind::Conv, skip, 1, c, c, act, rng));
      skip = nodes.back().id;
      ++made;
    }
  }
  // The last layer is the network output and stays linear.
  nodes.back().activation = Activation::linear();
  outputs.push_back(nodes.back().id);

  const SampleStream stream = fixture_samples(spec);
  const auto samples = stream.take(kFixtureGenerationSamples);

  std::vector<std::size_t> order(c);
  for (std::size_t i = 0; i < c; ++i) order[i] = i;
  for (std::size_t i = c - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);

  for (std::size_t idx = 0; idx < nodes.size(); ++idx) {
    Node& n = nodes[idx];
    if (!is_layer(n.op)) continue;
    auto profile = channel_profile(nodes, input, outputs, idx, samples);
    for (int attempt = 0; attempt < kDeadChannelRetries; ++attempt) {
      bool weak = false;
      for (std::size_t ch = 0; ch < c; ++ch) {
        if (profile.weak(ch)) {
          redraw_channel(n, ch, rng);
          weak = true;
        }
      }
      if (!weak) break;
      profile = channel_profile(nodes, input, outputs, idx, samples);
    }
    const auto& ext = profile.extremum;
    for (std::size_t ch = 0; ch < c; ++ch) {
      if (ext[ch] == 0.0) throw std::runtime_error("fixture channel " + n.id + ":" + std::to_string(ch) + " stayed dead");
      const double position = static_cast<double>(order[ch]) / static_cast<double>(c - 1);
      const double target = spec.peak * std::pow(spec.imbalance, -position);
      const double f = target / ext[ch];
      auto d = n.kernel.data();
      for (std::size_t k = ch; k < d.size(); k += c) d[k] *= f;
      n.bias[ch] *= f;
    }
  }
  return {Graph(input, std::move(nodes), std::move(outputs)), stream};
}

}  // namespace chaneq
