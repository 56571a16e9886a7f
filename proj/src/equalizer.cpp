#include "chaneq/equalizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "chaneq/numeric.hpp"

namespace chaneq {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

ScaleVector ScaleVector::ones(std::string layer_id, std::size_t channels, double s_max) {
  return {std::move(layer_id), std::vector<double>(channels, 1.0), s_max};
}

bool ScaleVector::all_ones(double tol) const {
  return std::all_of(factors.begin(), factors.end(),
                     [tol](double f) { return std::abs(f - 1.0) <= tol; });
}

const char* to_string(SkipReason reason) {
  switch (reason) {
    case SkipReason::NonHomogeneousActivation: return "non-homogeneous activation";
    case SkipReason::JunctionConsumer: return "junction consumer";
    case SkipReason::NetworkOutput: return "network output";
    case SkipReason::NoCalibration: return "no calibration";
  }
  return "?";
}

SkipReason skip_reason_from_string(const std::string& name) {
  for (auto r : {SkipReason::NonHomogeneousActivation, SkipReason::JunctionConsumer,
                 SkipReason::NetworkOutput, SkipReason::NoCalibration})
    if (name == to_string(r)) return r;
  throw EqualizationError("unknown skip reason '" + name + "'");
}

const LayerEligibility& EligibilityReport::at(const std::string& id) const {
  for (const auto& l : layers)
    if (l.layer_id == id) return l;
  throw EqualizationError("layer '" + id + "' not in eligibility report");
}

const ScaleVector& EqualizationResult::scales_for(const std::string& id) const {
  for (const auto& s : scales)
    if (s.layer_id == id) return s;
  throw EqualizationError("no scale vector for layer '" + id + "'");
}

std::optional<SkipReason> check_eligibility(const Graph& graph, const std::string& layer_id,
                                            const CalibrationRecord* calib, bool relu6_guarded) {
  const Node& layer = graph.node(layer_id);
  if (!is_layer(layer.op)) {
    throw EqualizationError("'" + layer_id + "' is a " + to_string(layer.op) + ", not a layer");
  }
  const auto consumers = graph.successors(layer_id);
  if (graph.is_output(layer_id) || consumers.empty()) return SkipReason::NetworkOutput;
  for (const auto& c : consumers)
    if (!is_layer(graph.node(c).op)) return SkipReason::JunctionConsumer;
  if (!layer.activation.positively_homogeneous() && !relu6_guarded)
    return SkipReason::NonHomogeneousActivation;
  if (calib && calib->layers.count(layer_id) == 0) return SkipReason::NoCalibration;
  return std::nullopt;
}

EligibilityReport assess_eligibility(const Graph& graph, const CalibrationRecord* calib,
                                     bool relu6_guarded) {
  EligibilityReport report;
  for (const auto& id : layer_ids(graph))
    report.layers.push_back({id, check_eligibility(graph, id, calib, relu6_guarded)});
  return report;
}

std::vector<double> kernel_out_channel_max(const Node& layer) {
  const Tensor& k = layer.kernel;
  const std::size_t kh = k.dim(0), kw = k.dim(1), cin = k.dim(2), cout = k.dim(3);
  if (layer.op == OpKind::DepthwiseConv) {
    std::vector<double> m(cin, 0.0);
    for (std::size_t y = 0; y < kh; ++y)
      for (std::size_t x = 0; x < kw; ++x)
        for (std::size_t c = 0; c < cin; ++c) m[c] = std::max(m[c], std::abs(k.at(y, x, c, 0)));
    return m;
  }
  std::vector<double> m(cout, 0.0);
  for (std::size_t y = 0; y < kh; ++y)
    for (std::size_t x = 0; x < kw; ++x)
      for (std::size_t i = 0; i < cin; ++i)
        for (std::size_t o = 0; o < cout; ++o) m[o] = std::max(m[o], std::abs(k.at(y, x, i, o)));
  return m;
}

std::vector<double> kernel_in_channel_max(const Node& consumer) {
  const Tensor& k = consumer.kernel;
  const std::size_t kh = k.dim(0), kw = k.dim(1), cin = k.dim(2), cout = k.dim(3);
  std::vector<double> m(cin, 0.0);
  for (std::size_t y = 0; y < kh; ++y)
    for (std::size_t x = 0; x < kw; ++x)
      for (std::size_t i = 0; i < cin; ++i)
        for (std::size_t o = 0; o < cout; ++o) m[i] = std::max(m[i], std::abs(k.at(y, x, i, o)));
  return m;
}

namespace {

std::vector<double> successor_in_max(const Graph& topology, const std::vector<Node>& nodes,
                                     const std::string& layer_id) {
  std::vector<double> m(topology.out_channels(layer_id), 0.0);
  for (const auto& c : topology.successors(layer_id)) {
    const auto in_max = kernel_in_channel_max(nodes[topology.index_of(c)]);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::max(m[i], in_max[i]);
  }
  return m;
}

// Scales output channels of nodes[layer] by c and the matching input slices
// of every consumer by 1/c. Node order is the topology's.
void apply_scaling(const Graph& topology, std::vector<Node>& nodes, const std::string& layer_id,
                   std::span<const double> c) {
  Node& layer = nodes[topology.index_of(layer_id)];
  Tensor& k = layer.kernel;
  const std::size_t kh = k.dim(0), kw = k.dim(1), cin = k.dim(2), cout = k.dim(3);
  if (layer.op == OpKind::DepthwiseConv) {
    for (std::size_t y = 0; y < kh; ++y)
      for (std::size_t x = 0; x < kw; ++x)
        for (std::size_t ch = 0; ch < cin; ++ch) k.at(y, x, ch, 0) *= c[ch];
  } else {
    for (std::size_t y = 0; y < kh; ++y)
      for (std::size_t x = 0; x < kw; ++x)
        for (std::size_t i = 0; i < cin; ++i)
          for (std::size_t o = 0; o < cout; ++o) k.at(y, x, i, o) *= c[o];
  }
  for (std::size_t ch = 0; ch < c.size(); ++ch) layer.bias[ch] *= c[ch];

  for (const auto& cid : topology.successors(layer_id)) {
    Tensor& w = nodes[topology.index_of(cid)].kernel;
    const std::size_t h2 = w.dim(0), w2 = w.dim(1), in2 = w.dim(2), out2 = w.dim(3);
    for (std::size_t y = 0; y < h2; ++y)
      for (std::size_t x = 0; x < w2; ++x)
        for (std::size_t i = 0; i < in2; ++i)
          for (std::size_t o = 0; o < out2; ++o) w.at(y, x, i, o) /= c[i];
  }
}

void validate_factors(const Graph& graph, const ScaleVector& scales) {
  const std::size_t channels = graph.out_channels(scales.layer_id);
  if (scales.factors.size() != channels) {
    throw EqualizationError("scale vector for '" + scales.layer_id + "' has " +
                            std::to_string(scales.factors.size()) + " factors, layer has " +
                            std::to_string(channels) + " channels");
  }
  for (std::size_t i = 0; i < channels; ++i) {
    const double f = scales.factors[i];
    if (!(f > 0.0) || !std::isfinite(f)) {
      throw EqualizationError("scale factor " + std::to_string(i) + " of '" + scales.layer_id +
                              "' is not a positive finite number");
    }
  }
}

}  // namespace

std::vector<double> successor_in_channel_max(const Graph& graph, const std::string& layer_id) {
  return successor_in_max(graph, graph.nodes(), layer_id);
}

Graph factorize_pair(const Graph& graph, const ScaleVector& scales, bool relu6_attested) {
  if (auto reason = check_eligibility(graph, scales.layer_id, nullptr, relu6_attested)) {
    throw EqualizationError("layer '" + scales.layer_id + "' is not eligible: " + to_string(*reason),
                            reason);
  }
  validate_factors(graph, scales);
  std::vector<Node> nodes = graph.nodes();
  apply_scaling(graph, nodes, scales.layer_id, scales.factors);
  return Graph(graph.input(), std::move(nodes), graph.outputs());
}

std::vector<double> activation_headroom(std::span<const double> ch_min,
                                        std::span<const double> ch_max) {
  const std::size_t n = ch_max.size();
  double hi = 0.0, lo = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    hi = std::max(hi, ch_max[i]);
    lo = std::min(lo, ch_min[i]);
  }
  std::vector<double> r(n, kInf);
  for (std::size_t i = 0; i < n; ++i) {
    if (ch_max[i] > 0.0) r[i] = std::min(r[i], hi / ch_max[i]);
    if (ch_min[i] < 0.0) r[i] = std::min(r[i], lo / ch_min[i]);
  }
  return r;
}

std::vector<double> kernel_headroom(std::span<const double> ker_ch_max) {
  double top = 0.0;
  for (double k : ker_ch_max) top = std::max(top, k);
  std::vector<double> r(ker_ch_max.size(), kInf);
  for (std::size_t i = 0; i < r.size(); ++i)
    if (ker_ch_max[i] > 0.0) r[i] = top / ker_ch_max[i];
  return r;
}

namespace {

void check_lengths(std::span<const double> a, std::span<const double> b,
                   std::span<const double> c) {
  if (a.size() != b.size() || a.size() != c.size()) {
    throw EqualizationError("per-channel statistics have inconsistent lengths (" +
                            std::to_string(a.size()) + ", " + std::to_string(b.size()) + ", " +
                            std::to_string(c.size()) + ")");
  }
}

}  // namespace

std::vector<double> one_step_scales(std::span<const double> ker_ch_max,
                                    std::span<const double> act_ch_min,
                                    std::span<const double> act_ch_max, double s_max,
                                    std::vector<std::string>* diagnostics) {
  check_lengths(ker_ch_max, act_ch_min, act_ch_max);
  const auto ker = kernel_headroom(ker_ch_max);
  const auto act = activation_headroom(act_ch_min, act_ch_max);
  std::vector<double> s(ker.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = std::min({ker[i], act[i], s_max});
    if (std::isinf(ker[i]) && std::isinf(act[i]) && diagnostics) {
      diagnostics->push_back("channel " + std::to_string(i) +
                             " has zero kernel and activation extrema; scale clamped to s_max");
    }
  }
  return s;
}

std::vector<double> two_step_raw_scales(std::span<const double> ker_ch_max,
                                        std::span<const double> act_ch_min,
                                        std::span<const double> act_ch_max,
                                        std::span<const double> suc_in_ch_max, double s_max,
                                        std::vector<std::string>* diagnostics) {
  check_lengths(ker_ch_max, act_ch_min, act_ch_max);
  check_lengths(ker_ch_max, suc_in_ch_max, act_ch_max);
  const auto ker = kernel_headroom(ker_ch_max);
  const auto act = activation_headroom(act_ch_min, act_ch_max);
  double suc_top = 0.0;
  for (double v : suc_in_ch_max) suc_top = std::max(suc_top, v);
  std::vector<double> s(ker.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    double suc_ratio = 1.0;
    if (suc_top > 0.0 && suc_in_ch_max[i] > 0.0) {
      suc_ratio = suc_in_ch_max[i] / suc_top;
    } else if (diagnostics) {
      diagnostics->push_back("channel " + std::to_string(i) +
                             " is not read by any successor weight; successor ratio set to 1");
    }
    s[i] = std::min({ker[i] * suc_ratio, act[i] * suc_ratio, s_max});
    if (std::isinf(ker[i]) && std::isinf(act[i]) && diagnostics) {
      diagnostics->push_back("channel " + std::to_string(i) +
                             " has zero kernel and activation extrema; scale clamped to s_max");
    }
  }
  return s;
}

std::vector<bool> relu6_guard(const LayerCalibration& calib) {
  std::vector<bool> mask(calib.activation.ch_max.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = calib.activation.ch_max[i] < kRelu6Ceiling;
  return mask;
}

void apply_relu6_guard(std::vector<double>& factors, std::span<const double> act_ch_max,
                       const std::vector<bool>& amplifiable) {
  for (std::size_t i = 0; i < factors.size(); ++i) {
    if (!amplifiable[i]) {
      factors[i] = std::min(factors[i], 1.0);
    } else if (act_ch_max[i] > 0.0) {
      factors[i] = std::min(factors[i], kRelu6Ceiling / act_ch_max[i]);
    }
  }
}

void rescale_calibration(CalibrationRecord& calib, const std::string& layer_id,
                         std::span<const double> factors) {
  auto it = calib.layers.find(layer_id);
  if (it == calib.layers.end()) throw QuantError("no calibration for layer '" + layer_id + "'");
  ActivationStats& s = it->second.activation;
  for (std::size_t i = 0; i < factors.size(); ++i) {
    s.ch_min[i] *= factors[i];
    s.ch_max[i] *= factors[i];
    s.ch_sumsq[i] *= factors[i] * factors[i];
  }
}

namespace {

enum class Algorithm { OneStep, TwoStep };

EqualizationResult run_equalization(const Graph& graph, const CalibrationRecord& calib,
                                    double s_max, Algorithm algorithm, TwoStepMode mode,
                                    double floor) {
  if (!(s_max >= 1.0)) throw EqualizationError("s_max must be >= 1");
  if (!(floor > 0.0 && floor <= 1.0)) throw EqualizationError("attenuation floor must be in (0, 1]");

  std::vector<Node> nodes = graph.nodes();
  CalibrationRecord updated = calib;
  std::vector<ScaleVector> scales;
  EligibilityReport report;
  std::vector<std::string> diagnostics;

  for (const auto& id : layer_ids(graph)) {
    const std::size_t channels = graph.out_channels(id);
    const auto reason = check_eligibility(graph, id, &calib, true);
    report.layers.push_back({id, reason});
    if (reason) {
      scales.push_back(ScaleVector::ones(id, channels, s_max));
      diagnostics.push_back("skipped '" + id + "': " + to_string(*reason));
      continue;
    }
    const Node& layer = nodes[graph.index_of(id)];
    const auto ker = kernel_out_channel_max(layer);
    const LayerCalibration& lc = updated.at(id);
    const auto& act = lc.activation;

    std::vector<std::string> notes;
    std::vector<double> f;
    if (algorithm == Algorithm::OneStep) {
      f = one_step_scales(ker, act.ch_min, act.ch_max, s_max, &notes);
    } else {
      const auto suc = successor_in_max(graph, nodes, id);
      f = two_step_raw_scales(ker, act.ch_min, act.ch_max, suc, s_max, &notes);
      if (mode == TwoStepMode::Standard) {
        const double lowest = *std::min_element(f.begin(), f.end());
        for (auto& v : f) v /= lowest;
      }
    }
    if (layer.activation.kind == ActivationKind::ReLU6)
      apply_relu6_guard(f, act.ch_max, relu6_guard(lc));
    if (algorithm == Algorithm::TwoStep && mode == TwoStepMode::MobileNet)
      for (auto& v : f) v = std::max(v, floor);

    for (const auto& n : notes) diagnostics.push_back("'" + id + "' " + n);
    apply_scaling(graph, nodes, id, f);
    rescale_calibration(updated, id, f);
    scales.push_back({id, std::move(f), s_max});
  }

  Graph out(graph.input(), std::move(nodes), graph.outputs());
  refresh_specs(updated, out);
  return {std::move(out), std::move(scales), std::move(report), std::move(updated),
          std::move(diagnostics)};
}

}  // namespace

EqualizationResult one_step_equalize(const Graph& graph, const CalibrationRecord& calib,
                                     double s_max) {
  return run_equalization(graph, calib, s_max, Algorithm::OneStep, TwoStepMode::Standard, 1.0);
}

EqualizationResult two_step_equalize(const Graph& graph, const CalibrationRecord& calib,
                                     double s_max, TwoStepMode mode, double attenuation_floor) {
  return run_equalization(graph, calib, s_max, Algorithm::TwoStep, mode, attenuation_floor);
}

std::map<std::string, std::vector<double>> channel_means(const Graph& graph,
                                                         std::span<const Tensor> samples) {
  std::map<std::string, std::vector<CompensatedSum>> sums;
  std::map<std::string, std::uint64_t> counts;
  for (const auto& sample : samples) {
    const auto r = execute(graph, sample, TapRequest::all());
    for (const auto& [id, t] : r.taps) {
      const std::size_t c = t.channels();
      auto& acc = sums[id];
      acc.resize(c);
      const auto d = t.data();
      for (std::size_t i = 0; i < d.size(); ++i) acc[i % c].add(d[i]);
      counts[id] += t.size() / c;
    }
  }
  std::map<std::string, std::vector<double>> means;
  for (const auto& [id, acc] : sums) {
    auto& m = means[id];
    for (const auto& s : acc) m.push_back(s.value() / static_cast<double>(counts[id]));
  }
  return means;
}

namespace {

std::vector<double> tensor_channel_means(std::span<const Tensor> values) {
  const std::size_t c = values.front().channels();
  std::vector<CompensatedSum> acc(c);
  std::uint64_t count = 0;
  for (const auto& t : values) {
    const auto d = t.data();
    for (std::size_t i = 0; i < d.size(); ++i) acc[i % c].add(d[i]);
    count += t.size() / c;
  }
  std::vector<double> m(c);
  for (std::size_t i = 0; i < c; ++i) m[i] = acc[i].value() / static_cast<double>(count);
  return m;
}

}  // namespace

BiasCorrectionResult bias_correct(const Graph& float_graph, const Graph& quant_graph,
                                  std::span<const Tensor> samples, std::size_t count,
                                  std::size_t min_samples) {
  const auto& fn = float_graph.nodes();
  const auto& qn = quant_graph.nodes();
  if (fn.size() != qn.size()) throw EqualizationError("bias correction: graphs differ in node count");
  for (std::size_t i = 0; i < fn.size(); ++i) {
    if (fn[i].id != qn[i].id || fn[i].op != qn[i].op || fn[i].inputs != qn[i].inputs) {
      throw EqualizationError("bias correction: graphs differ at node '" + fn[i].id + "'");
    }
  }
  BiasCorrectionResult result{quant_graph, {}, {}};
  const std::size_t used = std::min(count, samples.size());
  if (used < min_samples) {
    throw EqualizationError("bias correction needs at least " + std::to_string(min_samples) +
                            " samples, got " + std::to_string(used));
  }
  if (used < count) {
    result.diagnostics.push_back("bias correction requested " + std::to_string(count) +
                                 " samples, using " + std::to_string(used));
  }
  const auto batch = samples.first(used);
  const auto float_means = channel_means(float_graph, batch);

  // Node outputs for every sample, released once their last consumer ran.
  std::vector<Node> nodes = qn;
  std::vector<std::vector<Tensor>> values(nodes.size());
  const std::string& input_name = quant_graph.input().name;
  std::vector<std::size_t> pending(nodes.size(), 0);
  for (const auto& node : nodes)
    for (const auto& src : node.inputs)
      if (src != input_name) ++pending[quant_graph.index_of(src)];

  std::vector<Tensor> operands;
  auto evaluate_all = [&](const Node& node) {
    std::vector<Tensor> out(used);
    for (std::size_t s = 0; s < used; ++s) {
      operands.clear();
      for (const auto& src : node.inputs)
        operands.push_back(src == input_name ? batch[s] : values[quant_graph.index_of(src)][s]);
      out[s] = evaluate_node(node, operands);
    }
    return out;
  };

  for (std::size_t i = 0; i < nodes.size(); ++i) {
    Node& node = nodes[i];
    auto out = evaluate_all(node);
    if (is_layer(node.op)) {
      const auto quant_means = tensor_channel_means(out);
      const auto& target = float_means.at(node.id);
      std::vector<double> applied(target.size());
      for (std::size_t c = 0; c < target.size(); ++c) {
        const double before = node.bias[c];
        double corrected = before + (target[c] - quant_means[c]);
        if (node.quant.bias) corrected = quantize_dequantize(corrected, *node.quant.bias);
        node.bias[c] = corrected;
        applied[c] = corrected - before;
      }
      result.corrections.emplace(node.id, std::move(applied));
      out = evaluate_all(node);
    }
    values[i] = std::move(out);
    for (const auto& src : node.inputs) {
      if (src == input_name) continue;
      const std::size_t p = quant_graph.index_of(src);
      if (--pending[p] == 0) values[p].clear();
    }
  }
  result.graph = Graph(quant_graph.input(), std::move(nodes), quant_graph.outputs());
  return result;
}

}  // namespace chaneq
