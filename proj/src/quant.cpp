#include "chaneq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "chaneq/graph.hpp"

namespace chaneq {

QuantSpec QuantSpec::symmetric(double max_abs, int bits) {
  QuantSpec s;
  s.bits = bits;
  s.is_signed = true;
  s.zero_point = 0;
  max_abs = std::abs(max_abs);
  if (max_abs == 0.0) {
    s.min = s.max = 0.0;
    s.scale = 1.0;
    s.degenerate = true;
    return s;
  }
  s.min = -max_abs;
  s.max = max_abs;
  s.scale = (s.max - s.min) / std::ldexp(1.0, bits);
  return s;
}

QuantSpec QuantSpec::affine(double min, double max, int bits) {
  QuantSpec s;
  s.bits = bits;
  s.is_signed = false;
  s.min = std::min(min, 0.0);
  s.max = std::max(max, 0.0);
  if (s.max == s.min) {
    s.scale = 1.0;
    s.zero_point = 0;
    s.degenerate = true;
    return s;
  }
  s.scale = (s.max - s.min) / std::ldexp(1.0, bits);
  s.zero_point = static_cast<std::int64_t>(std::nearbyint(-s.min / s.scale));
  return s;
}

QuantSpec QuantSpec::symmetric_with_scale(double scale, int bits) {
  if (!(scale > 0.0)) throw QuantError("quantization scale must be positive");
  QuantSpec s;
  s.bits = bits;
  s.is_signed = true;
  s.scale = scale;
  s.max = scale * std::ldexp(1.0, bits - 1);
  s.min = -s.max;
  return s;
}

double quantize_dequantize(double x, const QuantSpec& spec) {
  if (!std::isfinite(x)) throw QuantError("cannot quantize non-finite value");
  if (!(spec.scale > 0.0)) throw QuantError("quantization scale must be positive");
  const double clamped = std::clamp(x, spec.min, spec.max);
  // nearbyint uses the current rounding mode: round-half-to-even by default.
  const double q = std::nearbyint(clamped / spec.scale);
  return spec.scale * q;
}

Tensor quantize_dequantize(const Tensor& x, const QuantSpec& spec) {
  Tensor out = x;
  for (auto& v : out.data()) v = quantize_dequantize(v, spec);
  return out;
}

double ActivationStats::min() const {
  return ch_min.empty() ? 0.0 : *std::min_element(ch_min.begin(), ch_min.end());
}

double ActivationStats::max() const {
  return ch_max.empty() ? 0.0 : *std::max_element(ch_max.begin(), ch_max.end());
}

std::vector<double> ActivationStats::ch_abs_max() const {
  std::vector<double> out(ch_max.size());
  for (std::size_t c = 0; c < out.size(); ++c)
    out[c] = std::max(std::abs(ch_min[c]), std::abs(ch_max[c]));
  return out;
}

double ActivationStats::mean_square() const {
  if (elements_per_channel == 0 || ch_sumsq.empty()) return 0.0;
  double total = 0.0;
  for (double e : ch_sumsq) total += e;
  return total / (static_cast<double>(elements_per_channel) * static_cast<double>(ch_sumsq.size()));
}

double ActivationStats::channel_mean_square(std::size_t c) const {
  if (elements_per_channel == 0 || ch_sumsq.empty()) return 0.0;
  return ch_sumsq[c] / static_cast<double>(elements_per_channel);
}

const LayerCalibration& CalibrationRecord::at(const std::string& id) const {
  auto it = layers.find(id);
  if (it == layers.end()) throw QuantError("no calibration for layer '" + id + "'");
  return it->second;
}

const char* to_string(QuantMode mode) {
  switch (mode) {
    case QuantMode::WeightsOnly: return "weights-only";
    case QuantMode::ActivationsOnly: return "activations-only";
    case QuantMode::Full: return "full";
  }
  return "?";
}

QuantMode quant_mode_from_string(const std::string& name) {
  if (name == "weights-only") return QuantMode::WeightsOnly;
  if (name == "activations-only") return QuantMode::ActivationsOnly;
  if (name == "full") return QuantMode::Full;
  throw QuantError("unknown quantization mode '" + name + "'");
}

namespace {

// Raw accumulators for one tensor over one or more samples.
struct StatAccumulator {
  std::vector<double> ch_min, ch_max, ch_sumsq;
  std::uint64_t per_channel = 0;
  std::vector<std::uint64_t> nonzero;
  std::vector<double> gain_sum;

  void observe(const Tensor& t, const Activation& act) {
    const auto stats = channel_stats(t);
    const std::size_t c = stats.size();
    if (ch_min.empty()) {
      ch_min.resize(c);
      ch_max.resize(c);
      ch_sumsq.assign(c, 0.0);
      nonzero.assign(c, 0);
      gain_sum.assign(c, 0.0);
      for (std::size_t i = 0; i < c; ++i) {
        ch_min[i] = stats[i].min;
        ch_max[i] = stats[i].max;
      }
    }
    for (std::size_t i = 0; i < c; ++i) {
      ch_min[i] = std::min(ch_min[i], stats[i].min);
      ch_max[i] = std::max(ch_max[i], stats[i].max);
      ch_sumsq[i] += stats[i].energy;
    }
    per_channel += t.size() / c;
    const auto d = t.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double y = d[i];
      if (y != 0.0) ++nonzero[i % c];
      gain_sum[i % c] += slope_squared(y, act, i % c);
    }
  }

  static double slope_squared(double y, const Activation& act, std::size_t ch) {
    switch (act.kind) {
      case ActivationKind::Linear: return 1.0;
      case ActivationKind::ReLU: return y > 0.0 ? 1.0 : 0.0;
      case ActivationKind::ReLU6: return (y > 0.0 && y < kRelu6Ceiling) ? 1.0 : 0.0;
      case ActivationKind::PReLU: {
        if (y >= 0.0) return 1.0;
        const double s = act.slopes.size() == 1 ? act.slopes[0] : act.slopes[ch];
        return s * s;
      }
    }
    return 1.0;
  }

  void merge(const StatAccumulator& o) {
    if (o.ch_min.empty()) return;
    if (ch_min.empty()) {
      *this = o;
      return;
    }
    for (std::size_t i = 0; i < ch_min.size(); ++i) {
      ch_min[i] = std::min(ch_min[i], o.ch_min[i]);
      ch_max[i] = std::max(ch_max[i], o.ch_max[i]);
      ch_sumsq[i] += o.ch_sumsq[i];
      nonzero[i] += o.nonzero[i];
      gain_sum[i] += o.gain_sum[i];
    }
    per_channel += o.per_channel;
  }

  ActivationStats finish() const {
    ActivationStats s;
    s.ch_min = ch_min;
    s.ch_max = ch_max;
    s.ch_sumsq = ch_sumsq;
    s.elements_per_channel = per_channel;
    if (per_channel > 0) {
      const double n = static_cast<double>(per_channel);
      for (std::size_t i = 0; i < ch_min.size(); ++i) {
        s.ch_nonzero.push_back(static_cast<double>(nonzero[i]) / n);
        s.ch_gain.push_back(gain_sum[i] / n);
      }
    }
    return s;
  }
};

struct SampleStats {
  StatAccumulator input;
  std::vector<StatAccumulator> nodes;
};

SampleStats observe_sample(const Graph& graph, const Tensor& sample) {
  SampleStats s;
  s.input.observe(sample, Activation::linear());
  const auto result = execute(graph, sample, TapRequest::all());
  const auto& nodes = graph.nodes();
  s.nodes.resize(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i)
    s.nodes[i].observe(result.taps.at(nodes[i].id), nodes[i].activation);
  return s;
}

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace

CalibrationRecord calibrate(const Graph& graph, std::span<const Tensor> samples, std::size_t count,
                            BitWidths bits, std::size_t threads) {
  if (count == 0) throw QuantError("calibration count must be at least 1");
  if (samples.empty()) throw QuantError("calibration sample stream is empty");
  CalibrationRecord record;
  record.bits = bits;
  std::size_t used = count;
  if (samples.size() < count) {
    used = samples.size();
    record.diagnostics.push_back("calibration requested " + std::to_string(count) +
                                 " samples, stream provided " + std::to_string(used));
  }

  std::vector<SampleStats> per_sample(used);
  threads = std::max<std::size_t>(1, std::min(threads, used));
  if (threads == 1) {
    for (std::size_t i = 0; i < used; ++i) per_sample[i] = observe_sample(graph, samples[i]);
  } else {
    std::vector<std::thread> workers;
    for (std::size_t t = 0; t < threads; ++t) {
      workers.emplace_back([&, t] {
        for (std::size_t i = t; i < used; i += threads)
          per_sample[i] = observe_sample(graph, samples[i]);
      });
    }
    for (auto& w : workers) w.join();
  }

  // Merge in sample order so the result does not depend on the thread count.
  SampleStats total = std::move(per_sample[0]);
  for (std::size_t i = 1; i < used; ++i) {
    total.input.merge(per_sample[i].input);
    for (std::size_t n = 0; n < total.nodes.size(); ++n) total.nodes[n].merge(per_sample[i].nodes[n]);
  }

  record.sample_count = used;
  record.input = total.input.finish();
  const auto& nodes = graph.nodes();
  for (std::size_t n = 0; n < nodes.size(); ++n) {
    LayerCalibration lc;
    lc.activation = total.nodes[n].finish();
    record.layers.emplace(nodes[n].id, std::move(lc));
  }
  refresh_specs(record, graph);
  return record;
}

void refresh_specs(CalibrationRecord& record, const Graph& graph) {
  const BitWidths bits = record.bits;
  record.input_spec = QuantSpec::affine(record.input.min(), record.input.max(), bits.activations);
  auto note = [&](const std::string& msg) {
    if (std::find(record.diagnostics.begin(), record.diagnostics.end(), msg) ==
        record.diagnostics.end())
      record.diagnostics.push_back(msg);
  };
  if (record.input_spec.degenerate) note("degenerate input range; scale forced to 1");

  for (const auto& node : graph.nodes()) {
    auto it = record.layers.find(node.id);
    if (it == record.layers.end()) continue;
    LayerCalibration& lc = it->second;
    lc.activation_spec =
        QuantSpec::affine(lc.activation.min(), lc.activation.max(), bits.activations);
    if (lc.activation_spec.degenerate)
      note("degenerate activation range at '" + node.id + "'; scale forced to 1");
    if (!is_layer(node.op)) {
      lc.weight_spec.reset();
      lc.bias_spec.reset();
      continue;
    }
    lc.weight_spec = QuantSpec::symmetric(max_abs(node.kernel.data()), bits.weights);
    if (lc.weight_spec->degenerate) note("all-zero kernel at '" + node.id + "'; scale forced to 1");

    const std::string& src = node.inputs.front();
    const QuantSpec& in_spec =
        src == graph.input().name ? record.input_spec : record.at(src).activation_spec;
    double bias_scale = in_spec.scale * lc.weight_spec->scale;
    const double bias_peak = max_abs(node.bias.data());
    const double capacity = std::ldexp(1.0, bits.bias - 1);
    if (bias_peak > bias_scale * capacity) {
      bias_scale = bias_peak / capacity;
      note("bias range of '" + node.id + "' exceeds " + std::to_string(bits.bias) +
           "-bit grid at input*weight scale; bias scale widened");
    }
    lc.bias_spec = QuantSpec::symmetric_with_scale(bias_scale, bits.bias);
  }
}

CalibrationRecord with_bits(const CalibrationRecord& record, const Graph& graph, BitWidths bits) {
  CalibrationRecord out = record;
  out.bits = bits;
  out.diagnostics.clear();
  refresh_specs(out, graph);
  return out;
}

Graph quantize_graph(const Graph& graph, const CalibrationRecord& calib, QuantMode mode) {
  const bool weights = mode != QuantMode::ActivationsOnly;
  const bool activations = mode != QuantMode::WeightsOnly;
  std::vector<Node> nodes = graph.nodes();
  for (auto& node : nodes) {
    if (node.op == OpKind::BatchNorm) {
      throw QuantError("node '" + node.id + "' is an unfolded batch_norm; fold before quantizing");
    }
    auto it = calib.layers.find(node.id);
    if (it == calib.layers.end()) throw QuantError("no calibration for layer '" + node.id + "'");
    const LayerCalibration& lc = it->second;
    node.quant = {};
    if (weights && is_layer(node.op)) {
      if (!lc.weight_spec || !lc.bias_spec)
        throw QuantError("no weight calibration for layer '" + node.id + "'");
      node.kernel = quantize_dequantize(node.kernel, *lc.weight_spec);
      node.bias = quantize_dequantize(node.bias, *lc.bias_spec);
      node.quant.weight = lc.weight_spec;
      node.quant.bias = lc.bias_spec;
    }
    if (activations) node.quant.activation = lc.activation_spec;
  }
  return Graph(graph.input(), std::move(nodes), graph.outputs());
}

}  // namespace chaneq
