#include "chaneq/noise.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "chaneq/numeric.hpp"

namespace chaneq {

double sqnr_linear(double signal, double noise) {
  if (!(signal > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  if (noise == 0.0) return std::numeric_limits<double>::infinity();
  return signal / noise;
}

double to_db(double linear) {
  if (std::isnan(linear)) return linear;
  if (std::isinf(linear)) return linear;
  return 10.0 * std::log10(linear);
}

std::string format_db(double db) {
  if (std::isnan(db)) return "undef";
  if (std::isinf(db)) return db > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", db);
  return buf;
}

namespace {

std::string format_energy(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9e", v);
  return buf;
}

double uniform_noise(const QuantSpec& spec) {
  return spec.degenerate ? 0.0 : spec.scale * spec.scale / 12.0;
}

double sum_squares(std::span<const double> v) {
  CompensatedSum s;
  for (double x : v) s.add(x * x);
  return s.value();
}

}  // namespace

const LayerSqnr& SqnrReport::at(const std::string& id) const {
  for (const auto& l : layers)
    if (l.layer_id == id) return l;
  throw NoiseError("layer '" + id + "' not in report");
}

std::vector<NoisePrediction> predict_noise(const Graph& graph, const CalibrationRecord& calib) {
  const auto& nodes = graph.nodes();
  const std::string& input_name = graph.input().name;
  if (calib.input.elements_per_channel == 0) {
    throw NoiseError("calibration lacks input energy statistics; re-run calibrate");
  }
  // Post-activation noise energy per channel, for each node.
  std::vector<std::vector<double>> ch_w(nodes.size()), ch_a(nodes.size());
  auto incoming = [&](const std::string& src, bool weights) {
    if (src == input_name) return std::vector<double>(graph.input().channels, 0.0);
    const std::size_t k = graph.index_of(src);
    return weights ? ch_w[k] : ch_a[k];
  };

  // Spatial extent of every node output.
  std::vector<std::pair<std::size_t, std::size_t>> extent(nodes.size());
  auto extent_of = [&](const std::string& src) {
    return src == input_name ? std::pair{graph.input().height, graph.input().width}
                             : extent[graph.index_of(src)];
  };

  std::vector<NoisePrediction> out(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    extent[i] = extent_of(n.inputs.front());
    auto it = calib.layers.find(n.id);
    if (it == calib.layers.end()) throw NoiseError("no calibration for layer '" + n.id + "'");
    const LayerCalibration& lc = it->second;
    const ActivationStats& y = lc.activation;
    if (y.elements_per_channel == 0) {
      throw NoiseError("calibration of '" + n.id + "' lacks energy statistics; re-run calibrate");
    }
    const std::size_t c_out = graph.out_channels(n.id);
    std::vector<double> pre_w(c_out, 0.0), pre_a(c_out, 0.0);

    if (is_layer(n.op)) {
      const std::string& src = n.inputs.front();
      const ActivationStats& x = src == input_name ? calib.input : calib.at(src).activation;
      if (!lc.weight_spec) throw NoiseError("no weight calibration for layer '" + n.id + "'");
      const double dw2 = uniform_noise(*lc.weight_spec);
      // K^2 counts only taps inside the input; zero padding contributes no noise.
      const auto [h, w] = extent[i];
      const double k2 = mean_valid_taps(h, n.kernel_height(), n.stride.h, n.padding) *
                        mean_valid_taps(w, n.kernel_width(), n.stride.w, n.padding);
      const double tap_share = k2 / static_cast<double>(n.kernel_height() * n.kernel_width());
      extent[i] = {conv_output_extent(h, n.kernel_height(), n.stride.h, n.padding),
                   conv_output_extent(w, n.kernel_width(), n.stride.w, n.padding)};
      const auto in_w = incoming(src, true), in_a = incoming(src, false);
      const bool dw = n.op == OpKind::DepthwiseConv;
      const std::size_t c_in = dw ? c_out : n.kernel.dim(2);
      double x_energy = 0.0;
      for (std::size_t ch = 0; ch < c_in; ++ch) x_energy += x.channel_mean_square(ch);
      const auto d = n.kernel.data();
      // Kernel index k maps to (tap, input channel, output channel) with the
      // output channel innermost; depthwise kernels have one input per output.
      for (std::size_t k = 0; k < d.size(); ++k) {
        const std::size_t o = k % c_out;
        const std::size_t in = dw ? o : (k / c_out) % c_in;
        const double w2 = d[k] * d[k] * tap_share;
        pre_w[o] += w2 * in_w[in];
        pre_a[o] += w2 * in_a[in];
      }
      for (std::size_t o = 0; o < c_out; ++o)
        pre_w[o] += k2 * (dw ? x.channel_mean_square(o) : x_energy) * dw2;
    } else if (n.op == OpKind::Add) {
      for (const auto& src : n.inputs) {
        const auto in_w = incoming(src, true), in_a = incoming(src, false);
        for (std::size_t o = 0; o < c_out; ++o) {
          pre_w[o] += in_w[o];
          pre_a[o] += in_a[o];
        }
      }
    } else if (n.op == OpKind::Concat) {
      std::size_t o = 0;
      for (const auto& src : n.inputs) {
        const auto in_w = incoming(src, true), in_a = incoming(src, false);
        for (std::size_t ch = 0; ch < in_w.size(); ++ch, ++o) {
          pre_w[o] = in_w[ch];
          pre_a[o] = in_a[ch];
        }
      }
    } else {
      throw NoiseError("node '" + n.id + "' is an unfolded batch_norm");
    }

    const double da2 = uniform_noise(lc.activation_spec);
    ch_w[i].resize(c_out);
    ch_a[i].resize(c_out);
    CompensatedSum total_w, total_a;
    for (std::size_t o = 0; o < c_out; ++o) {
      ch_w[i][o] = y.gain(o) * pre_w[o];
      ch_a[i][o] = y.gain(o) * pre_a[o] + y.nonzero_fraction(o) * da2;
      total_w.add(ch_w[i][o]);
      total_a.add(ch_a[i][o]);
    }
    out[i] = {n.id, i, y.mean_square(), total_w.value() / static_cast<double>(c_out),
              total_a.value() / static_cast<double>(c_out)};
  }
  return out;
}

namespace {

// Plain per-sample sums; merged across samples with compensation.
struct SampleEnergies {
  std::vector<double> signal, noise_w, noise_a, noise_full;
  std::vector<std::uint64_t> count;
  double out_signal = 0.0, out_w = 0.0, out_a = 0.0, out_full = 0.0;
  std::uint64_t out_count = 0;
};

void squared_error(const Tensor& f, const Tensor& q, double& noise) {
  const auto a = f.data();
  const auto b = q.data();
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = b[k] - a[k];
    noise += d * d;
  }
}

SampleEnergies sample_energies(const Graph& fg, const Graph& qw, const Graph& qa, const Graph& qf,
                               const Tensor& sample) {
  const auto rf = execute(fg, sample, TapRequest::all());
  const auto rw = execute(qw, sample, TapRequest::all());
  const auto ra = execute(qa, sample, TapRequest::all());
  const auto rq = execute(qf, sample, TapRequest::all());
  const auto& nodes = fg.nodes();
  SampleEnergies e;
  e.signal.assign(nodes.size(), 0.0);
  e.noise_w.assign(nodes.size(), 0.0);
  e.noise_a.assign(nodes.size(), 0.0);
  e.noise_full.assign(nodes.size(), 0.0);
  e.count.assign(nodes.size(), 0);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& id = nodes[i].id;
    const Tensor& f = rf.taps.at(id);
    for (double v : f.data()) e.signal[i] += v * v;
    squared_error(f, rw.taps.at(id), e.noise_w[i]);
    squared_error(f, ra.taps.at(id), e.noise_a[i]);
    squared_error(f, rq.taps.at(id), e.noise_full[i]);
    e.count[i] = f.size();
  }
  for (std::size_t o = 0; o < rf.outputs.size(); ++o) {
    for (double v : rf.outputs[o].data()) e.out_signal += v * v;
    squared_error(rf.outputs[o], rw.outputs[o], e.out_w);
    squared_error(rf.outputs[o], ra.outputs[o], e.out_a);
    squared_error(rf.outputs[o], rq.outputs[o], e.out_full);
    e.out_count += rf.outputs[o].size();
  }
  return e;
}

}  // namespace

SqnrReport measure_sqnr(const Graph& float_graph, const CalibrationRecord& calib,
                        std::span<const Tensor> samples, std::size_t threads,
                        const Graph* full_override) {
  if (samples.empty()) throw NoiseError("no samples to measure SQNR on");
  const Graph qw = quantize_graph(float_graph, calib, QuantMode::WeightsOnly);
  const Graph qa = quantize_graph(float_graph, calib, QuantMode::ActivationsOnly);
  const Graph qf = full_override ? *full_override : quantize_graph(float_graph, calib, QuantMode::Full);

  std::vector<SampleEnergies> per(samples.size());
  threads = std::max<std::size_t>(1, std::min(threads, samples.size()));
  if (threads == 1) {
    for (std::size_t s = 0; s < samples.size(); ++s)
      per[s] = sample_energies(float_graph, qw, qa, qf, samples[s]);
  } else {
    std::vector<std::thread> workers;
    for (std::size_t t = 0; t < threads; ++t) {
      workers.emplace_back([&, t] {
        for (std::size_t s = t; s < samples.size(); s += threads)
          per[s] = sample_energies(float_graph, qw, qa, qf, samples[s]);
      });
    }
    for (auto& w : workers) w.join();
  }

  const auto& nodes = float_graph.nodes();
  const std::size_t n = nodes.size();
  std::vector<CompensatedSum> sig(n), nw(n), na(n), nf(n);
  std::vector<std::uint64_t> count(n, 0);
  CompensatedSum os, ow, oa, of;
  std::uint64_t out_count = 0;
  for (const auto& e : per) {
    for (std::size_t i = 0; i < n; ++i) {
      sig[i].add(e.signal[i]);
      nw[i].add(e.noise_w[i]);
      na[i].add(e.noise_a[i]);
      nf[i].add(e.noise_full[i]);
      count[i] += e.count[i];
    }
    os.add(e.out_signal);
    ow.add(e.out_w);
    oa.add(e.out_a);
    of.add(e.out_full);
    out_count += e.out_count;
  }

  const auto predicted = predict_noise(float_graph, calib);
  SqnrReport report;
  report.sample_count = samples.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double c = static_cast<double>(count[i]);
    LayerSqnr l;
    l.layer_id = nodes[i].id;
    l.topo_index = i;
    l.signal = sig[i].value() / c;
    l.noise_w = nw[i].value() / c;
    l.noise_a = na[i].value() / c;
    l.noise_full = nf[i].value() / c;
    l.pred_signal = predicted[i].signal;
    l.pred_noise_w = predicted[i].noise_w;
    l.pred_noise_a = predicted[i].noise_a;
    report.layers.push_back(std::move(l));
  }
  const double oc = static_cast<double>(out_count);
  report.output_signal = os.value() / oc;
  report.output_mse_w = ow.value() / oc;
  report.output_mse_a = oa.value() / oc;
  report.output_mse_full = of.value() / oc;
  return report;
}

std::string sqnr_csv(const SqnrReport& report, const std::optional<std::string>& timestamp) {
  std::ostringstream os;
  os << "# " << kSqnrEstimator << "; samples=" << report.sample_count;
  if (timestamp) os << "; generated=" << *timestamp;
  os << '\n';
  os << "layer_id,topo_index,signal_energy,noise_w,noise_a,noise_full,sqnr_w_db,sqnr_a_db,"
        "sqnr_full_db,pred_sqnr_w_db,pred_sqnr_a_db\n";
  for (const auto& l : report.layers) {
    os << l.layer_id << ',' << l.topo_index << ',' << format_energy(l.signal) << ','
       << format_energy(l.noise_w) << ',' << format_energy(l.noise_a) << ','
       << format_energy(l.noise_full) << ',' << format_db(l.sqnr_w_db()) << ','
       << format_db(l.sqnr_a_db()) << ',' << format_db(l.sqnr_full_db()) << ','
       << format_db(l.pred_sqnr_w_db()) << ',' << format_db(l.pred_sqnr_a_db()) << '\n';
  }
  return os.str();
}

std::vector<OeLayer> optimal_equalization_bound(const Graph& graph, const CalibrationRecord& calib,
                                                OeTarget target) {
  std::vector<OeLayer> out;
  const auto& nodes = graph.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    std::vector<double> extremum, energy;
    double elements = 0.0;
    double noise_per_element = 0.0;
    const LayerCalibration& lc = calib.at(n.id);
    if (target == OeTarget::Weights) {
      if (!is_layer(n.op)) continue;
      if (!lc.weight_spec) throw NoiseError("no weight calibration for layer '" + n.id + "'");
      const std::size_t c = n.layer_out_channels();
      extremum.assign(c, 0.0);
      energy.assign(c, 0.0);
      const auto d = n.kernel.data();
      // Output channel is the innermost axis for both kernel layouts.
      for (std::size_t k = 0; k < d.size(); ++k) {
        const std::size_t ch = k % c;
        extremum[ch] = std::max(extremum[ch], std::abs(d[k]));
        energy[ch] += d[k] * d[k];
      }
      elements = static_cast<double>(d.size());
      noise_per_element = uniform_noise(*lc.weight_spec);
    } else {
      if (lc.activation.elements_per_channel == 0)
        throw NoiseError("calibration of '" + n.id + "' lacks energy statistics");
      extremum = lc.activation.ch_abs_max();
      energy = lc.activation.ch_sumsq;
      elements = static_cast<double>(lc.activation.elements_per_channel) *
                 static_cast<double>(energy.size());
      noise_per_element = uniform_noise(lc.activation_spec);
    }
    const double top = *std::max_element(extremum.begin(), extremum.end());
    CompensatedSum now, ideal;
    for (std::size_t ch = 0; ch < extremum.size(); ++ch) {
      now.add(energy[ch]);
      if (extremum[ch] > 0.0) {
        const double r = top / extremum[ch];
        ideal.add(r * r * energy[ch]);
      }
    }
    const double noise = elements * noise_per_element;
    out.push_back({n.id, i, to_db(sqnr_linear(now.value(), noise)),
                   to_db(sqnr_linear(ideal.value(), noise))});
  }
  return out;
}

std::string oe_csv(std::span<const OeLayer> weights, std::span<const OeLayer> activations) {
  std::ostringstream os;
  os << "layer_id,topo_index,target,current_db,optimal_db\n";
  for (const auto& l : weights)
    os << l.layer_id << ',' << l.topo_index << ",weights," << format_db(l.current_db) << ','
       << format_db(l.optimal_db) << '\n';
  for (const auto& l : activations)
    os << l.layer_id << ',' << l.topo_index << ",activations," << format_db(l.current_db) << ','
       << format_db(l.optimal_db) << '\n';
  return os.str();
}

RunSort run_sort_from_string(const std::string& name) {
  if (name == "by-first-run") return RunSort::ByFirstRun;
  if (name == "per-run") return RunSort::PerRun;
  throw NoiseError("unknown sort '" + name + "'");
}

SortKey sort_key_from_string(const std::string& name) {
  if (name == "weights" || name == "w") return SortKey::Weights;
  if (name == "activations" || name == "a") return SortKey::Activations;
  if (name == "full") return SortKey::Full;
  throw NoiseError("unknown sort key '" + name + "'");
}

namespace {

double key_db(const LayerSqnr& l, SortKey key) {
  switch (key) {
    case SortKey::Weights: return l.sqnr_w_db();
    case SortKey::Activations: return l.sqnr_a_db();
    case SortKey::Full: return l.sqnr_full_db();
  }
  return l.sqnr_a_db();
}

// Descending, +inf first, undefined last, ties by topological index.
std::vector<std::size_t> sorted_rows(const SqnrReport& r, SortKey key) {
  std::vector<std::size_t> idx(r.layers.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const double x = key_db(r.layers[a], key), y = key_db(r.layers[b], key);
    if (std::isnan(x) || std::isnan(y)) return !std::isnan(x) && std::isnan(y);
    return x > y;
  });
  return idx;
}

void write_triplet(std::ostream& os, const LayerSqnr& l) {
  os << ',' << format_db(l.sqnr_w_db()) << ',' << format_db(l.sqnr_a_db()) << ','
     << format_db(l.sqnr_full_db());
}

}  // namespace

std::string compare_runs(std::span<const SqnrReport> reports, std::span<const std::string> names,
                         RunSort sort, SortKey key) {
  if (reports.empty()) throw NoiseError("no reports to compare");
  if (names.size() != reports.size()) throw NoiseError("one name per report required");
  auto layer_set = [](const SqnrReport& r) {
    std::set<std::string> s;
    for (const auto& l : r.layers) s.insert(l.layer_id);
    return s;
  };
  const auto reference = layer_set(reports[0]);
  for (std::size_t k = 1; k < reports.size(); ++k) {
    if (layer_set(reports[k]) != reference || reports[k].layers.size() != reports[0].layers.size()) {
      throw NoiseError("report '" + names[k] + "' covers a different layer set than '" + names[0] + "'");
    }
  }

  std::ostringstream os;
  os << "rank";
  if (sort == RunSort::ByFirstRun) os << ",layer_id";
  for (const auto& name : names) {
    if (sort == RunSort::PerRun) os << ',' << name << "_layer_id";
    os << ',' << name << "_sqnr_w_db," << name << "_sqnr_a_db," << name << "_sqnr_full_db";
  }
  os << '\n';

  const std::size_t rows = reports[0].layers.size();
  if (sort == RunSort::ByFirstRun) {
    const auto order = sorted_rows(reports[0], key);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto& id = reports[0].layers[order[r]].layer_id;
      os << r << ',' << id;
      for (const auto& rep : reports) write_triplet(os, rep.at(id));
      os << '\n';
    }
  } else {
    std::vector<std::vector<std::size_t>> orders;
    for (const auto& rep : reports) orders.push_back(sorted_rows(rep, key));
    for (std::size_t r = 0; r < rows; ++r) {
      os << r;
      for (std::size_t k = 0; k < reports.size(); ++k) {
        const auto& l = reports[k].layers[orders[k][r]];
        os << ',' << l.layer_id;
        write_triplet(os, l);
      }
      os << '\n';
    }
  }
  return os.str();
}

double mean_finite_db(const SqnrReport& report, SortKey key) {
  CompensatedSum sum;
  std::size_t n = 0;
  for (const auto& l : report.layers) {
    const double v = key_db(l, key);
    if (std::isfinite(v)) {
      sum.add(v);
      ++n;
    }
  }
  return n ? sum.value() / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace chaneq
