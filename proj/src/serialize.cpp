#include "chaneq/serialize.hpp"

#include <fstream>
#include <sstream>

namespace chaneq {

Json to_json(const QuantSpec& spec) {
  return Json{{"min", spec.min},
              {"max", spec.max},
              {"bits", spec.bits},
              {"signed", spec.is_signed},
              {"scale", spec.scale},
              {"zero_point", spec.zero_point},
              {"degenerate", spec.degenerate}};
}

QuantSpec quant_spec_from_json(const Json& j) {
  QuantSpec s;
  s.min = j.at("min").get<double>();
  s.max = j.at("max").get<double>();
  s.bits = j.at("bits").get<int>();
  s.is_signed = j.at("signed").get<bool>();
  s.scale = j.at("scale").get<double>();
  s.zero_point = j.at("zero_point").get<std::int64_t>();
  s.degenerate = j.value("degenerate", false);
  return s;
}

Json to_json(const ActivationStats& stats) {
  return Json{{"ch_min", stats.ch_min},
              {"ch_max", stats.ch_max},
              {"ch_sumsq", stats.ch_sumsq},
              {"elements_per_channel", stats.elements_per_channel},
              {"ch_nonzero", stats.ch_nonzero},
              {"ch_gain", stats.ch_gain}};
}

ActivationStats activation_stats_from_json(const Json& j) {
  ActivationStats s;
  s.ch_min = j.at("ch_min").get<std::vector<double>>();
  s.ch_max = j.at("ch_max").get<std::vector<double>>();
  s.ch_sumsq = j.value("ch_sumsq", std::vector<double>{});
  s.elements_per_channel = j.value("elements_per_channel", std::uint64_t{0});
  s.ch_nonzero = j.value("ch_nonzero", std::vector<double>{});
  s.ch_gain = j.value("ch_gain", std::vector<double>{});
  return s;
}

Json to_json(const CalibrationRecord& record) {
  Json layers = Json::object();
  for (const auto& [id, lc] : record.layers) {
    Json entry{{"activation", {{"spec", to_json(lc.activation_spec)}, {"stats", to_json(lc.activation)}}}};
    if (lc.weight_spec) entry["weight"] = to_json(*lc.weight_spec);
    if (lc.bias_spec) entry["bias"] = to_json(*lc.bias_spec);
    layers[id] = std::move(entry);
  }
  return Json{{"bits",
               {{"weights", record.bits.weights},
                {"activations", record.bits.activations},
                {"bias", record.bits.bias}}},
              {"sample_count", record.sample_count},
              {"input", {{"spec", to_json(record.input_spec)}, {"stats", to_json(record.input)}}},
              {"layers", std::move(layers)},
              {"diagnostics", record.diagnostics}};
}

CalibrationRecord calibration_from_json(const Json& j) {
  CalibrationRecord r;
  const auto& b = j.at("bits");
  r.bits = {b.at("weights").get<int>(), b.at("activations").get<int>(), b.at("bias").get<int>()};
  r.sample_count = j.at("sample_count").get<std::size_t>();
  r.input_spec = quant_spec_from_json(j.at("input").at("spec"));
  r.input = activation_stats_from_json(j.at("input").at("stats"));
  for (const auto& [id, entry] : j.at("layers").items()) {
    LayerCalibration lc;
    lc.activation_spec = quant_spec_from_json(entry.at("activation").at("spec"));
    lc.activation = activation_stats_from_json(entry.at("activation").at("stats"));
    if (entry.contains("weight")) lc.weight_spec = quant_spec_from_json(entry.at("weight"));
    if (entry.contains("bias")) lc.bias_spec = quant_spec_from_json(entry.at("bias"));
    r.layers.emplace(id, std::move(lc));
  }
  r.diagnostics = j.value("diagnostics", std::vector<std::string>{});
  return r;
}

Json to_json(std::span<const ScaleVector> scales, const EligibilityReport& report) {
  Json layers = Json::array();
  for (const auto& sv : scales) {
    Json entry{{"id", sv.layer_id}, {"s_max", sv.s_max}, {"factors", sv.factors}};
    const auto& e = report.at(sv.layer_id);
    entry["skipped"] = e.skipped ? Json(to_string(*e.skipped)) : Json(nullptr);
    layers.push_back(std::move(entry));
  }
  return Json{{"layers", std::move(layers)}};
}

std::vector<ScaleVector> scales_from_json(const Json& j) {
  std::vector<ScaleVector> out;
  for (const auto& e : j.at("layers")) {
    out.push_back({e.at("id").get<std::string>(), e.at("factors").get<std::vector<double>>(),
                   e.at("s_max").get<double>()});
  }
  return out;
}

EligibilityReport eligibility_from_json(const Json& j) {
  EligibilityReport r;
  for (const auto& e : j.at("layers")) {
    LayerEligibility le{e.at("id").get<std::string>(), std::nullopt};
    if (!e.at("skipped").is_null())
      le.skipped = skip_reason_from_string(e.at("skipped").get<std::string>());
    r.layers.push_back(std::move(le));
  }
  return r;
}

Json quant_annotations_to_json(const Graph& graph) {
  Json out = Json::object();
  for (const auto& n : graph.nodes()) {
    if (n.quant.empty()) continue;
    Json entry = Json::object();
    if (n.quant.weight) entry["weight"] = to_json(*n.quant.weight);
    if (n.quant.bias) entry["bias"] = to_json(*n.quant.bias);
    if (n.quant.activation) entry["activation"] = to_json(*n.quant.activation);
    out[n.id] = std::move(entry);
  }
  return out;
}

Graph attach_quant_annotations(const Graph& graph, const Json& annotations) {
  std::vector<Node> nodes = graph.nodes();
  for (const auto& [id, entry] : annotations.items()) {
    if (!graph.contains(id)) throw GraphError("annotation for unknown node '" + id + "'");
    NodeQuant& q = nodes[graph.index_of(id)].quant;
    if (entry.contains("weight")) q.weight = quant_spec_from_json(entry.at("weight"));
    if (entry.contains("bias")) q.bias = quant_spec_from_json(entry.at("bias"));
    if (entry.contains("activation")) q.activation = quant_spec_from_json(entry.at("activation"));
  }
  return Graph(graph.input(), std::move(nodes), graph.outputs());
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw std::runtime_error("'" + path + "' is not valid JSON: " + e.what());
  }
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

}  // namespace chaneq
