#pragma once

#include <json.hpp>
#include <span>
#include <string>
#include <vector>

#include "chaneq/equalizer.hpp"
#include "chaneq/graph.hpp"
#include "chaneq/quant.hpp"

namespace chaneq {

using Json = nlohmann::ordered_json;

Json to_json(const QuantSpec& spec);
QuantSpec quant_spec_from_json(const Json& j);

Json to_json(const ActivationStats& stats);
ActivationStats activation_stats_from_json(const Json& j);

/// {"bits": {...}, "sample_count", "input": {...}, "layers": {id: {"activation": {spec,
/// stats}, "weight": spec, "bias": spec}}, "diagnostics": [...]}
Json to_json(const CalibrationRecord& record);
CalibrationRecord calibration_from_json(const Json& j);

Json to_json(std::span<const ScaleVector> scales, const EligibilityReport& report);
std::vector<ScaleVector> scales_from_json(const Json& j);
EligibilityReport eligibility_from_json(const Json& j);

/// Node quant annotations keyed by node id; nodes without any are omitted.
Json quant_annotations_to_json(const Graph& graph);
/// Returns a copy of `graph` with the annotations attached.
Graph attach_quant_annotations(const Graph& graph, const Json& annotations);

std::string dump(const Json& j);
Json read_json_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace chaneq
