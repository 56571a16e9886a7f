#include "chaneq/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <limits>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace chaneq {

namespace fs = std::filesystem;

const char* to_string(EqualizationMode mode) {
  switch (mode) {
    case EqualizationMode::None: return "none";
    case EqualizationMode::OneStep: return "one-step";
    case EqualizationMode::TwoStep: return "two-step";
    case EqualizationMode::TwoStepMobileNet: return "two-step-mobilenet";
  }
  return "none";
}

EqualizationMode equalization_mode_from_string(const std::string& name) {
  if (name == "none") return EqualizationMode::None;
  if (name == "one-step") return EqualizationMode::OneStep;
  if (name == "two-step") return EqualizationMode::TwoStep;
  if (name == "two-step-mobilenet") return EqualizationMode::TwoStepMobileNet;
  throw ConfigError("unknown equalization mode '" + name + "'");
}

void validate(const PipelineConfig& c) {
  auto bits_ok = [](int b) { return b >= 2 && b <= 24; };
  if (c.calibration_count < 1) throw ConfigError("calibration count must be >= 1");
  if (c.bias_correction_count < 1) throw ConfigError("bias correction count must be >= 1");
  if (!bits_ok(c.bits.weights) || !bits_ok(c.bits.activations) || !bits_ok(c.bits.bias))
    throw ConfigError("bit widths must lie in [2, 24]");
  if (!(c.s_max >= 1.0)) throw ConfigError("s_max must be >= 1");
  if (!(c.attenuation_floor > 0.0 && c.attenuation_floor <= 1.0))
    throw ConfigError("attenuation floor must lie in (0, 1]");
  if (c.threads < 1) throw ConfigError("threads must be >= 1");
  if (c.fixture) {
    const auto& f = *c.fixture;
    if (f.layers < 2) throw ConfigError("fixture needs at least 2 layers");
    if (f.channels < 2) throw ConfigError("fixture needs at least 2 channels");
    if (!(f.imbalance >= 1.0)) throw ConfigError("fixture imbalance must be >= 1");
    if (!(f.peak > 0.0)) throw ConfigError("fixture peak must be positive");
  }
}

ModelPaths model_paths(const std::string& dir, const std::string& name) {
  return {(fs::path(dir) / (name + ".json")).string(), (fs::path(dir) / (name + ".bin")).string()};
}

std::string default_weights_path(const std::string& manifest) {
  return fs::path(manifest).replace_extension(".bin").string();
}

namespace {

Json fixture_json(const FixtureSpec& f) {
  return Json{{"layers", f.layers},       {"channels", f.channels},
              {"imbalance", f.imbalance}, {"seed", f.seed},
              {"topology", to_string(f.topology)}, {"activation", to_string(f.activation)},
              {"peak", f.peak},           {"height", f.height},
              {"width", f.width},         {"input_channels", f.input_channels}};
}

std::string require_path(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string("missing required option ") + flag);
  return value;
}

void prepare_out_dir(const PipelineConfig& c) {
  std::error_code ec;
  fs::create_directories(c.out_dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory '" + c.out_dir + "': " + ec.message());
}

std::string out_path(const PipelineConfig& c, const std::string& name) {
  return (fs::path(c.out_dir) / name).string();
}

std::optional<std::string> timestamp(const PipelineConfig& c) {
  if (!c.timestamp) return std::nullopt;
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return std::string(buf);
}

CalibrationRecord load_calibration(const PipelineConfig& c, const Graph& graph) {
  CalibrationRecord r = calibration_from_json(read_json_file(require_path(c.calibration, "--calibration")));
  for (const auto& id : layer_ids(graph)) {
    if (!r.layers.count(id)) {
      throw std::runtime_error("calibration '" + c.calibration + "' has no entry for layer '" + id +
                               "'; it belongs to a different model");
    }
  }
  if (!(r.bits == c.bits)) r = with_bits(r, graph, c.bits);
  return r;
}

void save(const Graph& graph, const PipelineConfig& c, const std::string& name, Json sidecar_extra,
          const std::string& source, CommandResult& result) {
  const auto paths = model_paths(c.out_dir, name);
  SaveOptions options;
  options.source = source;
  options.sidecar_extra = std::move(sidecar_extra);
  save_model(graph, paths.manifest, paths.weights, options);
  result.artifacts.push_back(paths.manifest);
  result.artifacts.push_back(paths.weights);
  result.artifacts.push_back(sidecar_path(paths.manifest));
}

void write(const std::string& path, const std::string& text, CommandResult& result) {
  write_text_file(path, text);
  result.artifacts.push_back(path);
}

double additivity_ratio(const SqnrReport& r) {
  const double parts = r.output_mse_w + r.output_mse_a;
  return parts > 0.0 ? r.output_mse_full / parts : std::numeric_limits<double>::quiet_NaN();
}

Json report_summary(const SqnrReport& r) {
  std::size_t agree = 0, defined = 0;
  for (const auto& l : r.layers) {
    for (const auto& [measured, predicted] :
         {std::pair{l.sqnr_w_db(), l.pred_sqnr_w_db()}, std::pair{l.sqnr_a_db(), l.pred_sqnr_a_db()}}) {
      if (!std::isfinite(measured) || !std::isfinite(predicted)) continue;
      ++defined;
      if (std::abs(measured - predicted) <= 3.0) ++agree;
    }
  }
  return Json{{"samples", r.sample_count},
              {"output_signal", r.output_signal},
              {"output_mse", {{"weights", r.output_mse_w}, {"activations", r.output_mse_a}, {"full", r.output_mse_full}}},
              {"mean_sqnr_db",
               {{"weights", mean_finite_db(r, SortKey::Weights)},
                {"activations", mean_finite_db(r, SortKey::Activations)},
                {"full", mean_finite_db(r, SortKey::Full)}}},
              {"full_over_sum_of_single_mode_mse", additivity_ratio(r)},
              {"prediction_within_3db", defined ? static_cast<double>(agree) / static_cast<double>(defined) : 0.0}};
}

struct Run {
  std::string name;
  Graph graph;
  CalibrationRecord calib;
};

std::vector<Run> parse_runs(const PipelineConfig& c) {
  std::vector<std::string> specs = c.runs;
  if (specs.empty()) specs.push_back("run=" + require_path(c.model, "--model") + "," + c.calibration);
  std::vector<Run> runs;
  for (const auto& spec : specs) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("run '" + spec + "' must read name=manifest[,calibration]");
    const std::string name = spec.substr(0, eq);
    std::string manifest = spec.substr(eq + 1), calibration = c.calibration;
    if (const auto comma = manifest.find(','); comma != std::string::npos) {
      calibration = manifest.substr(comma + 1);
      manifest = manifest.substr(0, comma);
    }
    PipelineConfig rc = c;
    rc.model = manifest;
    rc.weights.clear();
    rc.calibration = calibration;
    LoadedModel m = load_configured_model(rc);
    for (const auto& n : m.graph.nodes()) {
      if (!n.quant.empty()) {
        throw std::runtime_error("run '" + name + "': '" + manifest +
                                 "' is quantized; analyze expects the float model it came from");
      }
    }
    CalibrationRecord calib = load_calibration(rc, m.graph);
    runs.push_back({name, std::move(m.graph), std::move(calib)});
  }
  return runs;
}

}  // namespace

std::vector<Tensor> load_samples(const PipelineConfig& c, const InputSpec& input, std::size_t count,
                                 std::size_t offset) {
  if (c.fixture) {
    const SampleStream stream = fixture_samples(*c.fixture);
    const auto& in = stream.input();
    if (in.height != input.height || in.width != input.width || in.channels != input.channels)
      throw ConfigError("fixture samples do not match the model input shape");
    return stream.take(count, offset);
  }
  if (c.samples_dir.empty()) throw ConfigError("no sample source: pass --samples DIR or fixture options");
  if (!fs::is_directory(c.samples_dir))
    throw std::runtime_error("sample directory '" + c.samples_dir + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(c.samples_dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  const std::size_t expected = input.height * input.width * input.channels;
  std::vector<Tensor> out;
  for (std::size_t i = offset; i < files.size() && out.size() < count; ++i) {
    std::ifstream in(files[i], std::ios::binary);
    const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    if (bytes.size() != expected * 8) {
      throw std::runtime_error("sample '" + files[i].string() + "' has " + std::to_string(bytes.size()) +
                               " bytes, expected " + std::to_string(expected * 8));
    }
    Tensor t({1, input.height, input.width, input.channels});
    for (std::size_t k = 0; k < expected; ++k) {
      std::uint64_t bits = 0;
      for (std::size_t b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[k * 8 + b]) << (8 * b);
      t[k] = std::bit_cast<double>(bits);
    }
    out.push_back(std::move(t));
  }
  if (out.empty()) throw std::runtime_error("sample directory '" + c.samples_dir + "' has no samples at offset " + std::to_string(offset));
  return out;
}

LoadedModel load_configured_model(const PipelineConfig& c) {
  const std::string manifest = require_path(c.model, "--model");
  const std::string weights = c.weights.empty() ? default_weights_path(manifest) : c.weights;
  LoadOptions options;
  options.fold_batchnorm = !c.no_fold;
  return load_model(manifest, weights, options);
}

EqualizationResult equalize(const Graph& graph, const CalibrationRecord& calib, const PipelineConfig& c) {
  switch (c.mode) {
    case EqualizationMode::None: {
      std::vector<ScaleVector> scales;
      for (const auto& id : layer_ids(graph))
        scales.push_back(ScaleVector::ones(id, graph.out_channels(id), c.s_max));
      return {graph, std::move(scales), assess_eligibility(graph, &calib, false), calib, {}};
    }
    case EqualizationMode::OneStep: return one_step_equalize(graph, calib, c.s_max);
    case EqualizationMode::TwoStep: return two_step_equalize(graph, calib, c.s_max, TwoStepMode::Standard);
    case EqualizationMode::TwoStepMobileNet:
      return two_step_equalize(graph, calib, c.s_max, TwoStepMode::MobileNet, c.attenuation_floor);
  }
  throw ConfigError("unknown equalization mode");
}

CommandResult cmd_fixture(const PipelineConfig& c) {
  validate(c);
  if (!c.fixture) throw ConfigError("fixture command needs fixture options");
  prepare_out_dir(c);
  CommandResult result;
  const Fixture fx = make_fixture(*c.fixture);
  const Json spec = fixture_json(*c.fixture);
  save(fx.graph, c, "model", Json::object(), "fixture " + spec.dump(), result);
  write(out_path(c, "fixture.json"), dump(spec), result);
  result.summary = Json{{"fixture", spec}, {"layers", layer_ids(fx.graph).size()}};
  return result;
}

CommandResult cmd_calibrate(const PipelineConfig& c) {
  validate(c);
  const LoadedModel m = load_configured_model(c);
  const auto samples = load_samples(c, m.graph.input(), c.calibration_count);
  prepare_out_dir(c);
  CommandResult result;
  const CalibrationRecord r = calibrate(m.graph, samples, c.calibration_count, c.bits, c.threads);
  write(out_path(c, "calibration.json"), dump(to_json(r)), result);
  result.diagnostics = r.diagnostics;
  result.summary = Json{{"samples", r.sample_count}, {"layers", r.layers.size()}};
  return result;
}

CommandResult cmd_equalize(const PipelineConfig& c) {
  validate(c);
  const LoadedModel m = load_configured_model(c);
  const CalibrationRecord calib = load_calibration(c, m.graph);
  prepare_out_dir(c);
  CommandResult result;
  const EqualizationResult eq = equalize(m.graph, calib, c);
  Json scales = to_json(eq.scales, eq.report);
  scales["mode"] = to_string(c.mode);
  scales["s_max"] = c.s_max;
  if (c.mode == EqualizationMode::TwoStepMobileNet) scales["attenuation_floor"] = c.attenuation_floor;
  scales["diagnostics"] = eq.diagnostics;
  save(eq.graph, c, "equalized", Json{{"equalization", scales}}, "equalized " + c.model, result);
  write(out_path(c, "scales.json"), dump(scales), result);
  write(out_path(c, "calibration_equalized.json"), dump(to_json(eq.calibration)), result);
  result.diagnostics = eq.diagnostics;
  std::size_t skipped = 0;
  for (const auto& l : eq.report.layers) skipped += !l.eligible();
  result.summary = Json{{"mode", to_string(c.mode)}, {"layers", eq.report.layers.size()}, {"skipped", skipped}};
  return result;
}

CommandResult cmd_quantize(const PipelineConfig& c) {
  validate(c);
  const LoadedModel m = load_configured_model(c);
  const CalibrationRecord calib = load_calibration(c, m.graph);
  const auto eval = load_samples(c, m.graph.input(), c.calibration_count,
                                 c.held_out ? kHeldOutOffset : 0);
  prepare_out_dir(c);
  CommandResult result;
  Graph quantized = quantize_graph(m.graph, calib, QuantMode::Full);
  Json extra = Json::object();
  if (c.bias_correction) {
    const auto samples = load_samples(c, m.graph.input(), c.bias_correction_count);
    BiasCorrectionResult bc = bias_correct(m.graph, quantized, samples, c.bias_correction_count);
    quantized = std::move(bc.graph);
    Json corrections = Json::object();
    for (const auto& [id, delta] : bc.corrections) corrections[id] = delta;
    extra["bias_correction"] = {{"samples", samples.size()}, {"corrections", corrections}};
    result.diagnostics = bc.diagnostics;
  }
  save(quantized, c, "quantized", extra, "quantized " + c.model, result);
  const SqnrReport report = measure_sqnr(m.graph, calib, eval, c.threads, &quantized);
  write(out_path(c, "quantize_report.csv"), sqnr_csv(report, timestamp(c)), result);
  result.summary = report_summary(report);
  result.summary["bias_correction"] = c.bias_correction;
  return result;
}

CommandResult cmd_analyze(const PipelineConfig& c) {
  validate(c);
  const std::vector<Run> runs = parse_runs(c);
  prepare_out_dir(c);
  CommandResult result;
  std::vector<SqnrReport> reports;
  std::vector<std::string> names;
  Json summary = Json::object();
  for (const auto& run : runs) {
    const auto samples = load_samples(c, run.graph.input(), c.calibration_count,
                                      c.held_out ? kHeldOutOffset : 0);
    SqnrReport report = measure_sqnr(run.graph, run.calib, samples, c.threads);
    write(out_path(c, "sqnr_" + run.name + ".csv"), sqnr_csv(report, timestamp(c)), result);
    const auto oe_w = optimal_equalization_bound(run.graph, run.calib, OeTarget::Weights);
    const auto oe_a = optimal_equalization_bound(run.graph, run.calib, OeTarget::Activations);
    write(out_path(c, "oe_" + run.name + ".csv"), oe_csv(oe_w, oe_a), result);
    summary[run.name] = report_summary(report);
    reports.push_back(std::move(report));
    names.push_back(run.name);
  }
  write(out_path(c, "compare.csv"), compare_runs(reports, names, c.sort, c.sort_key), result);
  write(out_path(c, "summary.json"), dump(summary), result);
  result.summary = std::move(summary);
  return result;
}

CommandResult cmd_demo(const PipelineConfig& c) {
  PipelineConfig d = c;
  if (!d.fixture) {
    d.fixture = FixtureSpec{};
    d.fixture->layers = 6;
    d.fixture->channels = 16;
    d.fixture->imbalance = 100.0;
  }
  validate(d);
  CommandResult result;
  const CommandResult fx = cmd_fixture(d);
  result.artifacts = fx.artifacts;
  d.model = model_paths(d.out_dir, "model").manifest;
  d.weights.clear();
  const CommandResult cal = cmd_calibrate(d);
  result.artifacts.insert(result.artifacts.end(), cal.artifacts.begin(), cal.artifacts.end());
  const std::string base_calibration = out_path(d, "calibration.json");

  std::vector<std::string> runs = {"none=" + d.model + "," + base_calibration};
  for (const auto mode : {EqualizationMode::OneStep, EqualizationMode::TwoStep}) {
    PipelineConfig e = d;
    e.mode = mode;
    e.calibration = base_calibration;
    e.out_dir = out_path(d, to_string(mode));
    const CommandResult eq = cmd_equalize(e);
    result.artifacts.insert(result.artifacts.end(), eq.artifacts.begin(), eq.artifacts.end());
    runs.push_back(std::string(to_string(mode)) + "=" + model_paths(e.out_dir, "equalized").manifest + "," +
                   out_path(e, "calibration_equalized.json"));
  }
  PipelineConfig a = d;
  a.runs = runs;
  const CommandResult an = cmd_analyze(a);
  result.artifacts.insert(result.artifacts.end(), an.artifacts.begin(), an.artifacts.end());

  const auto& s = an.summary;
  auto mean_a = [&](const char* run) { return s.at(run).at("mean_sqnr_db").at("activations").get<double>(); };
  auto mse = [&](const char* run) { return s.at(run).at("output_mse").at("full").get<double>(); };
  result.summary = Json{
      {"runs", s},
      {"claims",
       {{"one_step_raises_mean_activation_sqnr", mean_a("one-step") > mean_a("none")},
        {"two_step_raises_mean_activation_sqnr", mean_a("two-step") > mean_a("none")},
        {"one_step_lowers_output_mse", mse("one-step") < mse("none")},
        {"two_step_lowers_output_mse", mse("two-step") < mse("none")}}},
      {"output_mse_reduction", {{"one-step", mse("none") / mse("one-step")}, {"two-step", mse("none") / mse("two-step")}}}};
  write(out_path(d, "demo_summary.json"), dump(result.summary), result);
  return result;
}

}  // namespace chaneq
