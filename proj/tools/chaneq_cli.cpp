// chaneq: calibrate -> equalize -> quantize -> analyze pipeline.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration error. Errors
// are printed to stderr as one JSON object; data goes to files and the
// command summary to stdout.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "chaneq/pipeline.hpp"

namespace {

using chaneq::Json;

// Reads a flat JSON object whose keys are long option names.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    Json out = Json::object();
    for (const CLI::Option* opt : app->get_options()) {
      if (opt->get_lnames().empty() || opt->get_configurable() == false) continue;
      const std::string name = opt->get_lnames().front();
      if (opt->count() > 0) {
        const auto& r = opt->results();
        out[name] = r.size() == 1 ? Json(r.front()) : Json(r);
      } else if (default_also && !opt->get_default_str().empty()) {
        out[name] = opt->get_default_str();
      }
    }
    return out.dump(2);
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    Json j;
    try {
      j = Json::parse(input);
    } catch (const Json::parse_error& e) {
      throw CLI::ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConfigError("config must be a JSON object");
    std::vector<CLI::ConfigItem> items;
    for (const auto& [key, value] : j.items()) {
      CLI::ConfigItem item;
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(key, v));
      } else {
        item.inputs.push_back(scalar(key, value));
      }
      items.push_back(std::move(item));
    }
    return items;
  }

 private:
  static std::string scalar(const std::string& key, const Json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number()) return v.dump();
    throw CLI::ConfigError("config key '" + key + "' must be a string, number, boolean or array of them");
  }
};

void print_error(const char* kind, const std::string& message, const std::string& code = "") {
  Json e{{"error", kind}, {"message", message}};
  if (!code.empty()) e["code"] = code;
  std::cerr << e.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-layer channel equalization and post-training quantization toolkit"};
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON file of option values; command-line flags override it");
  app.require_subcommand(1, 1);

  chaneq::PipelineConfig cfg;
  chaneq::FixtureSpec fixture;
  bool use_fixture = false;
  std::string fixture_spec_path, mode = "none", sort = "by-first-run", sort_key = "activations";
  std::string topology = "chain", activation = "relu";
  std::uint64_t seed = 0;

  app.add_option("--model", cfg.model, "Model manifest (JSON)");
  app.add_option("--weights", cfg.weights, "Weights blob; defaults to the manifest path with .bin");
  app.add_option("--calibration", cfg.calibration, "Calibration record (JSON)");
  app.add_option("--samples", cfg.samples_dir, "Directory of raw little-endian f64 samples");
  app.add_option("--out", cfg.out_dir, "Output directory")->capture_default_str();
  app.add_option("--threads", cfg.threads, "Worker threads for sample processing")->capture_default_str();
  app.add_option("--calibration-count", cfg.calibration_count, "Samples used for calibration and analysis")
      ->capture_default_str();
  app.add_option("--bits-w", cfg.bits.weights, "Weight bit width")->capture_default_str();
  app.add_option("--bits-a", cfg.bits.activations, "Activation bit width")->capture_default_str();
  app.add_option("--bits-b", cfg.bits.bias, "Bias bit width")->capture_default_str();
  app.add_option("--s-max", cfg.s_max, "Largest per-channel amplification")->capture_default_str();
  app.add_option("--mode", mode, "none | one-step | two-step | two-step-mobilenet")->capture_default_str();
  app.add_option("--attenuation-floor", cfg.attenuation_floor, "Smallest factor in two-step-mobilenet mode")
      ->capture_default_str();
  app.add_flag("--bias-correction", cfg.bias_correction, "Correct biases after quantization");
  app.add_option("--bias-correction-count", cfg.bias_correction_count, "Samples used for bias correction")
      ->capture_default_str();
  app.add_flag("--held-out", cfg.held_out, "Evaluate on samples disjoint from calibration");
  app.add_flag("--no-fold", cfg.no_fold, "Keep batch_norm nodes when loading");
  app.add_flag("--timestamp", cfg.timestamp, "Stamp CSV header lines with the current time");
  app.add_option("--sort", sort, "by-first-run | per-run")->capture_default_str();
  app.add_option("--sort-key", sort_key, "weights | activations | full")->capture_default_str();
  app.add_option("--run", cfg.runs, "analyze run as name=manifest[,calibration]; repeatable");

  app.add_flag("--fixture", use_fixture, "Draw samples from the fixture options");
  app.add_option("--fixture-spec", fixture_spec_path, "fixture.json written by the fixture command");
  app.add_option("--seed", seed, "Fixture seed")->capture_default_str();
  app.add_option("--layers", fixture.layers, "Fixture layer count")->capture_default_str();
  app.add_option("--channels", fixture.channels, "Fixture channels per layer")->capture_default_str();
  app.add_option("--imbalance", fixture.imbalance, "Fixture channel extremum ratio")->capture_default_str();
  app.add_option("--topology", topology, "chain | residual | depthwise-chain")->capture_default_str();
  app.add_option("--activation", activation, "linear | relu | prelu | relu6")->capture_default_str();
  app.add_option("--peak", fixture.peak, "Fixture largest channel extremum")->capture_default_str();
  app.add_option("--height", fixture.height, "Fixture input height")->capture_default_str();
  app.add_option("--width", fixture.width, "Fixture input width")->capture_default_str();
  app.add_option("--input-channels", fixture.input_channels, "Fixture input channels")->capture_default_str();

  struct Command {
    const char* name;
    const char* help;
    chaneq::CommandResult (*run)(const chaneq::PipelineConfig&);
    bool implies_fixture;
  };
  const Command commands[] = {
      {"fixture", "Generate a synthetic model", chaneq::cmd_fixture, true},
      {"calibrate", "Record activation ranges and statistics", chaneq::cmd_calibrate, false},
      {"equalize", "Apply channel equalization", chaneq::cmd_equalize, false},
      {"quantize", "Fake-quantize a model, optionally with bias correction", chaneq::cmd_quantize, false},
      {"analyze", "Per-layer SQNR, noise prediction and OE bound reports", chaneq::cmd_analyze, false},
      {"demo", "End-to-end run on a built-in fixture", chaneq::cmd_demo, false},
  };
  for (const auto& c : commands) app.add_subcommand(c.name, c.help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("config", e.what());
    return 2;
  }

  const Command* selected = nullptr;
  for (const auto& c : commands)
    if (app.got_subcommand(c.name)) selected = &c;

  try {
    cfg.mode = chaneq::equalization_mode_from_string(mode);
    try {
      cfg.sort = chaneq::run_sort_from_string(sort);
      cfg.sort_key = chaneq::sort_key_from_string(sort_key);
      fixture.topology = chaneq::topology_from_string(topology);
      fixture.activation = chaneq::activation_kind_from_string(activation);
    } catch (const std::exception& e) {
      throw chaneq::ConfigError(e.what());
    }
    fixture.seed = seed;
    if (!fixture_spec_path.empty()) {
      const Json j = chaneq::read_json_file(fixture_spec_path);
      fixture.layers = j.at("layers").get<std::size_t>();
      fixture.channels = j.at("channels").get<std::size_t>();
      fixture.imbalance = j.at("imbalance").get<double>();
      fixture.seed = j.at("seed").get<std::uint64_t>();
      fixture.topology = chaneq::topology_from_string(j.at("topology").get<std::string>());
      fixture.activation = chaneq::activation_kind_from_string(j.at("activation").get<std::string>());
      fixture.peak = j.at("peak").get<double>();
      fixture.height = j.at("height").get<std::size_t>();
      fixture.width = j.at("width").get<std::size_t>();
      fixture.input_channels = j.at("input_channels").get<std::size_t>();
      use_fixture = true;
    }
    const bool fixture_options_given = app.count("--layers") || app.count("--channels") ||
                                       app.count("--imbalance") || app.count("--topology") ||
                                       app.count("--activation") || app.count("--peak");
    if (use_fixture || selected->implies_fixture || fixture_options_given ||
        (std::string(selected->name) == "demo" && app.count("--seed"))) {
      cfg.fixture = fixture;
    }
    chaneq::validate(cfg);

    const chaneq::CommandResult result = selected->run(cfg);
    for (const auto& d : result.diagnostics) std::cerr << "diagnostic: " << d << '\n';
    std::cout << Json{{"command", selected->name}, {"artifacts", result.artifacts}, {"summary", result.summary}}.dump(2)
              << '\n';
    return 0;
  } catch (const chaneq::ConfigError& e) {
    print_error("config", e.what());
    return 2;
  } catch (const chaneq::ModelIoError& e) {
    print_error("runtime", e.what(), chaneq::to_string(e.code()));
    return 1;
  } catch (const std::exception& e) {
    print_error("runtime", e.what());
    return 1;
  }
}
