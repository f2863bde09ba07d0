// itupred command-line pipeline.
//
// Exit codes: 0 ok, 1 usage, 2 config, 3 missing artifact, 4 data, 5 internal.

#include <CLI11.hpp>
#include <fmt/format.h>

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>

#include "itupred/error.h"
#include "itupred/pipeline.h"

namespace {

using itupred::PipelineConfig;
using itupred::StageResult;

enum ExitCode { kOk = 0, kUsage = 1, kConfig = 2, kMissing = 3, kData = 4, kInternal = 5 };

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r' || c == '\t') c = ' ';
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out;
}

int fail(ExitCode code, std::string_view kind, const std::string& message) {
  std::cerr << fmt::format("error: kind={} code={} message=\"{}\"\n", kind, static_cast<int>(code),
                           one_line(message));
  return code;
}

std::filesystem::path default_config() {
  const std::filesystem::path local = "configs/default.conf";
  if (std::filesystem::exists(local)) return local;
  return std::filesystem::path(ITUPRED_CONFIG_DIR) / "default.conf";
}

void print(const StageResult& r, bool verbose) {
  std::cout << r.summary << '\n';
  if (verbose)
    for (const auto& a : r.artifacts) std::cout << "  " << a.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Predict ITU admission after surgery from clinical notes"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir;
  bool verbose = false;
  app.add_option("-c,--config", config_path, "Config file (default: configs/default.conf)");
  app.add_option("-s,--set", overrides, "Override a setting: section.key=value (repeatable)");
  app.add_option("-o,--output-dir", output_dir,
                 "Output directory (overrides ITUPRED_OUTPUT_DIR and output.dir)");
  app.add_flag("-v,--verbose", verbose, "List written artifacts");

  using Stage = std::function<StageResult(const PipelineConfig&)>;
  const std::vector<std::tuple<std::string, std::string, Stage>> stages = {
      {"gen", "Generate a synthetic corpus with gold annotations", itupred::run_gen},
      {"annotate", "Annotate notes; score against gold when present", itupred::run_annotate},
      {"build", "Window notes, build features, sequences and splits", itupred::run_build},
      {"stats", "Concept frequency ratio tables", itupred::run_stats},
      {"train-rf", "Chi-squared selection, random forests and cross-validation", itupred::run_train_rf},
      {"train-lstm", "Train the note-sequence LSTM", itupred::run_train_lstm},
      {"eval", "Bootstrap metrics, calibration, parity and ensemble", itupred::run_eval},
      {"explain", "Shapley summary and LIME explanations", itupred::run_explain},
      {"report", "Render SVG plots", itupred::run_report},
  };
  std::map<CLI::App*, Stage> handlers;
  for (const auto& [name, help, fn] : stages) handlers[app.add_subcommand(name, help)] = fn;
  CLI::App* all = app.add_subcommand("all", "Run every stage in order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kUsage, "usage", e.what());
  }

  try {
    const auto cfg_path = config_path.empty() ? default_config() : std::filesystem::path(config_path);
    auto file = itupred::ConfigFile::load(cfg_path);
    for (const auto& o : overrides) file.set(o);
    std::optional<std::filesystem::path> out;
    if (!output_dir.empty()) out = output_dir;
    else if (const char* env = std::getenv("ITUPRED_OUTPUT_DIR"); env && *env) out = env;
    const PipelineConfig config = itupred::make_pipeline_config(file, out);

    CLI::App* chosen = app.get_subcommands().front();
    if (chosen == all) {
      for (const auto& [name, help, fn] : stages) {
        if (name == "gen" && !config.corpus.empty()) continue;
        print(fn(config), verbose);
      }
    } else {
      print(handlers.at(chosen)(config), verbose);
    }
    return kOk;
  } catch (const itupred::ConfigError& e) {
    return fail(kConfig, "config", e.what());
  } catch (const itupred::MissingArtifactError& e) {
    return fail(kMissing, "missing_artifact", e.what());
  } catch (const itupred::ParseError& e) {
    return fail(kData, "parse", e.what());
  } catch (const itupred::LexiconError& e) {
    return fail(kData, "lexicon", e.what());
  } catch (const itupred::DataError& e) {
    return fail(kData, "data", e.what());
  } catch (const itupred::NumericError& e) {
    return fail(kData, "numeric", e.what());
  } catch (const std::exception& e) {
    return fail(kInternal, "internal", e.what());
  }
}
