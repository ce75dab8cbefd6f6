// Command-line front end. Talks to the library only through the C API.
#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "somnolog/somnolog.h"

namespace {

void print_error(const std::string& stage, const std::string& code, const std::string& message) {
  nlohmann::json j;
  j["error"] = {{"stage", stage}, {"code", code}, {"message", message}};
  std::cerr << j.dump() << '\n';
}

struct Context {
  somnolog_context* ctx = nullptr;
  Context() {
    if (somnolog_context_create(&ctx) != SOMNOLOG_OK) ctx = nullptr;
  }
  ~Context() { somnolog_context_destroy(ctx); }
  Context(const Context&) = delete;
  Context& operator=(const Context&) = delete;
};

// Flag value -> config key, applied only when the flag was given.
struct Binding {
  std::string key;
  std::optional<std::string> value;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised sleep detection from actigraphy"};
  app.set_version_flag("--version", std::string(somnolog_version()));
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<std::string> config_path;
  std::vector<std::string> overrides;
  std::map<std::string, Binding> flags;
  const auto bind = [&](CLI::App* target, const std::string& flag, const std::string& key, const std::string& help) {
    flags[flag] = {key, std::nullopt};
    target->add_option(flag, flags[flag].value, help);
  };

  app.add_option("--config", config_path, "key = value configuration file")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "extra configuration entry key=value (repeatable)");
  bind(&app, "--out", "paths.out", "output directory (default: $SOMNOLOG_OUT)");
  bind(&app, "--data", "paths.data", "directory of epoch CSVs (default: <out>/epochs)");
  bind(&app, "--seed", "seed", "master seed");
  bind(&app, "--jobs", "jobs", "subjects processed in parallel");

  auto* synth = app.add_subcommand("synth", "write synthetic epoch CSVs");
  auto* label = app.add_subcommand("label", "run the labeler ensemble, write weak and soft labels");
  auto* train = app.add_subcommand("train", "train one network per subject");
  auto* predict = app.add_subcommand("predict", "Monte Carlo dropout predictions on the test block");
  auto* evaluate = app.add_subcommand("evaluate", "metrics against the psg_label column");
  auto* profile = app.add_subcommand("profile", "daily uncertainty profiles and curve fits");
  app.add_subcommand("report", "aggregate summary tables");
  auto* run = app.add_subcommand("run", "synth (unless --data is given) through report");
  for (auto* sub : {synth, run}) {
    bind(sub, "--subjects", "synth.subjects", "number of subjects");
    bind(sub, "--days", "synth.days", "days per subject");
    bind(sub, "--epoch-seconds", "synth.epoch_seconds", "epoch length (30 or 60)");
  }
  for (auto* sub : {label, run}) {
    bind(sub, "--algos", "label.algos", "comma list of sadeh,ck,oakley,sazonov,hmm");
    bind(sub, "--oakley-threshold", "label.oakley_threshold", "low, medium, high or a number");
  }
  for (auto* sub : {train, predict, evaluate, profile, run}) {
    bind(sub, "--arch", "net.architecture", "mlp, cnn or lstm");
    bind(sub, "--loss", "train.loss", "soft-ce, hard-ce or brier");
  }
  for (auto* sub : {train, run}) {
    bind(sub, "--lr", "train.learning_rate", "Adam learning rate");
    bind(sub, "--epochs", "train.max_epochs", "maximum training epochs");
    bind(sub, "--patience", "train.patience", "early-stopping patience");
    bind(sub, "--batch-size", "train.batch_size", "mini-batch size");
  }
  for (auto* sub : {predict, run}) bind(sub, "--samples", "predict.samples", "Monte Carlo samples per epoch");
  for (auto* sub : {evaluate, run}) bind(sub, "--bins", "eval.bins", "calibration bins");
  for (auto* sub : {profile, run}) {
    bind(sub, "--bin-epochs", "profile.bin_epochs", "epochs per profile bin");
    bind(sub, "--degree", "profile.degree", "polynomial degree");
    bind(sub, "--pieces", "profile.pieces", "pieces over 24 h");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const bool unknown_stage = app.get_subcommands().empty() && !app.remaining().empty();
    print_error("cli", unknown_stage ? "unknown_stage" : "invalid_argument", e.what());
    return unknown_stage ? SOMNOLOG_ERR_UNKNOWN_STAGE : SOMNOLOG_ERR_INVALID_ARGUMENT;
  }

  Context context;
  if (!context.ctx) {
    print_error("cli", "internal", "cannot create context");
    return SOMNOLOG_ERR_INTERNAL;
  }
  somnolog_context* ctx = context.ctx;
  const auto fail = [&](somnolog_status status) {
    std::cerr << somnolog_last_error(ctx) << '\n';
    return static_cast<int>(status);
  };

  if (config_path) {
    if (const auto s = somnolog_config_load(ctx, config_path->c_str()); s != SOMNOLOG_OK) return fail(s);
  }
  for (const auto& entry : overrides) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos) {
      print_error("cli", "invalid_argument", "--set expects key=value, got '" + entry + "'");
      return SOMNOLOG_ERR_INVALID_ARGUMENT;
    }
    if (const auto s = somnolog_config_set(ctx, entry.substr(0, eq).c_str(), entry.substr(eq + 1).c_str());
        s != SOMNOLOG_OK) {
      return fail(s);
    }
  }
  for (const auto& [flag, binding] : flags) {
    if (!binding.value) continue;
    if (const auto s = somnolog_config_set(ctx, binding.key.c_str(), binding.value->c_str()); s != SOMNOLOG_OK) {
      return fail(s);
    }
  }

  const std::string name = app.get_subcommands().front()->get_name();
  const std::string stage = name == "run" ? "all" : name;
  if (const auto s = somnolog_run_stage(ctx, stage.c_str()); s != SOMNOLOG_OK) return fail(s);
  std::cout << name << ": ok\n";
  return 0;
}
