#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "somnolog/actigraphy.hpp"
#include "somnolog/config.hpp"
#include "somnolog/conventional.hpp"
#include "somnolog/evaluation.hpp"
#include "somnolog/network.hpp"
#include "somnolog/training.hpp"

namespace somnolog {

inline constexpr std::string_view kLibraryVersion = "0.1.0";

enum class Stage { Synth, Label, Train, Predict, Evaluate, Profile, Report };

inline constexpr std::array<Stage, 7> kAllStages{Stage::Synth,    Stage::Label,   Stage::Train, Stage::Predict,
                                                 Stage::Evaluate, Stage::Profile, Stage::Report};

std::string_view stage_key(Stage stage);
Stage parse_stage(std::string_view key);

// Everything a pipeline run needs, parsed and validated from a flat
// key-value configuration (see README for the key list).
//
// Output layout under out_dir:
//   epochs/<subject>.csv                      synth
//   labels/<subject>.weak.csv, .soft.csv      label
//   models/<tag>/<subject>.ckpt, .history.csv train
//   predictions/<tag>/<subject>.csv           predict (test block)
//   reports/metrics_<tag>.json, reliability_<tag>.csv
//   profiles/<tag>_{model,ensemble}[_fit].csv, <tag>_summary.json
//   reports/summary.json                      report
//   manifests/<stage>.json                    every stage
// where <tag> is <architecture>_<loss>.
struct PipelineConfig {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> data_dir;  // epoch CSVs; out_dir/epochs when empty
  std::uint64_t seed = 7;
  int jobs = 1;
  SyntheticConfig synth;
  std::vector<AlgorithmId> algorithms;
  LabelerConfig labeler;
  NetworkSpec network;
  TrainConfig train;
  int mc_samples = 100;
  CalibrationConfig calibration;
  int profile_bin_epochs = 1;
  CurveFitOptions curve;
  // All settings that influence data artifacts, defaults filled in. Paths and
  // the job count are excluded.
  KeyValueConfig effective;

  // Unknown keys are rejected. The output directory falls back to the
  // SOMNOLOG_OUT environment variable.
  static PipelineConfig from(const KeyValueConfig& config);

  std::filesystem::path epochs_dir() const;
  std::string model_tag() const;
  // SHA-256 of the canonical text of `effective`.
  std::string experiment_hash() const;
};

struct StageReport {
  Stage stage = Stage::Synth;
  std::vector<std::filesystem::path> outputs;
  double seconds = 0.0;
};

StageReport run_stage(Stage stage, const PipelineConfig& config);

// synth (when no data directory is configured) through report.
std::vector<Stage> default_chain(const PipelineConfig& config);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace somnolog
