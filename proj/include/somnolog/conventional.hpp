#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "somnolog/actigraphy.hpp"
#include "somnolog/config.hpp"
#include "somnolog/weak_supervision.hpp"

namespace somnolog {

enum class AlgorithmId { Sadeh, ColeKripke, Oakley, Sazonov, Hmm };

inline constexpr std::array<AlgorithmId, 5> kAllAlgorithms{
    AlgorithmId::Sadeh, AlgorithmId::ColeKripke, AlgorithmId::Oakley, AlgorithmId::Sazonov, AlgorithmId::Hmm};

// Short column names: sadeh, ck, oakley, sazonov, hmm.
std::string_view algorithm_key(AlgorithmId id);
AlgorithmId parse_algorithm(std::string_view key);
std::vector<AlgorithmId> parse_algorithm_list(std::string_view comma_separated);

// Coefficients transcribed from the original publications of each labeler.
// Version 1 of the built-in table; every field can be overridden with
// `<algo>.<parameter> = value` lines (see LabelerConfig::apply).
struct SadehParams {
  // Sadeh, Sharkey & Carskadon (1994), 1-minute epochs:
  // PS = 7.601 - 0.065 MEAN - 1.08 NAT - 0.056 SD - 0.703 LG, sleep iff PS >= 0.
  double intercept = 7.601;
  double w_mean = -0.065;  // mean count over the 11-minute centred window
  double w_nat = -1.08;    // epochs in the window with nat_low <= count < nat_high
  double w_sd = -0.056;    // standard deviation of the current and 5 preceding epochs
  double w_log = -0.703;   // ln(count_t + 1)
  int half_window = 5;
  int sd_length = 6;
  double nat_low = 50.0;
  double nat_high = 100.0;
  // Counts are truncated here before scoring (ActiLife convention); <= 0 disables.
  double count_cap = 300.0;
};

struct ColeKripkeParams {
  // Cole et al. (1992), 1-minute epochs:
  // D = P (404 A-4 + 598 A-3 + 326 A-2 + 441 A-1 + 1408 A0 + 508 A+1 + 350 A+2), sleep iff D < 1.
  double scale = 0.00001;
  std::array<double, 7> weights{404.0, 598.0, 326.0, 441.0, 1408.0, 508.0, 350.0};
  double threshold = 1.0;
};

struct OakleyParams {
  // Oakley (1997) as used by Actiware: weighted sum of surrounding epochs,
  // wake iff the sum exceeds the threshold (low 20, medium 40, high 80).
  double threshold = 40.0;
  // 60 s epochs: E-2..E+2.
  std::array<double, 5> weights_60s{0.04, 0.2, 1.0, 0.2, 0.04};
  // 30 s epochs: E-4..E+4.
  std::array<double, 9> weights_30s{0.04, 0.04, 0.2, 0.2, 2.0, 0.2, 0.2, 0.04, 0.04};
};

struct SazonovParams {
  // Sazonov et al. (2004): logistic model over running maxima of the
  // current and preceding epochs, sleep iff sigmoid(score) >= 0.5.
  // score = 1.727 - 0.256 max(A0) - 0.154 max(A-1..A0) - 0.136 max(A-2..A0)
  //               - 0.140 max(A-3..A0) - 0.176 max(A-4..A0)
  double intercept = 1.727;
  std::array<double, 5> weights{-0.256, -0.154, -0.136, -0.140, -0.176};
};

struct HmmLabelerParams {
  int max_iter = 100;
  double tol = 1e-6;
};

struct LabelerConfig {
  static constexpr int kVersion = 1;

  SadehParams sadeh;
  ColeKripkeParams cole_kripke;
  OakleyParams oakley;
  SazonovParams sazonov;
  HmmLabelerParams hmm;

  static LabelerConfig builtin() { return {}; }
  // Applies `sadeh.*`, `ck.*`, `oakley.*`, `sazonov.*`, `hmm.*` keys. Unknown
  // keys under those prefixes are rejected. `oakley.threshold` accepts the
  // names low/medium/high or a number.
  void apply(const KeyValueConfig& overrides);
  void validate() const;
};

// Single-window scorers. `counts` is at the scale the algorithm expects
// (minute-scale for Sadeh and Cole-Kripke). An empty result means the epoch
// lacks context and is unlabelable.
std::optional<int> sadeh_label(std::span<const double> counts, std::size_t t, const SadehParams& p);
double sadeh_score(std::span<const double> counts, std::size_t t, const SadehParams& p);
std::optional<int> cole_kripke_label(std::span<const double> counts, std::size_t t, const ColeKripkeParams& p);
std::optional<int> oakley_label(std::span<const double> counts, std::size_t t, int epoch_seconds,
                                const OakleyParams& p);
std::optional<int> sazonov_label(std::span<const double> counts, std::size_t t, const SazonovParams& p);
double sazonov_score(std::span<const double> counts, std::size_t t, const SazonovParams& p);

// One labeler over a whole series, at native epoch resolution.
struct LabelTrack {
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> valid;
};

LabelTrack run_labeler(const EpochSeries& series, AlgorithmId id, const LabelerConfig& config);

// k x T weak labels, rows in the order given by `algorithms`.
WeakLabelMatrix run_ensemble(const EpochSeries& series, std::span<const AlgorithmId> algorithms,
                             const LabelerConfig& config = LabelerConfig::builtin());

}  // namespace somnolog
