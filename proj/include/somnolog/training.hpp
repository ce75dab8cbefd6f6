#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "somnolog/actigraphy.hpp"
#include "somnolog/network.hpp"
#include "somnolog/weak_supervision.hpp"

namespace somnolog {

enum class LossKind { SoftCrossEntropy, HardCrossEntropy, BrierScore };

// soft-ce, hard-ce, brier
std::string_view loss_key(LossKind kind);
LossKind parse_loss(std::string_view key);

// What the Brier score regresses against.
enum class BrierTarget { SoftLabel, Majority };

std::string_view brier_target_key(BrierTarget target);
BrierTarget parse_brier_target(std::string_view key);

// Per-epoch regression targets for `kind` at the listed epochs: p_hat for the
// soft losses, the majority vote for hard-ce (and for brier when asked).
std::vector<double> loss_targets(LossKind kind, const SoftLabelSeries& labels, std::span<const std::size_t> indices,
                                 BrierTarget brier_target = BrierTarget::SoftLabel);

// Mean loss over the batch; f is clamped into [eps, 1 - eps] first.
//   cross-entropy: -mean[y ln f + (1 - y) ln(1 - f)]
//   brier:          mean (f - y)^2
double loss_eval(LossKind kind, std::span<const double> f, std::span<const double> targets);
// d loss / d f_t.
std::vector<double> loss_grad(LossKind kind, std::span<const double> f, std::span<const double> targets);

// Over every scored epoch of `labels` (f aligned with the full series).
double loss_eval(LossKind kind, std::span<const double> f, const SoftLabelSeries& labels,
                 BrierTarget brier_target = BrierTarget::SoftLabel);

// Bias-corrected Adam on g + l2 * theta.
struct AdamConfig {
  double learning_rate = 1e-5;
  double l2 = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long long step = 0;

  static AdamState zeros_like(const ParameterSet& params);
};

void adam_step(ParameterSet& params, const Gradients& grads, AdamState& state, const AdamConfig& config);

struct TrainConfig {
  LossKind loss = LossKind::SoftCrossEntropy;
  BrierTarget brier_target = BrierTarget::SoftLabel;
  double learning_rate = 1e-5;
  double l2 = 1e-4;
  int batch_size = 64;
  int max_epochs = 50;
  int patience = 5;
  std::uint64_t seed = 0;
  SplitFractions split;

  void validate() const;
};

// Epoch 0 is the initialisation. train_loss is the eval-mode loss over the
// training block at epoch 0 and the mean mini-batch loss afterwards;
// val_loss is always computed in eval mode.
struct HistoryRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  ParameterSet params;  // parameters of best_epoch
  InputNormalizer normalizer;
  DataSplit split;
  std::vector<HistoryRow> history;
  int best_epoch = 0;
  bool stopped_early = false;
};

// Mini-batch training on the chronological training block of one subject,
// restricted to scored epochs. Training stops once `patience` consecutive
// epochs fail to improve the validation loss.
TrainResult train_subject(const EpochSeries& series, const SoftLabelSeries& labels, const NetworkSpec& spec,
                          const TrainConfig& config);

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;  // flat index over ParameterSet::weights
  std::size_t checked = 0;
};

// Central differences of the train-mode loss (dropout masks replayed from
// `seed` for every evaluation) against backward().
// relative error = |a - n| / max(|a|, |n|, floor)
GradientCheckResult check_gradients(const NetworkSpec& spec, const ParameterSet& params, const Matrix& inputs,
                                    std::span<const double> targets, LossKind kind, std::uint64_t seed,
                                    double step = 1e-4, double floor = 1e-6);

}  // namespace somnolog
