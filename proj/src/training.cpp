#include "somnolog/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "somnolog/error.hpp"

namespace somnolog {

std::string_view loss_key(LossKind kind) {
  switch (kind) {
    case LossKind::SoftCrossEntropy: return "soft-ce";
    case LossKind::HardCrossEntropy: return "hard-ce";
    case LossKind::BrierScore: return "brier";
  }
  return "unknown";
}

LossKind parse_loss(std::string_view key) {
  if (key == "soft-ce") return LossKind::SoftCrossEntropy;
  if (key == "hard-ce") return LossKind::HardCrossEntropy;
  if (key == "brier") return LossKind::BrierScore;
  throw Error(ErrorCode::InvalidArgument, "unknown loss '" + std::string(key) + "' (soft-ce, hard-ce, brier)");
}

std::string_view brier_target_key(BrierTarget target) {
  return target == BrierTarget::SoftLabel ? "soft" : "majority";
}

BrierTarget parse_brier_target(std::string_view key) {
  if (key == "soft") return BrierTarget::SoftLabel;
  if (key == "majority") return BrierTarget::Majority;
  throw Error(ErrorCode::InvalidArgument, "unknown brier target '" + std::string(key) + "' (soft, majority)");
}

std::vector<double> loss_targets(LossKind kind, const SoftLabelSeries& labels, std::span<const std::size_t> indices,
                                 BrierTarget brier_target) {
  const bool hard = kind == LossKind::HardCrossEntropy ||
                    (kind == LossKind::BrierScore && brier_target == BrierTarget::Majority);
  std::vector<double> out;
  out.reserve(indices.size());
  for (std::size_t t : indices) {
    if (t >= labels.size() || !labels.scored(t)) {
      throw Error(ErrorCode::Contract, "loss target requested for unscored epoch " + std::to_string(t));
    }
    out.push_back(hard ? static_cast<double>(labels.majority[t]) : labels.p_hat[t]);
  }
  return out;
}

namespace {

void check_lengths(std::span<const double> f, std::span<const double> targets) {
  if (f.size() != targets.size()) throw Error(ErrorCode::Contract, "loss: predictions and targets differ in length");
  if (f.empty()) throw Error(ErrorCode::Contract, "loss: empty batch");
}

}  // namespace

double loss_eval(LossKind kind, std::span<const double> f, std::span<const double> targets) {
  check_lengths(f, targets);
  double sum = 0.0;
  for (std::size_t t = 0; t < f.size(); ++t) {
    const double p = clamp_probability(f[t]);
    const double y = targets[t];
    if (kind == LossKind::BrierScore) {
      sum += (p - y) * (p - y);
    } else {
      sum -= y * std::log(p) + (1.0 - y) * std::log1p(-p);
    }
  }
  return sum / static_cast<double>(f.size());
}

std::vector<double> loss_grad(LossKind kind, std::span<const double> f, std::span<const double> targets) {
  check_lengths(f, targets);
  const double n = static_cast<double>(f.size());
  std::vector<double> g(f.size());
  for (std::size_t t = 0; t < f.size(); ++t) {
    const double p = clamp_probability(f[t]);
    const double y = targets[t];
    g[t] = kind == LossKind::BrierScore ? 2.0 * (p - y) / n : (p - y) / (p * (1.0 - p)) / n;
  }
  return g;
}

double loss_eval(LossKind kind, std::span<const double> f, const SoftLabelSeries& labels, BrierTarget brier_target) {
  if (f.size() != labels.size()) throw Error(ErrorCode::Contract, "loss: predictions and labels differ in length");
  std::vector<std::size_t> scored;
  std::vector<double> preds;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (labels.scored(t)) {
      scored.push_back(t);
      preds.push_back(f[t]);
    }
  }
  return loss_eval(kind, preds, loss_targets(kind, labels, scored, brier_target));
}

AdamState AdamState::zeros_like(const ParameterSet& params) {
  AdamState state;
  for (const auto& w : params.weights) {
    state.m.push_back(Matrix::Zero(w.value.rows(), w.value.cols()));
    state.v.push_back(Matrix::Zero(w.value.rows(), w.value.cols()));
  }
  return state;
}

void adam_step(ParameterSet& params, const Gradients& grads, AdamState& state, const AdamConfig& config) {
  if (grads.size() != params.weights.size() || state.m.size() != params.weights.size()) {
    throw Error(ErrorCode::Contract, "adam: gradient/state count does not match parameters");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].rows() != params.weights[i].value.rows() || grads[i].cols() != params.weights[i].value.cols()) {
      throw Error(ErrorCode::Contract, "adam: gradient shape mismatch for " + params.weights[i].name);
    }
    if (!grads[i].allFinite()) {
      throw Error(ErrorCode::Numeric, "adam: non-finite gradient for " + params.weights[i].name);
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Matrix& theta = params.weights[i].value;
    const Matrix g = grads[i] + config.l2 * theta;
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g.cwiseProduct(g);
    theta.array() -= config.learning_rate * (state.m[i].array() / c1) /
                     ((state.v[i].array() / c2).sqrt() + config.epsilon);
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorCode::Contract, "train: learning_rate must be > 0");
  }
  if (!(l2 >= 0.0) || !std::isfinite(l2)) throw Error(ErrorCode::Contract, "train: l2 must be >= 0");
  if (batch_size < 1) throw Error(ErrorCode::Contract, "train: batch_size must be >= 1");
  if (max_epochs < 1) throw Error(ErrorCode::Contract, "train: max_epochs must be >= 1");
  if (patience < 0) throw Error(ErrorCode::Contract, "train: patience must be >= 0");
}

namespace {

std::vector<std::size_t> scored_only(std::span<const std::size_t> indices, const SoftLabelSeries& labels) {
  std::vector<std::size_t> out;
  for (std::size_t t : indices) {
    if (labels.scored(t)) out.push_back(t);
  }
  return out;
}

double eval_loss(const Network& net, const ParameterSet& params, const Matrix& inputs,
                 std::span<const double> targets, LossKind kind) {
  constexpr Eigen::Index kChunk = 4096;
  Rng unused(0);
  double total = 0.0;
  for (Eigen::Index start = 0; start < inputs.cols(); start += kChunk) {
    const Eigen::Index width = std::min(kChunk, inputs.cols() - start);
    const ForwardResult r = net.forward(params, inputs.middleCols(start, width), Mode::Eval, unused);
    total += loss_eval(kind, r.probabilities, targets.subspan(static_cast<std::size_t>(start), r.probabilities.size())) *
             static_cast<double>(width);
  }
  return total / static_cast<double>(inputs.cols());
}

}  // namespace

TrainResult train_subject(const EpochSeries& series, const SoftLabelSeries& labels, const NetworkSpec& spec,
                          const TrainConfig& config) {
  config.validate();
  spec.validate();
  if (labels.size() != series.size()) {
    throw Error(ErrorCode::Contract, "train: soft labels and epochs differ in length for " + series.subject_id);
  }
  const int h = spec.input_length - 1;
  TrainResult result;
  result.split = split_record(series.size(), h, config.split);
  const std::vector<std::size_t> train_idx = scored_only(result.split.train, labels);
  const std::vector<std::size_t> val_idx = scored_only(result.split.val, labels);
  if (train_idx.empty()) throw Error(ErrorCode::Contract, "train: empty training split for " + series.subject_id);
  if (val_idx.empty()) throw Error(ErrorCode::Contract, "train: empty validation split for " + series.subject_id);

  result.normalizer = InputNormalizer::fit(series.counts, train_idx);
  const Matrix x_train = window_matrix(series.counts, train_idx, h, result.normalizer);
  const Matrix x_val = window_matrix(series.counts, val_idx, h, result.normalizer);
  const std::vector<double> y_train = loss_targets(config.loss, labels, train_idx, config.brier_target);
  const std::vector<double> y_val = loss_targets(config.loss, labels, val_idx, config.brier_target);

  const Network net(spec);
  ParameterSet params = net.initialize(derive_seed(config.seed, "init"));
  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  Rng dropout_rng(derive_seed(config.seed, "dropout"));
  AdamState adam = AdamState::zeros_like(params);
  const AdamConfig adam_config{config.learning_rate, config.l2, 0.9, 0.999, 1e-8};

  double best_val = eval_loss(net, params, x_val, y_val, config.loss);
  result.history.push_back({0, eval_loss(net, params, x_train, y_train, config.loss), best_val});
  result.params = params;
  result.best_epoch = 0;

  const std::size_t n = train_idx.size();
  const auto batch = static_cast<std::size_t>(config.batch_size);
  std::vector<std::size_t> order(n);
  Matrix xb;
  std::vector<double> yb;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t width = std::min(batch, n - start);
      // Batch statistics are undefined for a single window.
      if (width < 2) continue;
      xb.resize(x_train.rows(), static_cast<Eigen::Index>(width));
      yb.resize(width);
      for (std::size_t j = 0; j < width; ++j) {
        xb.col(static_cast<Eigen::Index>(j)) = x_train.col(static_cast<Eigen::Index>(order[start + j]));
        yb[j] = y_train[order[start + j]];
      }
      const ForwardResult r = net.forward(params, xb, Mode::Train, dropout_rng);
      loss_sum += loss_eval(config.loss, r.probabilities, yb) * static_cast<double>(width);
      loss_count += width;
      const Gradients grads = net.backward(params, r.cache, loss_grad(config.loss, r.probabilities, yb));
      net.update_running_statistics(params, r.cache);
      adam_step(params, grads, adam, adam_config);
    }
    const double val = eval_loss(net, params, x_val, y_val, config.loss);
    const double train = loss_count > 0 ? loss_sum / static_cast<double>(loss_count)
                                        : std::numeric_limits<double>::quiet_NaN();
    result.history.push_back({epoch, train, val});
    if (val < best_val) {
      best_val = val;
      result.best_epoch = epoch;
      result.params = params;
    } else if (epoch - result.best_epoch > config.patience) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

GradientCheckResult check_gradients(const NetworkSpec& spec, const ParameterSet& params, const Matrix& inputs,
                                    std::span<const double> targets, LossKind kind, std::uint64_t seed, double step,
                                    double floor) {
  const Network net(spec);
  const auto loss_at = [&](const ParameterSet& p) {
    Rng rng(seed);
    return loss_eval(kind, net.forward(p, inputs, Mode::Train, rng).probabilities, targets);
  };
  Rng rng(seed);
  const ForwardResult r = net.forward(params, inputs, Mode::Train, rng);
  const Gradients analytic = net.backward(params, r.cache, loss_grad(kind, r.probabilities, targets));

  GradientCheckResult out;
  ParameterSet probe = params;
  std::size_t flat = 0;
  for (std::size_t i = 0; i < probe.weights.size(); ++i) {
    Matrix& w = probe.weights[i].value;
    for (Eigen::Index k = 0; k < w.size(); ++k, ++flat) {
      const double saved = w(k);
      w(k) = saved + step;
      const double up = loss_at(probe);
      w(k) = saved - step;
      const double down = loss_at(probe);
      w(k) = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[i](k);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > out.max_relative_error) {
        out.max_relative_error = rel;
        out.worst_index = flat;
      }
      ++out.checked;
    }
  }
  return out;
}

}  // namespace somnolog
