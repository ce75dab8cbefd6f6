#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "somnolog/actigraphy.hpp"
#include "somnolog/random.hpp"

namespace somnolog {

using Matrix = Eigen::MatrixXd;

enum class Architecture { Mlp, Cnn, Lstm };

std::string_view architecture_key(Architecture architecture);
Architecture parse_architecture(std::string_view key);

// Layer stacks (every fully connected hidden layer is followed by batch norm,
// ReLU and dropout; the output layer is a single unit):
//   MLP:  [dense -> bn -> relu -> dropout] x dense_widths, dense(1)
//   CNN:  [conv1d(kernel) -> relu] x conv_channels, flatten, FC block(s), dense(1)
//   LSTM: lstm(lstm_hidden) over the window in chronological order, FC block(s), dense(1)
// The output probability is sigmoid(z / temperature).
struct NetworkSpec {
  Architecture architecture = Architecture::Lstm;
  int input_length = 21;
  std::vector<int> dense_widths{64};
  int conv_kernel = 5;
  std::vector<int> conv_channels{8, 16};
  int lstm_hidden = 32;
  double dropout = 0.5;
  double temperature = 2.0;
  double bn_momentum = 0.9;
  double bn_epsilon = 1e-5;

  static NetworkSpec defaults(Architecture architecture, int input_length = 21);
  void validate() const;
};

struct NamedArray {
  std::string name;
  Matrix value;
};

// Trainable weights plus batch-norm running statistics.
struct ParameterSet {
  std::vector<NamedArray> weights;
  std::vector<NamedArray> buffers;

  const Matrix& weight(std::string_view name) const;
  Matrix& weight(std::string_view name);
  const Matrix& buffer(std::string_view name) const;
  std::size_t scalar_count() const;
  bool all_finite() const;
};

// Aligned index-for-index with ParameterSet::weights.
using Gradients = std::vector<Matrix>;

enum class Mode {
  Train,       // batch statistics, fresh dropout masks
  Eval,        // running statistics, no dropout
  MonteCarlo,  // running statistics, fresh dropout masks
};

struct LayerCache {
  Matrix input;
  Matrix output;
  std::vector<Matrix> saved;
};

struct ForwardCache {
  Mode mode = Mode::Eval;
  std::vector<LayerCache> layers;
  Eigen::RowVectorXd sigmoid;  // unclamped output probabilities
  bool populated = false;
};

struct ForwardResult {
  std::vector<double> probabilities;  // clamped into [1e-7, 1 - 1e-7]
  std::vector<double> logits;         // final affine output before temperature
  ForwardCache cache;
};

class Network {
 public:
  explicit Network(NetworkSpec spec);
  ~Network();
  Network(Network&&) noexcept;
  Network& operator=(Network&&) noexcept;

  const NetworkSpec& spec() const { return spec_; }

  // Fan-in scaled uniform weights, zero biases, unit batch-norm gain, LSTM
  // forget-gate bias 1.
  ParameterSet initialize(std::uint64_t seed) const;

  // inputs: input_length x batch, one column per window.
  ForwardResult forward(const ParameterSet& params, const Matrix& inputs, Mode mode, Rng& rng) const;

  // upstream: dL/dp for each output probability.
  Gradients backward(const ParameterSet& params, const ForwardCache& cache, std::span<const double> upstream) const;

  // Exponential moving average of the batch statistics seen by a train-mode
  // forward pass: running = momentum * running + (1 - momentum) * batch.
  void update_running_statistics(ParameterSet& params, const ForwardCache& cache) const;

  std::vector<std::string> layer_names() const;

 private:
  struct Impl;
  NetworkSpec spec_;
  std::unique_ptr<Impl> impl_;
};

double tempered_sigmoid(double z, double temperature);

ParameterSet build_network(const NetworkSpec& spec, std::uint64_t seed);
ForwardResult forward(const NetworkSpec& spec, const ParameterSet& params, const Matrix& inputs, Mode mode,
                      Rng& rng);
Gradients backward(const NetworkSpec& spec, const ParameterSet& params, const ForwardCache& cache,
                   std::span<const double> upstream);

struct PredictionSamples {
  Matrix samples;  // S x n
  std::vector<double> mean;
  std::vector<double> variance;  // S - 1 denominator
  std::vector<double> std;
};

// S stochastic passes in MonteCarlo mode. Sample s draws its masks from the
// stream derive_seed(seed, s).
PredictionSamples mc_predict(const NetworkSpec& spec, const ParameterSet& params, const Matrix& inputs, int samples,
                             std::uint64_t seed);

// log(1 + count) followed by a z-score with training statistics.
struct InputNormalizer {
  double mean = 0.0;
  double stddev = 1.0;

  static InputNormalizer fit(std::span<const double> counts, std::span<const std::size_t> indices);
  double apply(double count) const;
};

// Window matrix (h + 1 rows) for the epochs listed in `indices`, each column
// x_t, x_{t-1}, ..., x_{t-h} after normalisation.
Matrix window_matrix(std::span<const double> counts, std::span<const std::size_t> indices, int h,
                     const InputNormalizer& normalizer);
Matrix window_matrix(std::span<const WindowedInput> windows, const InputNormalizer& normalizer);

struct Checkpoint {
  NetworkSpec spec;
  ParameterSet params;
  InputNormalizer normalizer;
  std::string subject_id;
  std::string config_hash;
};

inline constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace somnolog
