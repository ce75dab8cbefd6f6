#include "somnolog/network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "somnolog/error.hpp"
#include "somnolog/weak_supervision.hpp"

namespace somnolog {

namespace {

enum class Init { FanInUniform, Zeros, Ones, LstmBias };

struct Slot {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Init init = Init::Zeros;
  double fan_in = 1.0;
};

struct Registry {
  std::vector<Slot> weights;
  std::vector<Slot> buffers;

  std::size_t add_weight(Slot slot) {
    weights.push_back(std::move(slot));
    return weights.size() - 1;
  }
  std::size_t add_buffer(Slot slot) {
    buffers.push_back(std::move(slot));
    return buffers.size() - 1;
  }
};

Matrix sigmoid(const Matrix& z) { return (1.0 + (-z.array()).exp()).inverse().matrix(); }

class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  const std::string& name() const { return name_; }
  virtual Matrix forward(const ParameterSet& params, const Matrix& x, Mode mode, Rng& rng,
                         LayerCache& cache) const = 0;
  virtual Matrix backward(const ParameterSet& params, const LayerCache& cache, const Matrix& grad,
                          Gradients& grads) const = 0;
  virtual void update_running(ParameterSet&, const LayerCache&, double) const {}

 private:
  std::string name_;
};

class Dense final : public Layer {
 public:
  Dense(Registry& reg, const std::string& name, Eigen::Index in, Eigen::Index out) : Layer(name) {
    weight_ = reg.add_weight({name + ".weight", out, in, Init::FanInUniform, static_cast<double>(in)});
    bias_ = reg.add_weight({name + ".bias", out, 1, Init::Zeros, 1.0});
  }

  Matrix forward(const ParameterSet& params, const Matrix& x, Mode, Rng&, LayerCache& cache) const override {
    cache.input = x;
    Matrix y = params.weights[weight_].value * x;
    y.colwise() += params.weights[bias_].value.col(0);
    return y;
  }

  Matrix backward(const ParameterSet& params, const LayerCache& cache, const Matrix& grad,
                  Gradients& grads) const override {
    grads[weight_].noalias() += grad * cache.input.transpose();
    grads[bias_] += grad.rowwise().sum();
    return params.weights[weight_].value.transpose() * grad;
  }

 private:
  std::size_t weight_;
  std::size_t bias_;
};

class BatchNorm final : public Layer {
 public:
  BatchNorm(Registry& reg, const std::string& name, Eigen::Index features, double epsilon, double momentum)
      : Layer(name), epsilon_(epsilon), momentum_(momentum) {
    gamma_ = reg.add_weight({name + ".gamma", features, 1, Init::Ones, 1.0});
    beta_ = reg.add_weight({name + ".beta", features, 1, Init::Zeros, 1.0});
    running_mean_ = reg.add_buffer({name + ".running_mean", features, 1, Init::Zeros, 1.0});
    running_var_ = reg.add_buffer({name + ".running_var", features, 1, Init::Ones, 1.0});
  }

  Matrix forward(const ParameterSet& params, const Matrix& x, Mode mode, Rng&, LayerCache& cache) const override {
    const Eigen::Index n = x.cols();
    Eigen::VectorXd mean, inv_std;
    cache.saved.clear();
    if (mode == Mode::Train) {
      mean = x.rowwise().mean();
      const Matrix centered = x.colwise() - mean;
      const Eigen::VectorXd biased = centered.array().square().rowwise().sum().matrix() / static_cast<double>(n);
      inv_std = (biased.array() + epsilon_).rsqrt().matrix();
      const Eigen::VectorXd unbiased = n > 1 ? Eigen::VectorXd(biased * (static_cast<double>(n) / (n - 1))) : biased;
      cache.saved = {Matrix(), inv_std, mean, unbiased};
    } else {
      mean = params.buffers[running_mean_].value.col(0);
      inv_std = (params.buffers[running_var_].value.col(0).array() + epsilon_).rsqrt().matrix();
      cache.saved = {Matrix(), inv_std};
    }
    Matrix xhat = (x.colwise() - mean).array().colwise() * inv_std.array();
    Matrix y = xhat.array().colwise() * params.weights[gamma_].value.col(0).array();
    y.colwise() += params.weights[beta_].value.col(0);
    cache.saved[0] = std::move(xhat);
    return y;
  }

  Matrix backward(const ParameterSet& params, const LayerCache& cache, const Matrix& grad,
                  Gradients& grads) const override {
    const Matrix& xhat = cache.saved[0];
    const Eigen::VectorXd inv_std = cache.saved[1].col(0);
    const Eigen::VectorXd gamma = params.weights[gamma_].value.col(0);
    grads[gamma_] += (grad.array() * xhat.array()).rowwise().sum().matrix();
    grads[beta_] += grad.rowwise().sum();
    const Matrix dxhat = grad.array().colwise() * gamma.array();
    if (cache.saved.size() == 2) {
      return dxhat.array().colwise() * inv_std.array();
    }
    const double n = static_cast<double>(grad.cols());
    const Eigen::VectorXd sum_d = dxhat.rowwise().sum();
    const Eigen::VectorXd sum_dx = (dxhat.array() * xhat.array()).rowwise().sum().matrix();
    Matrix dx = n * dxhat;
    dx.colwise() -= sum_d;
    dx -= (xhat.array().colwise() * sum_dx.array()).matrix();
    return (dx.array().colwise() * (inv_std.array() / n)).matrix();
  }

  void update_running(ParameterSet& params, const LayerCache& cache, double) const override {
    if (cache.saved.size() != 4) return;
    Matrix& mean = params.buffers[running_mean_].value;
    Matrix& var = params.buffers[running_var_].value;
    mean = momentum_ * mean + (1.0 - momentum_) * cache.saved[2];
    var = momentum_ * var + (1.0 - momentum_) * cache.saved[3];
  }

 private:
  double epsilon_;
  double momentum_;
  std::size_t gamma_, beta_, running_mean_, running_var_;
};

class Relu final : public Layer {
 public:
  using Layer::Layer;

  Matrix forward(const ParameterSet&, const Matrix& x, Mode, Rng&, LayerCache& cache) const override {
    cache.output = x.cwiseMax(0.0);
    return cache.output;
  }

  Matrix backward(const ParameterSet&, const LayerCache& cache, const Matrix& grad, Gradients&) const override {
    return (cache.output.array() > 0.0).select(grad, 0.0);
  }
};

// Inverted dropout: kept units are scaled by 1 / (1 - rate).
class Dropout final : public Layer {
 public:
  Dropout(const std::string& name, double rate) : Layer(name), rate_(rate) {}

  Matrix forward(const ParameterSet&, const Matrix& x, Mode mode, Rng& rng, LayerCache& cache) const override {
    cache.saved.clear();
    if (mode == Mode::Eval || rate_ == 0.0) return x;
    const double keep = 1.0 - rate_;
    const double scale = 1.0 / keep;
    Matrix mask(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      for (Eigen::Index i = 0; i < x.rows(); ++i) mask(i, j) = rng.bernoulli(keep) ? scale : 0.0;
    }
    cache.saved.push_back(mask);
    return x.cwiseProduct(mask);
  }

  Matrix backward(const ParameterSet&, const LayerCache& cache, const Matrix& grad, Gradients&) const override {
    if (cache.saved.empty()) return grad;
    return grad.cwiseProduct(cache.saved[0]);
  }

 private:
  double rate_;
};

// Valid (no padding, stride 1) 1-D convolution. Activations are stored
// channel-major: row c * length + l.
class Conv1d final : public Layer {
 public:
  Conv1d(Registry& reg, const std::string& name, Eigen::Index in_channels, Eigen::Index out_channels,
         Eigen::Index kernel, Eigen::Index in_length)
      : Layer(name),
        in_channels_(in_channels),
        out_channels_(out_channels),
        kernel_(kernel),
        in_length_(in_length),
        out_length_(in_length - kernel + 1) {
    weight_ = reg.add_weight({name + ".weight", out_channels, in_channels * kernel, Init::FanInUniform,
                              static_cast<double>(in_channels * kernel)});
    bias_ = reg.add_weight({name + ".bias", out_channels, 1, Init::Zeros, 1.0});
  }

  Eigen::Index out_features() const { return out_channels_ * out_length_; }

  Matrix forward(const ParameterSet& params, const Matrix& x, Mode, Rng&, LayerCache& cache) const override {
    const Eigen::Index batch = x.cols();
    Matrix cols(in_channels_ * kernel_, out_length_ * batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index c = 0; c < in_channels_; ++c) {
        for (Eigen::Index j = 0; j < kernel_; ++j) {
          for (Eigen::Index l = 0; l < out_length_; ++l) {
            cols(c * kernel_ + j, b * out_length_ + l) = x(c * in_length_ + l + j, b);
          }
        }
      }
    }
    Matrix y = params.weights[weight_].value * cols;
    y.colwise() += params.weights[bias_].value.col(0);
    Matrix out(out_channels_ * out_length_, batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index o = 0; o < out_channels_; ++o) {
        for (Eigen::Index l = 0; l < out_length_; ++l) out(o * out_length_ + l, b) = y(o, b * out_length_ + l);
      }
    }
    cache.saved.assign(1, std::move(cols));
    return out;
  }

  Matrix backward(const ParameterSet& params, const LayerCache& cache, const Matrix& grad,
                  Gradients& grads) const override {
    const Eigen::Index batch = grad.cols();
    Matrix g(out_channels_, out_length_ * batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index o = 0; o < out_channels_; ++o) {
        for (Eigen::Index l = 0; l < out_length_; ++l) g(o, b * out_length_ + l) = grad(o * out_length_ + l, b);
      }
    }
    grads[weight_].noalias() += g * cache.saved[0].transpose();
    grads[bias_] += g.rowwise().sum();
    const Matrix dcols = params.weights[weight_].value.transpose() * g;
    Matrix dx = Matrix::Zero(in_channels_ * in_length_, batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index c = 0; c < in_channels_; ++c) {
        for (Eigen::Index j = 0; j < kernel_; ++j) {
          for (Eigen::Index l = 0; l < out_length_; ++l) {
            dx(c * in_length_ + l + j, b) += dcols(c * kernel_ + j, b * out_length_ + l);
          }
        }
      }
    }
    return dx;
  }

 private:
  Eigen::Index in_channels_, out_channels_, kernel_, in_length_, out_length_;
  std::size_t weight_, bias_;
};

// Single-layer LSTM over a univariate window. Input rows are ordered
// x_t, x_{t-1}, ..., x_{t-h}; the recurrence runs from x_{t-h} to x_t and
// emits the final hidden state. Gate order in the stacked weights: input,
// forget, cell, output.
class Lstm final : public Layer {
 public:
  Lstm(Registry& reg, const std::string& name, Eigen::Index hidden, Eigen::Index steps)
      : Layer(name), hidden_(hidden), steps_(steps) {
    const double fan_in = static_cast<double>(hidden);
    w_input_ = reg.add_weight({name + ".w_input", 4 * hidden, 1, Init::FanInUniform, fan_in});
    w_hidden_ = reg.add_weight({name + ".w_hidden", 4 * hidden, hidden, Init::FanInUniform, fan_in});
    bias_ = reg.add_weight({name + ".bias", 4 * hidden, 1, Init::LstmBias, fan_in});
  }

  Matrix forward(const ParameterSet& params, const Matrix& x, Mode, Rng&, LayerCache& cache) const override {
    const Eigen::Index batch = x.cols();
    const Eigen::Index H = hidden_;
    const Matrix& wx = params.weights[w_input_].value;
    const Matrix& wh = params.weights[w_hidden_].value;
    const Eigen::VectorXd b = params.weights[bias_].value.col(0);
    cache.input = x;
    cache.saved.assign(static_cast<std::size_t>(3 * steps_), Matrix());
    Matrix h = Matrix::Zero(H, batch);
    Matrix c = Matrix::Zero(H, batch);
    for (Eigen::Index s = 0; s < steps_; ++s) {
      Matrix z = wx * x.row(steps_ - 1 - s);
      z.noalias() += wh * h;
      z.colwise() += b;
      Matrix act(4 * H, batch);
      act.topRows(2 * H) = sigmoid(z.topRows(2 * H));
      act.middleRows(2 * H, H) = z.middleRows(2 * H, H).array().tanh().matrix();
      act.bottomRows(H) = sigmoid(z.bottomRows(H));
      c = act.middleRows(H, H).cwiseProduct(c) + act.topRows(H).cwiseProduct(act.middleRows(2 * H, H));
      h = act.bottomRows(H).cwiseProduct(c.array().tanh().matrix());
      cache.saved[static_cast<std::size_t>(s)] = std::move(act);
      cache.saved[static_cast<std::size_t>(steps_ + s)] = c;
      cache.saved[static_cast<std::size_t>(2 * steps_ + s)] = h;
    }
    return h;
  }

  Matrix backward(const ParameterSet& params, const LayerCache& cache, const Matrix& grad,
                  Gradients& grads) const override {
    const Eigen::Index batch = grad.cols();
    const Eigen::Index H = hidden_;
    const Matrix& wx = params.weights[w_input_].value;
    const Matrix& wh = params.weights[w_hidden_].value;
    Matrix dx = Matrix::Zero(steps_, batch);
    Matrix dh = grad;
    Matrix dc = Matrix::Zero(H, batch);
    const Matrix zeros = Matrix::Zero(H, batch);
    for (Eigen::Index s = steps_ - 1; s >= 0; --s) {
      const auto idx = static_cast<std::size_t>(s);
      const Matrix& act = cache.saved[idx];
      const Matrix& c = cache.saved[static_cast<std::size_t>(steps_) + idx];
      const Matrix& c_prev = s > 0 ? cache.saved[static_cast<std::size_t>(steps_) + idx - 1] : zeros;
      const Matrix& h_prev = s > 0 ? cache.saved[static_cast<std::size_t>(2 * steps_) + idx - 1] : zeros;
      const auto i = act.topRows(H).array();
      const auto f = act.middleRows(H, H).array();
      const auto g = act.middleRows(2 * H, H).array();
      const auto o = act.bottomRows(H).array();
      const Eigen::ArrayXXd tc = c.array().tanh();

      dc.array() += dh.array() * o * (1.0 - tc.square());
      Matrix dz(4 * H, batch);
      dz.topRows(H) = (dc.array() * g * i * (1.0 - i)).matrix();
      dz.middleRows(H, H) = (dc.array() * c_prev.array() * f * (1.0 - f)).matrix();
      dz.middleRows(2 * H, H) = (dc.array() * i * (1.0 - g.square())).matrix();
      dz.bottomRows(H) = (dh.array() * tc * o * (1.0 - o)).matrix();

      const Matrix x_s = cache.input.row(steps_ - 1 - s);
      grads[w_input_].noalias() += dz * x_s.transpose();
      grads[w_hidden_].noalias() += dz * h_prev.transpose();
      grads[bias_] += dz.rowwise().sum();
      dx.row(steps_ - 1 - s) = wx.transpose() * dz;
      dh = wh.transpose() * dz;
      dc = (dc.array() * f).matrix();
    }
    return dx;
  }

 private:
  Eigen::Index hidden_, steps_;
  std::size_t w_input_, w_hidden_, bias_;
};

const Matrix& find_array(const std::vector<NamedArray>& arrays, std::string_view name) {
  for (const auto& a : arrays) {
    if (a.name == name) return a.value;
  }
  throw Error(ErrorCode::InvalidArgument, "no parameter array named '" + std::string(name) + "'");
}

}  // namespace

struct Network::Impl {
  Registry registry;
  std::vector<std::unique_ptr<Layer>> layers;
};

std::string_view architecture_key(Architecture architecture) {
  switch (architecture) {
    case Architecture::Mlp: return "mlp";
    case Architecture::Cnn: return "cnn";
    case Architecture::Lstm: return "lstm";
  }
  return "unknown";
}

Architecture parse_architecture(std::string_view key) {
  if (key == "mlp") return Architecture::Mlp;
  if (key == "cnn") return Architecture::Cnn;
  if (key == "lstm") return Architecture::Lstm;
  throw Error(ErrorCode::InvalidArgument, "unknown architecture '" + std::string(key) + "'");
}

NetworkSpec NetworkSpec::defaults(Architecture architecture, int input_length) {
  NetworkSpec spec;
  spec.architecture = architecture;
  spec.input_length = input_length;
  spec.dense_widths = architecture == Architecture::Mlp ? std::vector<int>{64, 64} : std::vector<int>{64};
  spec.conv_channels = architecture == Architecture::Cnn ? std::vector<int>{8, 16} : std::vector<int>{};
  return spec;
}

void NetworkSpec::validate() const {
  if (input_length < 1) throw Error(ErrorCode::Contract, "network: input_length must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error(ErrorCode::Contract, "network: dropout rate must lie in [0, 1)");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw Error(ErrorCode::Contract, "network: temperature must be > 0");
  }
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0) || !(bn_epsilon > 0.0)) {
    throw Error(ErrorCode::Contract, "network: invalid batch-norm settings");
  }
  if (dense_widths.empty()) throw Error(ErrorCode::Contract, "network: at least one fully connected layer required");
  for (int w : dense_widths) {
    if (w < 1) throw Error(ErrorCode::Contract, "network: layer widths must be >= 1");
  }
  if (architecture == Architecture::Cnn) {
    if (conv_channels.empty() || conv_kernel < 1) throw Error(ErrorCode::Contract, "network: CNN needs conv layers");
    int length = input_length;
    for (int ch : conv_channels) {
      if (ch < 1) throw Error(ErrorCode::Contract, "network: channel counts must be >= 1");
      length -= conv_kernel - 1;
    }
    if (length < 1) throw Error(ErrorCode::Contract, "network: convolutions shrink the window below one step");
  }
  if (architecture == Architecture::Lstm && lstm_hidden < 1) {
    throw Error(ErrorCode::Contract, "network: lstm_hidden must be >= 1");
  }
}

const Matrix& ParameterSet::weight(std::string_view name) const { return find_array(weights, name); }

Matrix& ParameterSet::weight(std::string_view name) {
  return const_cast<Matrix&>(find_array(weights, name));
}

const Matrix& ParameterSet::buffer(std::string_view name) const { return find_array(buffers, name); }

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& w : weights) n += static_cast<std::size_t>(w.value.size());
  return n;
}

bool ParameterSet::all_finite() const {
  const auto finite = [](const NamedArray& a) { return a.value.allFinite(); };
  return std::all_of(weights.begin(), weights.end(), finite) && std::all_of(buffers.begin(), buffers.end(), finite);
}

Network::Network(NetworkSpec spec) : spec_(std::move(spec)), impl_(std::make_unique<Impl>()) {
  spec_.validate();
  Registry& reg = impl_->registry;
  auto& layers = impl_->layers;
  Eigen::Index features = spec_.input_length;

  if (spec_.architecture == Architecture::Cnn) {
    Eigen::Index channels = 1;
    Eigen::Index length = spec_.input_length;
    for (std::size_t i = 0; i < spec_.conv_channels.size(); ++i) {
      const std::string n = "conv" + std::to_string(i + 1);
      auto conv = std::make_unique<Conv1d>(reg, n, channels, spec_.conv_channels[i], spec_.conv_kernel, length);
      features = conv->out_features();
      length -= spec_.conv_kernel - 1;
      channels = spec_.conv_channels[i];
      layers.push_back(std::move(conv));
      layers.push_back(std::make_unique<Relu>(n + ".relu"));
    }
  } else if (spec_.architecture == Architecture::Lstm) {
    layers.push_back(std::make_unique<Lstm>(reg, "lstm", spec_.lstm_hidden, spec_.input_length));
    features = spec_.lstm_hidden;
  }

  for (std::size_t i = 0; i < spec_.dense_widths.size(); ++i) {
    const std::string n = "fc" + std::to_string(i + 1);
    const Eigen::Index width = spec_.dense_widths[i];
    layers.push_back(std::make_unique<Dense>(reg, n, features, width));
    layers.push_back(std::make_unique<BatchNorm>(reg, n + ".bn", width, spec_.bn_epsilon, spec_.bn_momentum));
    layers.push_back(std::make_unique<Relu>(n + ".relu"));
    layers.push_back(std::make_unique<Dropout>(n + ".dropout", spec_.dropout));
    features = width;
  }
  layers.push_back(std::make_unique<Dense>(reg, "out", features, 1));
}

Network::~Network() = default;
Network::Network(Network&&) noexcept = default;
Network& Network::operator=(Network&&) noexcept = default;

std::vector<std::string> Network::layer_names() const {
  std::vector<std::string> names;
  for (const auto& layer : impl_->layers) names.push_back(layer->name());
  return names;
}

ParameterSet Network::initialize(std::uint64_t seed) const {
  Rng rng(seed);
  const auto make = [&rng](const Slot& slot) {
    Matrix m(slot.rows, slot.cols);
    switch (slot.init) {
      case Init::FanInUniform: {
        const double bound = 1.0 / std::sqrt(slot.fan_in);
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
          for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = bound * (2.0 * rng.uniform() - 1.0);
        }
        break;
      }
      case Init::Zeros: m.setZero(); break;
      case Init::Ones: m.setOnes(); break;
      case Init::LstmBias: {
        m.setZero();
        const Eigen::Index hidden = slot.rows / 4;
        m.middleRows(hidden, hidden).setOnes();
        break;
      }
    }
    return NamedArray{slot.name, std::move(m)};
  };
  ParameterSet params;
  for (const auto& slot : impl_->registry.weights) params.weights.push_back(make(slot));
  for (const auto& slot : impl_->registry.buffers) params.buffers.push_back(make(slot));
  return params;
}

ForwardResult Network::forward(const ParameterSet& params, const Matrix& inputs, Mode mode, Rng& rng) const {
  if (inputs.rows() != spec_.input_length) {
    throw Error(ErrorCode::Contract, "network: expected " + std::to_string(spec_.input_length) + " inputs per window, got " +
                                         std::to_string(inputs.rows()));
  }
  if (params.weights.size() != impl_->registry.weights.size() ||
      params.buffers.size() != impl_->registry.buffers.size()) {
    throw Error(ErrorCode::Contract, "network: parameter set does not match the network spec");
  }
  ForwardResult result;
  result.cache.mode = mode;
  result.cache.layers.resize(impl_->layers.size());
  Matrix x = inputs;
  if (!x.allFinite()) throw Error(ErrorCode::Numeric, "network: non-finite input");
  for (std::size_t i = 0; i < impl_->layers.size(); ++i) {
    x = impl_->layers[i]->forward(params, x, mode, rng, result.cache.layers[i]);
    if (!x.allFinite()) {
      throw Error(ErrorCode::Numeric, "network: non-finite activation at layer " + std::to_string(i) + " (" +
                                          impl_->layers[i]->name() + ")");
    }
  }
  const Eigen::RowVectorXd z = x.row(0);
  result.cache.sigmoid = (1.0 + (-z.array() / spec_.temperature).exp()).inverse().matrix();
  result.cache.populated = true;
  result.logits.assign(z.data(), z.data() + z.size());
  result.probabilities.resize(static_cast<std::size_t>(z.size()));
  for (Eigen::Index b = 0; b < z.size(); ++b) {
    result.probabilities[static_cast<std::size_t>(b)] = clamp_probability(result.cache.sigmoid(b));
  }
  return result;
}

Gradients Network::backward(const ParameterSet& params, const ForwardCache& cache,
                            std::span<const double> upstream) const {
  if (!cache.populated || cache.layers.size() != impl_->layers.size()) {
    throw Error(ErrorCode::Contract, "network: backward requires the cache of a forward pass");
  }
  if (upstream.size() != static_cast<std::size_t>(cache.sigmoid.size())) {
    throw Error(ErrorCode::Contract, "network: upstream gradient length differs from batch size");
  }
  Gradients grads;
  for (const auto& w : params.weights) grads.push_back(Matrix::Zero(w.value.rows(), w.value.cols()));
  Matrix g(1, cache.sigmoid.size());
  for (Eigen::Index b = 0; b < g.cols(); ++b) {
    const double s = cache.sigmoid(b);
    g(0, b) = upstream[static_cast<std::size_t>(b)] * s * (1.0 - s) / spec_.temperature;
  }
  for (std::size_t i = impl_->layers.size(); i-- > 0;) {
    g = impl_->layers[i]->backward(params, cache.layers[i], g, grads);
  }
  return grads;
}

void Network::update_running_statistics(ParameterSet& params, const ForwardCache& cache) const {
  if (cache.mode != Mode::Train || cache.layers.size() != impl_->layers.size()) return;
  for (std::size_t i = 0; i < impl_->layers.size(); ++i) {
    impl_->layers[i]->update_running(params, cache.layers[i], spec_.bn_momentum);
  }
}

double tempered_sigmoid(double z, double temperature) {
  if (!(temperature > 0.0)) throw Error(ErrorCode::Contract, "temperature must be > 0");
  return 1.0 / (1.0 + std::exp(-z / temperature));
}

ParameterSet build_network(const NetworkSpec& spec, std::uint64_t seed) { return Network(spec).initialize(seed); }

ForwardResult forward(const NetworkSpec& spec, const ParameterSet& params, const Matrix& inputs, Mode mode,
                      Rng& rng) {
  return Network(spec).forward(params, inputs, mode, rng);
}

Gradients backward(const NetworkSpec& spec, const ParameterSet& params, const ForwardCache& cache,
                   std::span<const double> upstream) {
  return Network(spec).backward(params, cache, upstream);
}

PredictionSamples mc_predict(const NetworkSpec& spec, const ParameterSet& params, const Matrix& inputs, int samples,
                             std::uint64_t seed) {
  if (samples < 2) throw Error(ErrorCode::Contract, "mc_predict: need at least 2 samples");
  const Network network(spec);
  const Eigen::Index n = inputs.cols();
  constexpr Eigen::Index kChunk = 2048;
  PredictionSamples out;
  out.samples.resize(samples, n);
  for (int s = 0; s < samples; ++s) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(s)));
    for (Eigen::Index start = 0; start < n; start += kChunk) {
      const Eigen::Index width = std::min(kChunk, n - start);
      const ForwardResult r = network.forward(params, inputs.middleCols(start, width), Mode::MonteCarlo, rng);
      for (Eigen::Index j = 0; j < width; ++j) out.samples(s, start + j) = r.probabilities[static_cast<std::size_t>(j)];
    }
  }
  const auto count = static_cast<std::size_t>(n);
  out.mean.resize(count);
  out.variance.resize(count);
  out.std.resize(count);
  for (Eigen::Index j = 0; j < n; ++j) {
    // Shifted by the first sample so that identical samples give exactly 0.
    const double shift = out.samples(0, j);
    const Eigen::ArrayXd d = out.samples.col(j).array() - shift;
    const double mean_d = d.mean();
    const double ss = (d - mean_d).square().sum();
    const auto k = static_cast<std::size_t>(j);
    out.mean[k] = shift + mean_d;
    out.variance[k] = ss / (samples - 1);
    out.std[k] = std::sqrt(out.variance[k]);
  }
  return out;
}

InputNormalizer InputNormalizer::fit(std::span<const double> counts, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error(ErrorCode::Contract, "normalizer: no training epochs");
  double mean = 0.0;
  for (std::size_t t : indices) mean += std::log1p(counts[t]);
  mean /= static_cast<double>(indices.size());
  double ss = 0.0;
  for (std::size_t t : indices) ss += (std::log1p(counts[t]) - mean) * (std::log1p(counts[t]) - mean);
  const double sd = std::sqrt(ss / static_cast<double>(indices.size()));
  return {mean, sd > 1e-12 ? sd : 1.0};
}

double InputNormalizer::apply(double count) const { return (std::log1p(count) - mean) / stddev; }

Matrix window_matrix(std::span<const double> counts, std::span<const std::size_t> indices, int h,
                     const InputNormalizer& normalizer) {
  const auto history = static_cast<std::size_t>(h);
  Matrix m(h + 1, static_cast<Eigen::Index>(indices.size()));
  for (std::size_t c = 0; c < indices.size(); ++c) {
    const std::size_t t = indices[c];
    if (t < history || t >= counts.size()) throw Error(ErrorCode::Contract, "window index out of range");
    for (std::size_t j = 0; j <= history; ++j) {
      m(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)) = normalizer.apply(counts[t - j]);
    }
  }
  return m;
}

Matrix window_matrix(std::span<const WindowedInput> windows, const InputNormalizer& normalizer) {
  if (windows.empty()) return Matrix(0, 0);
  Matrix m(static_cast<Eigen::Index>(windows.front().values.size()), static_cast<Eigen::Index>(windows.size()));
  for (std::size_t c = 0; c < windows.size(); ++c) {
    for (std::size_t j = 0; j < windows[c].values.size(); ++j) {
      m(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)) = normalizer.apply(windows[c].values[j]);
    }
  }
  return m;
}

namespace {

nlohmann::json arrays_to_json(const std::vector<NamedArray>& arrays) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& a : arrays) {
    out.push_back({{"name", a.name},
                   {"rows", a.value.rows()},
                   {"cols", a.value.cols()},
                   {"data", std::vector<double>(a.value.data(), a.value.data() + a.value.size())}});
  }
  return out;
}

void arrays_from_json(const nlohmann::json& j, std::vector<NamedArray>& target, const std::string& what) {
  if (!j.is_array() || j.size() != target.size()) {
    throw Error(ErrorCode::Parse, "checkpoint: " + what + " do not match the network spec");
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    const auto& entry = j[i];
    if (entry.at("name").get<std::string>() != target[i].name ||
        entry.at("rows").get<Eigen::Index>() != target[i].value.rows() ||
        entry.at("cols").get<Eigen::Index>() != target[i].value.cols()) {
      throw Error(ErrorCode::Parse, "checkpoint: array '" + entry.at("name").get<std::string>() + "' has wrong shape");
    }
    const auto data = entry.at("data").get<std::vector<double>>();
    if (data.size() != static_cast<std::size_t>(target[i].value.size())) {
      throw Error(ErrorCode::Parse, "checkpoint: array '" + target[i].name + "' has wrong length");
    }
    std::copy(data.begin(), data.end(), target[i].value.data());
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const NetworkSpec& s = checkpoint.spec;
  nlohmann::json j;
  j["format"] = "somnolog-checkpoint";
  j["version"] = kCheckpointFormatVersion;
  j["subject_id"] = checkpoint.subject_id;
  j["config_hash"] = checkpoint.config_hash;
  j["spec"] = {{"architecture", std::string(architecture_key(s.architecture))},
               {"input_length", s.input_length},
               {"dense_widths", s.dense_widths},
               {"conv_kernel", s.conv_kernel},
               {"conv_channels", s.conv_channels},
               {"lstm_hidden", s.lstm_hidden},
               {"dropout", s.dropout},
               {"temperature", s.temperature},
               {"bn_momentum", s.bn_momentum},
               {"bn_epsilon", s.bn_epsilon}};
  j["normalizer"] = {{"mean", checkpoint.normalizer.mean}, {"std", checkpoint.normalizer.stddev}};
  j["weights"] = arrays_to_json(checkpoint.params.weights);
  j["buffers"] = arrays_to_json(checkpoint.params.buffers);
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write checkpoint: " + path.string());
  out << j.dump(1) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open checkpoint: " + path.string());
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    if (j.at("format") != "somnolog-checkpoint" || j.at("version") != kCheckpointFormatVersion) {
      throw Error(ErrorCode::Parse, "checkpoint: unsupported format in " + path.string());
    }
    Checkpoint c;
    const auto& s = j.at("spec");
    c.spec.architecture = parse_architecture(s.at("architecture").get<std::string>());
    c.spec.input_length = s.at("input_length").get<int>();
    c.spec.dense_widths = s.at("dense_widths").get<std::vector<int>>();
    c.spec.conv_kernel = s.at("conv_kernel").get<int>();
    c.spec.conv_channels = s.at("conv_channels").get<std::vector<int>>();
    c.spec.lstm_hidden = s.at("lstm_hidden").get<int>();
    c.spec.dropout = s.at("dropout").get<double>();
    c.spec.temperature = s.at("temperature").get<double>();
    c.spec.bn_momentum = s.at("bn_momentum").get<double>();
    c.spec.bn_epsilon = s.at("bn_epsilon").get<double>();
    c.subject_id = j.at("subject_id").get<std::string>();
    c.config_hash = j.at("config_hash").get<std::string>();
    c.normalizer.mean = j.at("normalizer").at("mean").get<double>();
    c.normalizer.stddev = j.at("normalizer").at("std").get<double>();
    c.params = Network(c.spec).initialize(0);
    arrays_from_json(j.at("weights"), c.params.weights, "weights");
    arrays_from_json(j.at("buffers"), c.params.buffers, "buffers");
    if (!c.params.all_finite()) throw Error(ErrorCode::Parse, "checkpoint: non-finite parameters");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, "checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace somnolog
