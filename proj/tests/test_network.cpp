#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <unistd.h>

#include "somnolog/error.hpp"
#include "somnolog/network.hpp"
#include "somnolog/training.hpp"

using namespace somnolog;

namespace {

NetworkSpec toy_spec(Architecture architecture, double dropout = 0.3) {
  NetworkSpec spec = NetworkSpec::defaults(architecture, 9);
  spec.dense_widths = architecture == Architecture::Mlp ? std::vector<int>{6, 5} : std::vector<int>{5};
  spec.conv_kernel = 3;
  spec.conv_channels = architecture == Architecture::Cnn ? std::vector<int>{2, 3} : std::vector<int>{};
  spec.lstm_hidden = 4;
  spec.dropout = dropout;
  return spec;
}

Matrix random_inputs(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  Matrix x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  return x;
}

std::vector<double> random_targets(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> y(n);
  for (auto& v : y) v = rng.uniform();
  return y;
}

constexpr std::array<Architecture, 3> kArchitectures{Architecture::Mlp, Architecture::Cnn, Architecture::Lstm};

}  // namespace

TEST_CASE("default layer shapes") {
  const NetworkSpec spec = NetworkSpec::defaults(Architecture::Mlp, 21);
  const ParameterSet p = build_network(spec, 1);
  CHECK(p.weight("fc1.weight").rows() == 64);
  CHECK(p.weight("fc1.weight").cols() == 21);
  CHECK(p.weight("fc2.weight").rows() == 64);
  CHECK(p.weight("fc2.weight").cols() == 64);
  CHECK(p.weight("out.weight").rows() == 1);
  CHECK(p.weight("out.weight").cols() == 64);
  CHECK(p.buffer("fc1.bn.running_var").isOnes());

  const ParameterSet lstm = build_network(NetworkSpec::defaults(Architecture::Lstm, 21), 1);
  CHECK(lstm.weight("lstm.w_hidden").rows() == 128);
  CHECK(lstm.weight("lstm.w_hidden").cols() == 32);
  const ParameterSet cnn = build_network(NetworkSpec::defaults(Architecture::Cnn, 21), 1);
  CHECK(cnn.weight("conv2.weight").rows() == 16);
  CHECK(cnn.weight("conv2.weight").cols() == 8 * 5);
  CHECK(cnn.weight("fc1.weight").cols() == 16 * 13);
}

TEST_CASE("initialisation is a function of the seed") {
  for (Architecture a : kArchitectures) {
    const NetworkSpec spec = NetworkSpec::defaults(a, 21);
    const ParameterSet p1 = build_network(spec, 42);
    const ParameterSet p2 = build_network(spec, 42);
    const ParameterSet p3 = build_network(spec, 43);
    REQUIRE(p1.weights.size() == p2.weights.size());
    bool any_different = false;
    for (std::size_t i = 0; i < p1.weights.size(); ++i) {
      CHECK(p1.weights[i].value == p2.weights[i].value);
      if (p1.weights[i].value != p3.weights[i].value) any_different = true;
    }
    CHECK(any_different);
  }
}

TEST_CASE("spec validation") {
  NetworkSpec spec = NetworkSpec::defaults(Architecture::Mlp);
  spec.temperature = 0.0;
  CHECK_THROWS_AS(Network{spec}, Error);
  spec.temperature = -1.0;
  CHECK_THROWS_AS(Network{spec}, Error);
  spec = NetworkSpec::defaults(Architecture::Mlp);
  spec.dropout = 1.0;
  CHECK_THROWS_AS(Network{spec}, Error);
  spec = NetworkSpec::defaults(Architecture::Cnn, 5);
  CHECK_THROWS_AS(Network{spec}, Error);
  CHECK_THROWS_AS(parse_architecture("gru"), Error);
}

TEST_CASE("zero output layer yields one half") {
  const NetworkSpec spec = NetworkSpec::defaults(Architecture::Lstm, 21);
  ParameterSet p = build_network(spec, 3);
  p.weight("out.weight").setZero();
  p.weight("out.bias").setZero();
  Rng rng(0);
  const ForwardResult r = forward(spec, p, random_inputs(21, 10, 1), Mode::Eval, rng);
  for (double prob : r.probabilities) CHECK(prob == 0.5);
}

TEST_CASE("eval mode is deterministic and ignores the random stream") {
  for (Architecture a : kArchitectures) {
    const NetworkSpec spec = NetworkSpec::defaults(a, 21);
    const ParameterSet p = build_network(spec, 5);
    const Matrix x = random_inputs(21, 16, 2);
    Rng r1(1), r2(999);
    CHECK(forward(spec, p, x, Mode::Eval, r1).probabilities == forward(spec, p, x, Mode::Eval, r2).probabilities);
  }
}

TEST_CASE("without dropout, monte carlo mode equals eval mode") {
  NetworkSpec spec = NetworkSpec::defaults(Architecture::Mlp, 21);
  spec.dropout = 0.0;
  const ParameterSet p = build_network(spec, 5);
  const Matrix x = random_inputs(21, 8, 3);
  Rng rng(1);
  const ForwardResult eval = forward(spec, p, x, Mode::Eval, rng);
  const ForwardResult mc = forward(spec, p, x, Mode::MonteCarlo, rng);
  CHECK(eval.probabilities == mc.probabilities);
  const PredictionSamples s = mc_predict(spec, p, x, 5, 9);
  for (double v : s.variance) CHECK(v == 0.0);
}

TEST_CASE("batch norm: train mode normalises the batch") {
  NetworkSpec spec = NetworkSpec::defaults(Architecture::Mlp, 21);
  spec.dropout = 0.0;
  Network net(spec);
  ParameterSet p = net.initialize(8);
  Rng rng(0);
  const Matrix x = random_inputs(21, 64, 4);
  const ForwardResult r = net.forward(p, x, Mode::Train, rng);
  // Layer 1 is fc1.bn; it keeps the normalised batch and the batch mean.
  const LayerCache& bn = r.cache.layers[1];
  REQUIRE(bn.saved.size() == 4);
  for (Eigen::Index i = 0; i < bn.saved[0].rows(); ++i) CHECK(std::abs(bn.saved[0].row(i).mean()) < 1e-10);
  net.update_running_statistics(p, r.cache);
  const Matrix& running = p.buffer("fc1.bn.running_mean");
  for (Eigen::Index i = 0; i < running.rows(); ++i) {
    CHECK(running(i, 0) == doctest::Approx(0.1 * bn.saved[2](i, 0)).epsilon(1e-12));
  }
}

TEST_CASE("gradient check for every architecture and loss") {
  const std::array<LossKind, 3> losses{LossKind::SoftCrossEntropy, LossKind::HardCrossEntropy, LossKind::BrierScore};
  for (Architecture a : kArchitectures) {
    const NetworkSpec spec = toy_spec(a);
    const ParameterSet p = build_network(spec, 17);
    const Matrix x = random_inputs(9, 6, 18);
    std::vector<double> y = random_targets(6, 19);
    for (LossKind kind : losses) {
      if (kind == LossKind::HardCrossEntropy) {
        for (auto& v : y) v = v > 0.5 ? 1.0 : 0.0;
      }
      const GradientCheckResult g = check_gradients(spec, p, x, y, kind, 23);
      CAPTURE(architecture_key(a));
      CAPTURE(loss_key(kind));
      CHECK(g.checked == p.scalar_count());
      CHECK(g.max_relative_error < 1e-4);
    }
  }
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
  for (Architecture a : kArchitectures) {
    const NetworkSpec spec = toy_spec(a);
    const Network net(spec);
    const ParameterSet p = net.initialize(4);
    Rng rng(5);
    const ForwardResult r = net.forward(p, random_inputs(9, 6, 6), Mode::Train, rng);
    const Gradients g = net.backward(p, r.cache, std::vector<double>(6, 0.0));
    REQUIRE(g.size() == p.weights.size());
    for (const Matrix& m : g) CHECK(m.isZero(0.0));
  }
}

TEST_CASE("tempered sigmoid") {
  CHECK(tempered_sigmoid(1.0, 1.0) == doctest::Approx(0.731059).epsilon(1e-6));
  CHECK(tempered_sigmoid(2.0, 2.0) == doctest::Approx(0.731059).epsilon(1e-6));
  CHECK(tempered_sigmoid(0.0, 5.0) == 0.5);
  CHECK(tempered_sigmoid(-800.0, 1.0) >= 0.0);
  CHECK(tempered_sigmoid(800.0, 1.0) <= 1.0);
  const auto entropy = [](double p) { return -(p * std::log(p) + (1.0 - p) * std::log(1.0 - p)); };
  for (double z : {-3.0, -0.5, 0.7, 4.0}) {
    double previous = 0.0;
    for (double tau : {0.5, 1.0, 2.0, 4.0, 8.0}) {
      const double h = entropy(tempered_sigmoid(z, tau));
      CHECK(h > previous);
      previous = h;
    }
  }
}

TEST_CASE("mc_predict statistics and reproducibility") {
  const NetworkSpec spec = NetworkSpec::defaults(Architecture::Mlp, 21);
  const ParameterSet p = build_network(spec, 12);
  const Matrix x = random_inputs(21, 40, 13);
  const PredictionSamples a = mc_predict(spec, p, x, 30, 77);
  const PredictionSamples b = mc_predict(spec, p, x, 30, 77);
  CHECK(a.samples == b.samples);
  CHECK(a.samples.rows() == 30);
  CHECK(a.samples.cols() == 40);
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const auto col = a.samples.col(j);
    double mean = 0.0;
    for (Eigen::Index s = 0; s < col.size(); ++s) mean += col(s);
    mean /= static_cast<double>(col.size());
    double ss = 0.0;
    for (Eigen::Index s = 0; s < col.size(); ++s) ss += (col(s) - mean) * (col(s) - mean);
    const double var = ss / static_cast<double>(col.size() - 1);
    const auto k = static_cast<std::size_t>(j);
    CHECK(a.mean[k] == doctest::Approx(mean).epsilon(1e-12));
    CHECK(a.variance[k] == doctest::Approx(var).epsilon(1e-10));
    CHECK(a.std[k] == doctest::Approx(std::sqrt(var)).epsilon(1e-10));
    CHECK(a.variance[k] > 0.0);
  }
  // Sample s depends only on its own stream.
  const PredictionSamples c = mc_predict(spec, p, x, 10, 77);
  CHECK(c.samples == a.samples.topRows(10));
  CHECK_THROWS_AS(mc_predict(spec, p, x, 1, 77), Error);
}

TEST_CASE("inverted dropout preserves the expected logit") {
  // One hidden block keeps the logit linear in the dropout mask.
  NetworkSpec spec = NetworkSpec::defaults(Architecture::Mlp, 21);
  spec.dense_widths = {64};
  const ParameterSet p = build_network(spec, 30);
  const Matrix x = random_inputs(21, 3, 31);
  Rng rng(32);
  const std::vector<double> eval = forward(spec, p, x, Mode::Eval, rng).logits;
  constexpr int kMasks = 20000;
  std::vector<double> sum(3, 0.0), sum_sq(3, 0.0);
  for (int s = 0; s < kMasks; ++s) {
    const std::vector<double> z = forward(spec, p, x, Mode::MonteCarlo, rng).logits;
    for (std::size_t j = 0; j < 3; ++j) {
      sum[j] += z[j];
      sum_sq[j] += z[j] * z[j];
    }
  }
  for (std::size_t j = 0; j < 3; ++j) {
    const double mean = sum[j] / kMasks;
    const double sd = std::sqrt(sum_sq[j] / kMasks - mean * mean);
    // Five standard errors.
    CHECK(std::abs(mean - eval[j]) < 5.0 * sd / std::sqrt(static_cast<double>(kMasks)));
  }
}

TEST_CASE("non-finite input is a numeric error") {
  const NetworkSpec spec = NetworkSpec::defaults(Architecture::Mlp, 21);
  const ParameterSet p = build_network(spec, 1);
  Matrix x = random_inputs(21, 4, 2);
  x(3, 1) = std::numeric_limits<double>::quiet_NaN();
  Rng rng(0);
  try {
    forward(spec, p, x, Mode::Eval, rng);
    FAIL("expected an exception");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Numeric);
  }
  CHECK_THROWS_AS(forward(spec, p, random_inputs(20, 4, 2), Mode::Eval, rng), Error);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / ("somnolog_net_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  for (Architecture a : kArchitectures) {
    Checkpoint c;
    c.spec = NetworkSpec::defaults(a, 21);
    c.params = build_network(c.spec, 50);
    c.params.weight("out.bias")(0, 0) = 0.123456789012345;
    c.normalizer = {1.25, 0.5};
    c.subject_id = "S1";
    c.config_hash = "abc";
    const auto path = dir / (std::string(architecture_key(a)) + ".ckpt");
    save_checkpoint(path, c);
    const Checkpoint back = load_checkpoint(path);
    CHECK(back.subject_id == "S1");
    CHECK(back.config_hash == "abc");
    CHECK(back.normalizer.mean == 1.25);
    CHECK(back.normalizer.stddev == 0.5);
    REQUIRE(back.params.weights.size() == c.params.weights.size());
    for (std::size_t i = 0; i < c.params.weights.size(); ++i) {
      CHECK(back.params.weights[i].name == c.params.weights[i].name);
      CHECK(back.params.weights[i].value == c.params.weights[i].value);
    }
    for (std::size_t i = 0; i < c.params.buffers.size(); ++i) {
      CHECK(back.params.buffers[i].value == c.params.buffers[i].value);
    }
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("input normaliser and window matrix") {
  const std::vector<double> counts{0, 1, 3, 7, 15, 31};
  const std::vector<std::size_t> idx{2, 3, 4, 5};
  const InputNormalizer n = InputNormalizer::fit(counts, idx);
  double mean = 0.0;
  for (std::size_t i : idx) mean += std::log1p(counts[i]);
  mean /= 4.0;
  CHECK(n.mean == doctest::Approx(mean));
  const Matrix w = window_matrix(counts, std::vector<std::size_t>{3, 5}, 2, n);
  CHECK(w.rows() == 3);
  CHECK(w.cols() == 2);
  CHECK(w(0, 0) == doctest::Approx(n.apply(7)));
  CHECK(w(2, 0) == doctest::Approx(n.apply(1)));
  CHECK(w(1, 1) == doctest::Approx(n.apply(15)));
  const InputNormalizer flat = InputNormalizer::fit(std::vector<double>{4, 4, 4}, std::vector<std::size_t>{0, 1, 2});
  CHECK(flat.stddev == 1.0);
}
