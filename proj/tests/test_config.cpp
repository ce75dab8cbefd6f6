#include <doctest.h>

#include <cstdlib>

#include "somnolog/config.hpp"
#include "somnolog/error.hpp"
#include "somnolog/pipeline.hpp"

using namespace somnolog;

TEST_CASE("key-value parsing, comments and overrides") {
  const auto c = KeyValueConfig::parse(
      "# header\n"
      "train.loss = soft-ce   # trailing comment\n"
      "\n"
      "seed=11\n"
      "seed = 12\n");
  CHECK(c.get_string("train.loss", "") == "soft-ce");
  CHECK(c.get_u64("seed", 0) == 12);
  CHECK(c.get_double("missing", 2.5) == 2.5);
  CHECK_THROWS_AS(KeyValueConfig::parse("no equals sign"), Error);
  CHECK_THROWS_AS(c.get_int("train.loss", 0), Error);
}

TEST_CASE("canonical text ignores insertion order") {
  KeyValueConfig a, b;
  a.set("b", "2");
  a.set("a", "1");
  b.set("a", "1");
  b.set("b", "2");
  CHECK(a.canonical_text() == b.canonical_text());
  CHECK(a.canonical_text() == "a = 1\nb = 2\n");
}

TEST_CASE("format_number round-trips") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.0, 0.0, 7.0}) {
    CHECK(parse_double(format_number(v), "v") == v);
  }
  CHECK(format_number(7.0) == "7");
}

TEST_CASE("pipeline config defaults") {
  KeyValueConfig kv;
  kv.set("paths.out", "/tmp/somnolog-config-test");
  const PipelineConfig c = PipelineConfig::from(kv);
  CHECK(c.seed == 7);
  CHECK(c.algorithms.size() == 5);
  CHECK(c.network.architecture == Architecture::Lstm);
  CHECK(c.network.input_length == 21);
  CHECK(c.network.dropout == 0.5);
  CHECK(c.network.temperature == 2.0);
  CHECK(c.train.learning_rate == 1e-5);
  CHECK(c.train.l2 == 1e-4);
  CHECK(c.mc_samples == 100);
  CHECK(c.calibration.n_bins == 10);
  CHECK(c.curve.degree == 4);
  CHECK(c.model_tag() == "lstm_soft-ce");
  CHECK(c.epochs_dir() == std::filesystem::path("/tmp/somnolog-config-test") / "epochs");
}

TEST_CASE("pipeline config rejects unknown keys and bad values") {
  KeyValueConfig kv;
  kv.set("paths.out", "/tmp/x");
  kv.set("train.lr", "1");
  CHECK_THROWS_AS(PipelineConfig::from(kv), Error);

  KeyValueConfig bad;
  bad.set("paths.out", "/tmp/x");
  bad.set("net.temperature", "0");
  CHECK_THROWS_AS(PipelineConfig::from(bad), Error);

  KeyValueConfig coef;
  coef.set("paths.out", "/tmp/x");
  coef.set("sadeh.w_nat", "-2");
  coef.set("label.oakley_threshold", "high");
  const PipelineConfig c = PipelineConfig::from(coef);
  CHECK(c.labeler.sadeh.w_nat == -2.0);
  CHECK(c.labeler.oakley.threshold == 80.0);
}

TEST_CASE("experiment hash ignores paths and job count") {
  KeyValueConfig a, b;
  a.set("paths.out", "/tmp/a");
  a.set("jobs", "1");
  b.set("paths.out", "/tmp/b");
  b.set("jobs", "4");
  CHECK(PipelineConfig::from(a).experiment_hash() == PipelineConfig::from(b).experiment_hash());
  b.set("seed", "8");
  CHECK(PipelineConfig::from(a).experiment_hash() != PipelineConfig::from(b).experiment_hash());
}

TEST_CASE("output directory falls back to SOMNOLOG_OUT") {
  ::setenv("SOMNOLOG_OUT", "/tmp/from-env", 1);
  CHECK(PipelineConfig::from(KeyValueConfig{}).out_dir == std::filesystem::path("/tmp/from-env"));
  ::unsetenv("SOMNOLOG_OUT");
  CHECK_THROWS_AS(PipelineConfig::from(KeyValueConfig{}), Error);
}

TEST_CASE("sha256 known vector") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
