#include "somnolog/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <openssl/evp.h>

#include <json.hpp>

#include "somnolog/error.hpp"
#include "somnolog/weak_supervision.hpp"

namespace somnolog {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view stage_key(Stage stage) {
  switch (stage) {
    case Stage::Synth: return "synth";
    case Stage::Label: return "label";
    case Stage::Train: return "train";
    case Stage::Predict: return "predict";
    case Stage::Evaluate: return "evaluate";
    case Stage::Profile: return "profile";
    case Stage::Report: return "report";
  }
  return "unknown";
}

Stage parse_stage(std::string_view key) {
  for (Stage s : kAllStages) {
    if (stage_key(s) == key) return s;
  }
  throw Error(ErrorCode::UnknownStage, "unknown stage '" + std::string(key) + "'");
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::Io, "sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < length; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 0xF];
  }
  return out;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot read " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return sha256_hex(buffer.str());
}

namespace {

// Keys with defaults; every one of them is part of the effective config.
const std::vector<std::pair<std::string, std::string>>& default_entries() {
  static const std::vector<std::pair<std::string, std::string>> entries{
      {"seed", "7"},
      {"synth.subjects", "5"},
      {"synth.days", "7"},
      {"synth.epoch_seconds", "30"},
      {"synth.sleep_mean", "6"},
      {"synth.wake_mean", "180"},
      {"synth.dwell_sleep", "120"},
      {"synth.dwell_wake", "10"},
      {"synth.bedtime_hour", "23"},
      {"synth.risetime_hour", "7"},
      {"label.algos", "sadeh,ck,oakley,sazonov,hmm"},
      {"net.architecture", "lstm"},
      {"net.window", "20"},
      {"net.dropout", "0.5"},
      {"net.temperature", "2"},
      {"net.lstm_hidden", "32"},
      {"net.conv_kernel", "5"},
      {"net.conv_channels", "8,16"},
      {"train.loss", "soft-ce"},
      {"train.learning_rate", "1e-05"},
      {"train.l2", "0.0001"},
      {"train.batch_size", "64"},
      {"train.max_epochs", "50"},
      {"train.patience", "5"},
      {"train.brier_target", "soft"},
      {"split.train", "0.7"},
      {"split.val", "0.15"},
      {"split.test", "0.15"},
      {"predict.samples", "100"},
      {"eval.bins", "10"},
      {"profile.bin_epochs", "1"},
      {"profile.degree", "4"},
      {"profile.pieces", "4"},
  };
  return entries;
}

bool is_labeler_key(std::string_view key) {
  for (std::string_view prefix : {"sadeh.", "ck.", "oakley.", "sazonov.", "hmm."}) {
    if (key.substr(0, prefix.size()) == prefix) return true;
  }
  return false;
}

std::vector<int> parse_int_list(const std::string& text, std::string_view key) {
  std::vector<int> out;
  for (const auto& part : split(text, ',')) out.push_back(static_cast<int>(parse_int(part, key)));
  return out;
}

std::string join_ints(const std::vector<int>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + std::to_string(values[i]);
  return out;
}

int as_int(const KeyValueConfig& c, std::string_view key) {
  const long long v = c.get_int(key, 0);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    throw Error(ErrorCode::Contract, std::string(key) + ": out of range");
  }
  return static_cast<int>(v);
}

}  // namespace

PipelineConfig PipelineConfig::from(const KeyValueConfig& user) {
  KeyValueConfig merged;
  for (const auto& [k, v] : default_entries()) merged.set(k, v);

  const std::vector<std::string> optional_keys{"paths.data", "paths.out", "jobs", "net.dense_widths",
                                               "label.oakley_threshold", "label.coefficients"};
  for (const auto& [key, value] : user.entries()) {
    const bool known = std::any_of(default_entries().begin(), default_entries().end(),
                                   [&](const auto& e) { return e.first == key; }) ||
                       std::find(optional_keys.begin(), optional_keys.end(), key) != optional_keys.end() ||
                       is_labeler_key(key);
    if (!known) throw Error(ErrorCode::InvalidArgument, "unknown configuration key '" + key + "'");
    merged.set(key, value);
  }
  // Coefficient file entries apply first; inline overrides win.
  if (const auto file = merged.get("label.coefficients")) {
    const KeyValueConfig coefficients = KeyValueConfig::load(*file);
    for (const auto& [key, value] : coefficients.entries()) {
      if (!is_labeler_key(key)) {
        throw Error(ErrorCode::InvalidArgument, *file + ": '" + key + "' is not a labeler coefficient");
      }
      if (!user.contains(key)) merged.set(key, value);
    }
  }
  if (const auto t = merged.get("label.oakley_threshold")) {
    merged.set("oakley.threshold", *t);
  }

  PipelineConfig c;
  if (const auto out = merged.get("paths.out")) {
    c.out_dir = *out;
  } else if (const char* env = std::getenv("SOMNOLOG_OUT"); env != nullptr && *env != '\0') {
    c.out_dir = env;
  } else {
    throw Error(ErrorCode::InvalidArgument, "no output directory: set paths.out, --out or SOMNOLOG_OUT");
  }
  if (const auto data = merged.get("paths.data")) c.data_dir = fs::path(*data);
  c.seed = merged.get_u64("seed", 7);
  c.jobs = static_cast<int>(merged.get_int("jobs", 1));
  if (c.jobs < 1) throw Error(ErrorCode::Contract, "jobs must be >= 1");

  c.synth.n_subjects = as_int(merged, "synth.subjects");
  c.synth.n_days = as_int(merged, "synth.days");
  c.synth.epoch_seconds = as_int(merged, "synth.epoch_seconds");
  c.synth.seed = c.seed;
  c.synth.sleep_mean = merged.get_double("synth.sleep_mean", 0.0);
  c.synth.wake_mean = merged.get_double("synth.wake_mean", 0.0);
  c.synth.dwell_sleep = merged.get_double("synth.dwell_sleep", 0.0);
  c.synth.dwell_wake = merged.get_double("synth.dwell_wake", 0.0);
  c.synth.bedtime_hour = merged.get_double("synth.bedtime_hour", 0.0);
  c.synth.risetime_hour = merged.get_double("synth.risetime_hour", 0.0);
  c.synth.validate();

  c.algorithms = parse_algorithm_list(merged.get_string("label.algos", ""));
  c.labeler.apply(merged);

  const Architecture arch = parse_architecture(merged.get_string("net.architecture", "lstm"));
  const int window = as_int(merged, "net.window");
  if (window < 1) throw Error(ErrorCode::Contract, "net.window must be >= 1");
  c.network = NetworkSpec::defaults(arch, window + 1);
  if (const auto widths = merged.get("net.dense_widths")) c.network.dense_widths = parse_int_list(*widths, "net.dense_widths");
  merged.set("net.dense_widths", join_ints(c.network.dense_widths));
  c.network.dropout = merged.get_double("net.dropout", 0.5);
  c.network.temperature = merged.get_double("net.temperature", 2.0);
  c.network.lstm_hidden = as_int(merged, "net.lstm_hidden");
  c.network.conv_kernel = as_int(merged, "net.conv_kernel");
  if (arch == Architecture::Cnn) {
    c.network.conv_channels = parse_int_list(merged.get_string("net.conv_channels", ""), "net.conv_channels");
  }
  c.network.validate();

  c.train.loss = parse_loss(merged.get_string("train.loss", ""));
  c.train.brier_target = parse_brier_target(merged.get_string("train.brier_target", "soft"));
  c.train.learning_rate = merged.get_double("train.learning_rate", 0.0);
  c.train.l2 = merged.get_double("train.l2", 0.0);
  c.train.batch_size = as_int(merged, "train.batch_size");
  c.train.max_epochs = as_int(merged, "train.max_epochs");
  c.train.patience = as_int(merged, "train.patience");
  c.train.split = {merged.get_double("split.train", 0.0), merged.get_double("split.val", 0.0),
                   merged.get_double("split.test", 0.0)};
  c.train.validate();
  const SplitFractions& f = c.train.split;
  if (!(f.train > 0.0) || !(f.val > 0.0) || !(f.test > 0.0) || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw Error(ErrorCode::Contract, "split fractions must be positive and sum to 1");
  }

  c.mc_samples = as_int(merged, "predict.samples");
  if (c.mc_samples < 2) throw Error(ErrorCode::Contract, "predict.samples must be >= 2");
  c.calibration.n_bins = as_int(merged, "eval.bins");
  c.calibration.validate();
  c.profile_bin_epochs = as_int(merged, "profile.bin_epochs");
  if (c.profile_bin_epochs < 1) throw Error(ErrorCode::Contract, "profile.bin_epochs must be >= 1");
  c.curve.degree = as_int(merged, "profile.degree");
  c.curve.pieces = as_int(merged, "profile.pieces");
  c.curve.validate();

  for (const auto& [key, value] : merged.entries()) {
    if (key.rfind("paths.", 0) == 0 || key == "jobs" || key == "label.coefficients" ||
        key == "label.oakley_threshold") {
      continue;
    }
    c.effective.set(key, value);
  }
  return c;
}

fs::path PipelineConfig::epochs_dir() const { return data_dir ? *data_dir : out_dir / "epochs"; }

std::string PipelineConfig::model_tag() const {
  return std::string(architecture_key(network.architecture)) + "_" + std::string(loss_key(train.loss));
}

std::string PipelineConfig::experiment_hash() const { return sha256_hex(effective.canonical_text()); }

std::vector<Stage> default_chain(const PipelineConfig& config) {
  std::vector<Stage> chain;
  for (Stage s : kAllStages) {
    if (s == Stage::Synth && config.data_dir) continue;
    chain.push_back(s);
  }
  return chain;
}

namespace {

struct FileLists {
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;

  void append(const FileLists& other) {
    inputs.insert(inputs.end(), other.inputs.begin(), other.inputs.end());
    outputs.insert(outputs.end(), other.outputs.begin(), other.outputs.end());
  }
};

void write_file(const fs::path& path, const std::string& content, FileLists& files) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << content;
  if (!out) throw Error(ErrorCode::Io, "write failed: " + path.string());
  files.outputs.push_back(path);
}

std::string json_text(const json& j) { return j.dump(2) + "\n"; }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, path.string() + ": " + e.what());
  }
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name, const fs::path& origin) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorCode::Parse, origin.string() + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::Parse, path.string() + ": missing header");
  table.header = split(trim(line), ',');
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto fields = split(trim(line), ',');
    if (fields.size() != table.header.size()) {
      throw Error(ErrorCode::Parse, path.string() + ": ragged row " + std::to_string(table.rows.size() + 2));
    }
    table.rows.push_back(std::move(fields));
  }
  return table;
}

std::vector<fs::path> list_epoch_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::Io, "epoch directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(ErrorCode::Io, "no epoch CSV files in " + dir.string());
  return files;
}

void check_subject_id(const std::string& id) {
  const bool ok = !id.empty() && std::all_of(id.begin(), id.end(), [](char ch) {
    return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.';
  }) && id.front() != '.';
  if (!ok) throw Error(ErrorCode::Contract, "subject id '" + id + "' is not usable as a file name");
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results are gathered by
// index, so output order does not depend on scheduling. The error of the
// lowest failing index is rethrown.
template <typename Result, typename Fn>
std::vector<Result> parallel_map(std::size_t n, int jobs, Fn fn) {
  std::vector<Result> results(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        results[i] = fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

struct Subject {
  fs::path epoch_file;
  EpochSeries series;
};

Subject load_subject(const fs::path& file) {
  Subject s{file, load_epoch_series(file)};
  check_subject_id(s.series.subject_id);
  return s;
}

fs::path weak_path(const PipelineConfig& c, const std::string& id) { return c.out_dir / "labels" / (id + ".weak.csv"); }
fs::path soft_path(const PipelineConfig& c, const std::string& id) { return c.out_dir / "labels" / (id + ".soft.csv"); }
fs::path model_dir(const PipelineConfig& c) { return c.out_dir / "models" / c.model_tag(); }
fs::path prediction_path(const PipelineConfig& c, const std::string& id) {
  return c.out_dir / "predictions" / c.model_tag() / (id + ".csv");
}
fs::path metrics_path(const PipelineConfig& c) { return c.out_dir / "reports" / ("metrics_" + c.model_tag() + ".json"); }
fs::path profile_summary_path(const PipelineConfig& c) {
  return c.out_dir / "profiles" / (c.model_tag() + "_summary.json");
}

std::string cell(const WeakLabelMatrix& m, std::size_t i, std::size_t t) {
  return m.valid(i, t) ? std::to_string(m.label(i, t)) : "NA";
}

WeakLabelMatrix read_weak_labels(const fs::path& path, const EpochSeries& series) {
  const CsvTable table = read_csv(path);
  if (table.header.size() < 3 || table.header[0] != "subject_id" || table.header[1] != "timestamp_utc") {
    throw Error(ErrorCode::Parse, path.string() + ": not a weak-label file");
  }
  if (table.rows.size() != series.size()) {
    throw Error(ErrorCode::Parse, path.string() + ": row count differs from the epoch file");
  }
  std::vector<std::string> labelers(table.header.begin() + 2, table.header.end());
  WeakLabelMatrix m(labelers, series.size());
  for (std::size_t t = 0; t < table.rows.size(); ++t) {
    for (std::size_t i = 0; i < labelers.size(); ++i) {
      const std::string& v = table.rows[t][i + 2];
      if (v == "NA") {
        m.set_invalid(i, t);
      } else if (v == "0" || v == "1") {
        m.set(i, t, v == "1");
      } else {
        throw Error(ErrorCode::Parse, path.string() + ": invalid weak label '" + v + "'");
      }
    }
  }
  return m;
}

std::uint64_t subject_seed(const PipelineConfig& c, std::string_view purpose, const std::string& id) {
  return derive_seed(c.seed, std::string(purpose) + "/" + id);
}

// ---- stages ---------------------------------------------------------------

FileLists run_synth(const PipelineConfig& c) {
  FileLists files;
  for (const auto& series : generate_synthetic(c.synth)) {
    std::ostringstream out;
    write_epoch_series(out, series);
    write_file(c.out_dir / "epochs" / (series.subject_id + ".csv"), out.str(), files);
  }
  return files;
}

FileLists run_label(const PipelineConfig& c) {
  const auto epoch_files = list_epoch_files(c.epochs_dir());
  const auto per_subject = parallel_map<FileLists>(epoch_files.size(), c.jobs, [&](std::size_t i) {
    FileLists files;
    const Subject s = load_subject(epoch_files[i]);
    files.inputs.push_back(s.epoch_file);
    const WeakLabelMatrix m = run_ensemble(s.series, c.algorithms, c.labeler);
    const SoftLabelSeries soft = soft_labels(m);
    const std::string& id = s.series.subject_id;

    std::ostringstream weak;
    weak << "subject_id,timestamp_utc";
    for (const auto& name : m.labelers()) weak << ',' << name;
    weak << '\n';
    std::ostringstream agg;
    agg << "subject_id,timestamp_utc,votes,k_effective,p_hat,majority\n";
    for (std::size_t t = 0; t < m.length(); ++t) {
      const std::string stamp = format_timestamp(s.series.time_at(t));
      weak << id << ',' << stamp;
      for (std::size_t k = 0; k < m.k(); ++k) weak << ',' << cell(m, k, t);
      weak << '\n';
      agg << id << ',' << stamp << ',' << soft.votes[t] << ',' << soft.k_effective[t] << ',';
      if (soft.scored(t)) {
        agg << format_number(soft.p_hat[t]) << ',' << soft.majority[t] << '\n';
      } else {
        agg << "NA,NA\n";
      }
    }
    write_file(weak_path(c, id), weak.str(), files);
    write_file(soft_path(c, id), agg.str(), files);
    return files;
  });
  FileLists all;
  for (const auto& f : per_subject) all.append(f);
  return all;
}

FileLists run_train(const PipelineConfig& c) {
  const auto epoch_files = list_epoch_files(c.epochs_dir());
  const std::string hash = c.experiment_hash();
  const auto per_subject = parallel_map<FileLists>(epoch_files.size(), c.jobs, [&](std::size_t i) {
    FileLists files;
    const Subject s = load_subject(epoch_files[i]);
    const std::string& id = s.series.subject_id;
    const fs::path weak_file = weak_path(c, id);
    files.inputs = {s.epoch_file, weak_file};
    const SoftLabelSeries soft = soft_labels(read_weak_labels(weak_file, s.series));
    TrainConfig tc = c.train;
    tc.seed = subject_seed(c, "train", id);
    const TrainResult r = train_subject(s.series, soft, c.network, tc);

    std::ostringstream history;
    history << "epoch,train_loss,val_loss\n";
    for (const auto& row : r.history) {
      history << row.epoch << ',' << format_number(row.train_loss) << ',' << format_number(row.val_loss) << '\n';
    }
    write_file(model_dir(c) / (id + ".history.csv"), history.str(), files);
    const Checkpoint ckpt{c.network, r.params, r.normalizer, id, hash};
    const fs::path ckpt_path = model_dir(c) / (id + ".ckpt");
    fs::create_directories(ckpt_path.parent_path());
    save_checkpoint(ckpt_path, ckpt);
    files.outputs.push_back(ckpt_path);
    return files;
  });
  FileLists all;
  for (const auto& f : per_subject) all.append(f);
  return all;
}

FileLists run_predict(const PipelineConfig& c) {
  const auto epoch_files = list_epoch_files(c.epochs_dir());
  const auto per_subject = parallel_map<FileLists>(epoch_files.size(), c.jobs, [&](std::size_t i) {
    FileLists files;
    const Subject s = load_subject(epoch_files[i]);
    const std::string& id = s.series.subject_id;
    const fs::path ckpt_path = model_dir(c) / (id + ".ckpt");
    files.inputs = {s.epoch_file, ckpt_path};
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    if (ckpt.subject_id != id) {
      throw Error(ErrorCode::Contract, ckpt_path.string() + " belongs to subject '" + ckpt.subject_id + "'");
    }
    const int h = ckpt.spec.input_length - 1;
    const DataSplit split = split_record(s.series.size(), h, c.train.split);
    const Matrix inputs = window_matrix(s.series.counts, split.test, h, ckpt.normalizer);
    const PredictionSamples p = mc_predict(ckpt.spec, ckpt.params, inputs, c.mc_samples, subject_seed(c, "predict", id));

    std::ostringstream out;
    out << "subject_id,timestamp_utc,t_index,mean,std,variance\n";
    for (std::size_t j = 0; j < split.test.size(); ++j) {
      const std::size_t t = split.test[j];
      out << id << ',' << format_timestamp(s.series.time_at(t)) << ',' << t << ',' << format_number(p.mean[j]) << ','
          << format_number(p.std[j]) << ',' << format_number(p.variance[j]) << '\n';
    }
    write_file(prediction_path(c, id), out.str(), files);
    return files;
  });
  FileLists all;
  for (const auto& f : per_subject) all.append(f);
  return all;
}

struct Predictions {
  std::vector<std::size_t> t_index;
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<double> variance;
};

Predictions read_predictions(const fs::path& path, std::size_t length) {
  const CsvTable table = read_csv(path);
  const std::size_t ti = table.column("t_index", path);
  const std::size_t mi = table.column("mean", path);
  const std::size_t si = table.column("std", path);
  const std::size_t vi = table.column("variance", path);
  Predictions p;
  for (const auto& row : table.rows) {
    const long long t = parse_int(row[ti], "t_index");
    if (t < 0 || static_cast<std::size_t>(t) >= length) throw Error(ErrorCode::Parse, path.string() + ": bad t_index");
    p.t_index.push_back(static_cast<std::size_t>(t));
    p.mean.push_back(parse_double(row[mi], "mean"));
    p.std.push_back(parse_double(row[si], "std"));
    p.variance.push_back(parse_double(row[vi], "variance"));
  }
  return p;
}

const std::vector<std::string>& metric_keys() {
  static const std::vector<std::string> keys{"accuracy", "ece",   "entropy",     "f1",          "kappa",
                                             "mcc",      "sensitivity", "specificity", "variance", "mean_std"};
  return keys;
}

json metrics_json(std::span<const int> truth, std::span<const double> scores, std::span<const double> classes,
                  const CalibrationConfig& calibration, std::optional<double> variance, std::optional<double> mean_std) {
  const ClassificationReport r = classification_report(confusion_counts(truth, classes));
  json j;
  j["n"] = truth.size();
  j["accuracy"] = r.accuracy;
  j["f1"] = r.f1;
  j["kappa"] = r.kappa;
  j["mcc"] = r.mcc;
  j["sensitivity"] = r.sensitivity;
  j["specificity"] = r.specificity;
  j["degenerate"] = r.degenerate;
  j["ece"] = expected_calibration_error(scores, truth, calibration);
  j["entropy"] = mean_prediction_entropy(scores);
  j["variance"] = variance ? json(*variance) : json(nullptr);
  j["mean_std"] = mean_std ? json(*mean_std) : json(nullptr);
  return j;
}

// Mean and sample standard deviation over subjects of every metric of every
// row; nulls are skipped.
json aggregate_rows(const json& subjects) {
  json out = json::object();
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  for (const auto& [subject, rows] : subjects.items()) {
    for (const auto& [row, metrics] : rows.items()) {
      for (const auto& key : metric_keys()) {
        if (metrics.contains(key) && metrics[key].is_number()) values[row][key].push_back(metrics[key].get<double>());
      }
    }
  }
  for (const auto& [row, per_key] : values) {
    for (const auto& [key, v] : per_key) {
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - mean) * (x - mean);
      out[row][key] = {{"mean", mean},
                       {"std", v.size() > 1 ? json(std::sqrt(ss / static_cast<double>(v.size() - 1))) : json(nullptr)},
                       {"n_subjects", v.size()}};
    }
  }
  return out;
}

json config_json(const PipelineConfig& c) {
  json j = json::object();
  for (const auto& [k, v] : c.effective.entries()) j[k] = v;
  return j;
}

struct SubjectEvaluation {
  FileLists files;
  std::string subject_id;
  json metrics;
  std::vector<int> truth;
  std::vector<double> model;
  std::vector<double> ensemble;
};

FileLists run_evaluate(const PipelineConfig& c) {
  const auto epoch_files = list_epoch_files(c.epochs_dir());
  const auto per_subject = parallel_map<SubjectEvaluation>(epoch_files.size(), c.jobs, [&](std::size_t i) {
    SubjectEvaluation ev;
    const Subject s = load_subject(epoch_files[i]);
    const std::string& id = s.series.subject_id;
    if (!s.series.truth) {
      throw Error(ErrorCode::Contract, s.epoch_file.string() + ": evaluation needs the psg_label column");
    }
    const fs::path weak_file = weak_path(c, id);
    const fs::path pred_file = prediction_path(c, id);
    ev.files.inputs = {s.epoch_file, weak_file, pred_file};
    const WeakLabelMatrix m = read_weak_labels(weak_file, s.series);
    const SoftLabelSeries soft = soft_labels(m);
    const auto variance = ensemble_variance(m);
    const Predictions p = read_predictions(pred_file, s.series.size());
    const std::vector<int>& truth = *s.series.truth;

    std::vector<std::size_t> rows;  // positions in p whose epoch is scored
    for (std::size_t j = 0; j < p.t_index.size(); ++j) {
      if (soft.scored(p.t_index[j])) rows.push_back(j);
    }
    if (rows.empty()) throw Error(ErrorCode::Contract, id + ": no scored test epochs");

    std::vector<int> y;
    std::vector<double> model_mean, majority, p_hat;
    double model_var = 0.0, model_std = 0.0, ens_var = 0.0, ens_std = 0.0;
    std::size_t n_var = 0;
    for (std::size_t j : rows) {
      const std::size_t t = p.t_index[j];
      y.push_back(truth[t]);
      model_mean.push_back(p.mean[j]);
      model_var += p.variance[j];
      model_std += p.std[j];
      majority.push_back(soft.majority[t]);
      p_hat.push_back(soft.p_hat[t]);
      if (variance[t]) {
        ens_var += *variance[t];
        ens_std += std::sqrt(*variance[t]);
        ++n_var;
      }
    }
    const double n = static_cast<double>(rows.size());
    json subject;
    subject["model"] = metrics_json(y, model_mean, model_mean, c.calibration, model_var / n, model_std / n);
    subject["ensemble"] = metrics_json(y, p_hat, majority, c.calibration,
                                       n_var ? std::optional<double>(ens_var / static_cast<double>(n_var)) : std::nullopt,
                                       n_var ? std::optional<double>(ens_std / static_cast<double>(n_var)) : std::nullopt);
    for (std::size_t k = 0; k < m.k(); ++k) {
      std::vector<int> yk;
      std::vector<double> pk;
      for (std::size_t j : rows) {
        const std::size_t t = p.t_index[j];
        if (!m.valid(k, t)) continue;
        yk.push_back(truth[t]);
        pk.push_back(m.label(k, t));
      }
      if (yk.empty()) continue;
      subject[m.labelers()[k]] = metrics_json(yk, pk, pk, c.calibration, std::nullopt, std::nullopt);
    }
    ev.subject_id = id;
    ev.metrics = std::move(subject);
    ev.truth = std::move(y);
    ev.model = std::move(model_mean);
    ev.ensemble = std::move(p_hat);
    return ev;
  });

  FileLists files;
  json subjects = json::object();
  std::vector<int> truth;
  std::vector<double> model, ensemble;
  for (const auto& ev : per_subject) {
    files.append(ev.files);
    subjects[ev.subject_id] = ev.metrics;
    truth.insert(truth.end(), ev.truth.begin(), ev.truth.end());
    model.insert(model.end(), ev.model.begin(), ev.model.end());
    ensemble.insert(ensemble.end(), ev.ensemble.begin(), ev.ensemble.end());
  }
  json report;
  report["model_tag"] = c.model_tag();
  report["experiment_hash"] = c.experiment_hash();
  report["config"] = config_json(c);
  report["subjects"] = subjects;
  report["aggregate"] = aggregate_rows(subjects);
  write_file(metrics_path(c), json_text(report), files);

  std::ostringstream rel;
  rel << "source,lower,upper,count,accuracy,confidence\n";
  for (const auto& [name, scores] : {std::pair{"model", &model}, std::pair{"ensemble", &ensemble}}) {
    for (const auto& b : reliability_bins(*scores, truth, c.calibration)) {
      rel << name << ',' << format_number(b.lower) << ',' << format_number(b.upper) << ',' << b.count << ','
          << format_number(b.accuracy) << ',' << format_number(b.confidence) << '\n';
    }
  }
  write_file(c.out_dir / "reports" / ("reliability_" + c.model_tag() + ".csv"), rel.str(), files);
  return files;
}

std::string profile_csv(const UncertaintyProfile& profile) {
  std::ostringstream out;
  out << "time_of_day_s,mean_std,n\n";
  for (std::size_t b = 0; b < profile.bins(); ++b) {
    out << profile.bin_start(b) << ',';
    if (profile.count(b) > 0) {
      out << format_number(profile.mean(b));
    } else {
      out << "NA";
    }
    out << ',' << profile.count(b) << '\n';
  }
  return out.str();
}

std::string fit_csv(const UncertaintyProfile& profile, const HeteroscedasticityFit& fit) {
  std::ostringstream out;
  out << "time_of_day_s,fitted\n";
  for (std::size_t b = 0; b < profile.bins(); ++b) {
    const double x = profile.bin_start(b) + 0.5 * profile.bin_seconds();
    out << format_number(x) << ',' << format_number(fit.evaluate(x)) << '\n';
  }
  return out.str();
}

json fit_json(const UncertaintyProfile& profile, const HeteroscedasticityFit& fit) {
  return {{"offset", fit.offset},
          {"amplitude", fit.amplitude},
          {"residual_rms", fit.residual_rms},
          {"degree", fit.degree},
          {"pieces", fit.pieces},
          {"coefficients", fit.coefficients},
          {"bins", profile.bins()},
          {"empty_bins", profile.empty_bins()}};
}

struct SubjectProfile {
  FileLists files;
  int epoch_seconds = 0;
  TimedValues model;
  TimedValues ensemble;
};

FileLists run_profile(const PipelineConfig& c) {
  const auto epoch_files = list_epoch_files(c.epochs_dir());
  const auto per_subject = parallel_map<SubjectProfile>(epoch_files.size(), c.jobs, [&](std::size_t i) {
    SubjectProfile sp;
    const Subject s = load_subject(epoch_files[i]);
    const std::string& id = s.series.subject_id;
    const fs::path weak_file = weak_path(c, id);
    const fs::path pred_file = prediction_path(c, id);
    sp.files.inputs = {s.epoch_file, weak_file, pred_file};
    sp.epoch_seconds = s.series.epoch_seconds;
    const auto variance = ensemble_variance(read_weak_labels(weak_file, s.series));
    const Predictions p = read_predictions(pred_file, s.series.size());
    for (std::size_t j = 0; j < p.t_index.size(); ++j) {
      const std::size_t t = p.t_index[j];
      const int tod = s.series.time_of_day(t);
      sp.model.time_of_day_s.push_back(tod);
      sp.model.values.push_back(p.std[j]);
      if (variance[t]) {
        sp.ensemble.time_of_day_s.push_back(tod);
        sp.ensemble.values.push_back(std::sqrt(*variance[t]));
      }
    }
    return sp;
  });

  const int epoch_seconds = per_subject.front().epoch_seconds;
  for (const auto& sp : per_subject) {
    if (sp.epoch_seconds != epoch_seconds) throw Error(ErrorCode::Contract, "profile: subjects differ in epoch length");
  }
  const int bin_seconds = c.profile_bin_epochs * epoch_seconds;
  UncertaintyProfile model(bin_seconds), ensemble(bin_seconds);
  FileLists files;
  for (const auto& sp : per_subject) {
    files.append(sp.files);
    model.add(sp.model);
    ensemble.add(sp.ensemble);
  }
  const HeteroscedasticityFit model_fit = fit_uncertainty_curve(model, c.curve);
  const HeteroscedasticityFit ensemble_fit = fit_uncertainty_curve(ensemble, c.curve);
  const fs::path dir = c.out_dir / "profiles";
  const std::string tag = c.model_tag();
  write_file(dir / (tag + "_model.csv"), profile_csv(model), files);
  write_file(dir / (tag + "_model_fit.csv"), fit_csv(model, model_fit), files);
  write_file(dir / (tag + "_ensemble.csv"), profile_csv(ensemble), files);
  write_file(dir / (tag + "_ensemble_fit.csv"), fit_csv(ensemble, ensemble_fit), files);
  json summary;
  summary["model_tag"] = tag;
  summary["bin_seconds"] = bin_seconds;
  summary["model"] = fit_json(model, model_fit);
  summary["ensemble"] = fit_json(ensemble, ensemble_fit);
  write_file(profile_summary_path(c), json_text(summary), files);
  return files;
}

FileLists run_report(const PipelineConfig& c) {
  FileLists files;
  const fs::path reports = c.out_dir / "reports";
  std::vector<fs::path> metric_files;
  if (fs::is_directory(reports)) {
    for (const auto& entry : fs::directory_iterator(reports)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("metrics_", 0) == 0 && entry.path().extension() == ".json") metric_files.push_back(entry.path());
    }
  }
  std::sort(metric_files.begin(), metric_files.end());
  if (metric_files.empty()) throw Error(ErrorCode::Io, "report: no metrics files in " + reports.string());

  json summary;
  json algorithms = json::object();
  json models = json::object();
  json profiles = json::object();
  for (const auto& path : metric_files) {
    files.inputs.push_back(path);
    const json metrics = read_json(path);
    const std::string tag = metrics.at("model_tag").get<std::string>();
    for (const auto& [row, values] : metrics.at("aggregate").items()) {
      if (row == "model") {
        models[tag] = values;
      } else if (!algorithms.contains(row)) {
        algorithms[row] = values;
      }
    }
    const fs::path profile = c.out_dir / "profiles" / (tag + "_summary.json");
    if (fs::exists(profile)) {
      files.inputs.push_back(profile);
      const json p = read_json(profile);
      profiles[tag] = {{"model", {{"offset", p["model"]["offset"]}, {"amplitude", p["model"]["amplitude"]}}},
                       {"ensemble", {{"offset", p["ensemble"]["offset"]}, {"amplitude", p["ensemble"]["amplitude"]}}}};
    }
  }
  summary["algorithms"] = algorithms;
  summary["models"] = models;
  summary["profiles"] = profiles;
  write_file(reports / "summary.json", json_text(summary), files);
  return files;
}

std::string manifest_path_string(const fs::path& out_dir, const fs::path& p) {
  const fs::path rel = p.lexically_relative(out_dir);
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return fs::absolute(p).lexically_normal().generic_string();
}

json file_entries(const fs::path& out_dir, std::vector<fs::path> paths) {
  std::sort(paths.begin(), paths.end());
  paths.erase(std::unique(paths.begin(), paths.end()), paths.end());
  json out = json::array();
  for (const auto& p : paths) {
    out.push_back({{"path", manifest_path_string(out_dir, p)},
                   {"sha256", sha256_file(p)},
                   {"bytes", fs::file_size(p)}});
  }
  return out;
}

std::string utc_now() {
  return format_timestamp(std::chrono::time_point_cast<std::chrono::seconds>(std::chrono::system_clock::now()));
}

}  // namespace

StageReport run_stage(Stage stage, const PipelineConfig& config) {
  const std::string started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(config.out_dir);
  FileLists files;
  switch (stage) {
    case Stage::Synth: files = run_synth(config); break;
    case Stage::Label: files = run_label(config); break;
    case Stage::Train: files = run_train(config); break;
    case Stage::Predict: files = run_predict(config); break;
    case Stage::Evaluate: files = run_evaluate(config); break;
    case Stage::Profile: files = run_profile(config); break;
    case Stage::Report: files = run_report(config); break;
  }
  StageReport report;
  report.stage = stage;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report.outputs = files.outputs;

  json manifest;
  manifest["stage"] = std::string(stage_key(stage));
  manifest["experiment_hash"] = config.experiment_hash();
  manifest["config"] = config_json(config);
  manifest["versions"] = {{"somnolog", std::string(kLibraryVersion)},
                          {"labeler_coefficients", LabelerConfig::kVersion},
                          {"checkpoint_format", kCheckpointFormatVersion}};
  manifest["jobs"] = config.jobs;
  manifest["inputs"] = file_entries(config.out_dir, files.inputs);
  manifest["outputs"] = file_entries(config.out_dir, files.outputs);
  manifest["started_utc"] = started;
  manifest["wall_seconds"] = report.seconds;
  FileLists ignored;
  write_file(config.out_dir / "manifests" / (std::string(stage_key(stage)) + ".json"), json_text(manifest), ignored);
  return report;
}

}  // namespace somnolog
