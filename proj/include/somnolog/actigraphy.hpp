#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace somnolog {

using TimePoint = std::chrono::sys_seconds;

// Epoch-level actigraphy for one subject. truth, when present, holds
// polysomnography sleep labels (1 = sleep) aligned with counts.
struct EpochSeries {
  std::string subject_id;
  int epoch_seconds = 30;
  TimePoint start_time{};
  std::vector<double> counts;
  std::optional<std::vector<int>> truth;

  std::size_t size() const { return counts.size(); }
  TimePoint time_at(std::size_t t) const {
    return start_time + std::chrono::seconds(static_cast<long long>(t) * epoch_seconds);
  }
  // Seconds since local midnight (UTC) of epoch t.
  int time_of_day(std::size_t t) const;
  void validate() const;
};

// ISO-8601 UTC, "2024-01-01T12:00:00Z". Parsing also accepts a space
// separator and a missing trailing Z.
std::string format_timestamp(TimePoint time);
TimePoint parse_timestamp(std::string_view text);

struct CsvSchema {
  std::string subject = "subject_id";
  std::string timestamp = "timestamp_utc";
  std::string activity = "activity";
  std::string label = "psg_label";
};

EpochSeries load_epoch_series(const std::filesystem::path& path, const CsvSchema& schema = {});
void write_epoch_series(std::ostream& out, const EpochSeries& series);

// Sums non-overlapping blocks of target_seconds / epoch_seconds epochs. Truth
// is aggregated by block majority with ties going to sleep. A trailing
// partial block is dropped.
EpochSeries aggregate_epochs(const EpochSeries& series, int target_seconds);

struct SyntheticConfig {
  int n_subjects = 5;
  int n_days = 7;
  int epoch_seconds = 30;
  std::uint64_t seed = 7;
  double sleep_mean = 6.0;    // expected count per sleep epoch
  double wake_mean = 180.0;   // expected count per active wake epoch
  double dwell_sleep = 120.0; // mean sleep bout, epochs
  double dwell_wake = 10.0;   // mean in-bed awakening, epochs
  double bedtime_hour = 23.0;
  double risetime_hour = 7.0;

  void validate() const;
};

// Two-state semi-Markov sleep/wake trajectories gated by a jittered nightly
// bed period, with gamma-distributed counts. Series start at noon UTC on
// 2024-01-01 and carry their planted truth.
std::vector<EpochSeries> generate_synthetic(const SyntheticConfig& config);

// values = x_t, x_{t-1}, ..., x_{t-h}
struct WindowedInput {
  std::size_t t_index = 0;
  std::vector<double> values;
};

std::vector<WindowedInput> make_windows(std::span<const double> counts, int h);
inline std::vector<WindowedInput> make_windows(const EpochSeries& series, int h) {
  return make_windows(series.counts, h);
}

struct SplitFractions {
  double train = 0.7;
  double val = 0.15;
  double test = 0.15;
};

// Epoch indices (window end points) of each chronological block.
struct DataSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

// Splits the T - h windowed indices [h, T) into contiguous train/val/test
// blocks. Validation and test sizes are floored; the remainder goes to train.
DataSplit split_record(std::size_t length, int h, const SplitFractions& fractions);

}  // namespace somnolog
