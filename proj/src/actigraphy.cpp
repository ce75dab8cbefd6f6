#include "somnolog/actigraphy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "somnolog/config.hpp"
#include "somnolog/error.hpp"
#include "somnolog/random.hpp"

namespace somnolog {

namespace {

constexpr int kSecondsPerDay = 86400;

std::size_t column_index(const std::vector<std::string>& header, const std::string& name) {
  const auto it = std::find(header.begin(), header.end(), name);
  return it == header.end() ? header.size() : static_cast<std::size_t>(it - header.begin());
}

}  // namespace

int EpochSeries::time_of_day(std::size_t t) const {
  const long long s = time_at(t).time_since_epoch().count();
  return static_cast<int>(((s % kSecondsPerDay) + kSecondsPerDay) % kSecondsPerDay);
}

void EpochSeries::validate() const {
  if (epoch_seconds <= 0) throw Error(ErrorCode::Contract, "epoch_seconds must be positive");
  for (double c : counts) {
    if (!std::isfinite(c) || c < 0.0) {
      throw Error(ErrorCode::Contract, "activity counts must be finite and non-negative");
    }
  }
  if (truth) {
    if (truth->size() != counts.size()) {
      throw Error(ErrorCode::Contract, "truth length differs from counts length");
    }
    for (int v : *truth) {
      if (v != 0 && v != 1) throw Error(ErrorCode::Contract, "invalid truth label");
    }
  }
}

std::string format_timestamp(TimePoint time) {
  using namespace std::chrono;
  const auto day = floor<days>(time);
  const year_month_day ymd{day};
  const hh_mm_ss hms{time - day};
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%04d-%02u-%02uT%02d:%02d:%02dZ", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<int>(hms.hours().count()), static_cast<int>(hms.minutes().count()),
                static_cast<int>(hms.seconds().count()));
  return buffer;
}

TimePoint parse_timestamp(std::string_view text) {
  using namespace std::chrono;
  const std::string s = trim(text);
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
  char sep = 0;
  int consumed = 0;
  const int matched =
      std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d:%2d%n", &y, &mo, &d, &sep, &h, &mi, &sec, &consumed);
  const bool tail_ok = static_cast<std::size_t>(consumed) == s.size() ||
                       (static_cast<std::size_t>(consumed) + 1 == s.size() && s.back() == 'Z');
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (matched != 7 || (sep != 'T' && sep != ' ') || !tail_ok || !ymd.ok() || h > 23 || mi > 59 ||
      sec > 59 || h < 0 || mi < 0 || sec < 0) {
    throw Error(ErrorCode::Parse, "invalid ISO-8601 timestamp: '" + s + "'");
  }
  return sys_days{ymd} + hours{h} + minutes{mi} + seconds{sec};
}

EpochSeries load_epoch_series(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open epoch file: " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::Parse, path.string() + ": missing header");
  std::vector<std::string> header;
  for (auto& field : split(line, ',')) header.push_back(trim(field));
  const std::size_t subject_col = column_index(header, schema.subject);
  const std::size_t time_col = column_index(header, schema.timestamp);
  const std::size_t activity_col = column_index(header, schema.activity);
  const std::size_t label_col = column_index(header, schema.label);
  if (time_col == header.size() || activity_col == header.size()) {
    throw Error(ErrorCode::Parse, path.string() + ": header must contain '" + schema.timestamp + "' and '" +
                                      schema.activity + "'");
  }
  const bool has_label = label_col != header.size();

  EpochSeries series;
  series.subject_id = path.stem().string();
  std::vector<int> truth;
  std::vector<TimePoint> times;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split(line, ',');
    if (fields.size() != header.size()) {
      throw Error(ErrorCode::Parse, path.string() + ":" + std::to_string(line_no) + ": expected " +
                                        std::to_string(header.size()) + " fields");
    }
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (subject_col != header.size()) {
      const std::string id = trim(fields[subject_col]);
      if (times.empty()) {
        series.subject_id = id;
      } else if (id != series.subject_id) {
        throw Error(ErrorCode::Parse, where + ": file mixes subjects '" + series.subject_id + "' and '" + id + "'");
      }
    }
    times.push_back(parse_timestamp(fields[time_col]));
    const double activity = parse_double(fields[activity_col], where + ": activity");
    if (!std::isfinite(activity) || activity < 0.0) {
      throw Error(ErrorCode::Parse, where + ": activity must be finite and non-negative");
    }
    series.counts.push_back(activity);
    if (has_label) {
      const std::string label = trim(fields[label_col]);
      if (label != "0" && label != "1") throw Error(ErrorCode::Parse, where + ": invalid truth label '" + label + "'");
      truth.push_back(label == "1" ? 1 : 0);
    }
  }

  if (times.empty()) throw Error(ErrorCode::Parse, path.string() + ": no epochs");
  series.start_time = times.front();
  if (times.size() >= 2) {
    const long long step = (times[1] - times[0]).count();
    if (step <= 0) throw Error(ErrorCode::Parse, path.string() + ": non-monotone timestamps");
    series.epoch_seconds = static_cast<int>(step);
    for (std::size_t i = 1; i < times.size(); ++i) {
      const long long delta = (times[i] - times[i - 1]).count();
      if (delta <= 0) throw Error(ErrorCode::Parse, path.string() + ": non-monotone timestamps");
      if (delta != step) {
        throw Error(ErrorCode::Parse, path.string() + ": irregular epoch spacing at row " + std::to_string(i + 1));
      }
    }
  }
  if (has_label) series.truth = std::move(truth);
  return series;
}

void write_epoch_series(std::ostream& out, const EpochSeries& series) {
  const bool has_truth = series.truth.has_value();
  out << "subject_id,timestamp_utc,activity" << (has_truth ? ",psg_label" : "") << '\n';
  for (std::size_t t = 0; t < series.size(); ++t) {
    out << series.subject_id << ',' << format_timestamp(series.time_at(t)) << ','
        << format_number(series.counts[t]);
    if (has_truth) out << ',' << (*series.truth)[t];
    out << '\n';
  }
}

EpochSeries aggregate_epochs(const EpochSeries& series, int target_seconds) {
  if (target_seconds <= 0 || target_seconds % series.epoch_seconds != 0) {
    throw Error(ErrorCode::Contract, "target epoch length " + std::to_string(target_seconds) +
                                         " s is not a multiple of " + std::to_string(series.epoch_seconds) + " s");
  }
  const std::size_t factor = static_cast<std::size_t>(target_seconds / series.epoch_seconds);
  const std::size_t blocks = series.size() / factor;

  EpochSeries out;
  out.subject_id = series.subject_id;
  out.epoch_seconds = target_seconds;
  out.start_time = series.start_time;
  out.counts.resize(blocks, 0.0);
  if (series.truth) out.truth = std::vector<int>(blocks, 0);
  for (std::size_t b = 0; b < blocks; ++b) {
    std::size_t sleep = 0;
    for (std::size_t j = 0; j < factor; ++j) {
      out.counts[b] += series.counts[b * factor + j];
      if (series.truth) sleep += static_cast<std::size_t>((*series.truth)[b * factor + j]);
    }
    if (series.truth) (*out.truth)[b] = 2 * sleep >= factor ? 1 : 0;
  }
  return out;
}

void SyntheticConfig::validate() const {
  if (n_subjects < 1) throw Error(ErrorCode::Contract, "synthetic: n_subjects must be >= 1");
  if (n_days < 1) throw Error(ErrorCode::Contract, "synthetic: n_days must be >= 1");
  if (epoch_seconds <= 0 || kSecondsPerDay % epoch_seconds != 0) {
    throw Error(ErrorCode::Contract, "synthetic: epoch_seconds must divide one day");
  }
  if (!(sleep_mean > 0.0) || !(wake_mean > 0.0) || !(dwell_sleep > 0.0) || !(dwell_wake > 0.0)) {
    throw Error(ErrorCode::Contract, "synthetic: means and dwell times must be strictly positive");
  }
  if (!(bedtime_hour >= 0.0 && bedtime_hour < 24.0) || !(risetime_hour >= 0.0 && risetime_hour < 24.0)) {
    throw Error(ErrorCode::Contract, "synthetic: bedtime/risetime hours must lie in [0, 24)");
  }
}

namespace {

EpochSeries synthesize_subject(const SyntheticConfig& cfg, int index) {
  using namespace std::chrono;
  char id[16];
  std::snprintf(id, sizeof(id), "S%03d", index + 1);

  Rng rng(derive_seed(cfg.seed, std::string_view(id)));
  const double epoch_hours = cfg.epoch_seconds / 3600.0;
  const std::size_t per_day = static_cast<std::size_t>(kSecondsPerDay / cfg.epoch_seconds);
  const std::size_t length = per_day * static_cast<std::size_t>(cfg.n_days);

  EpochSeries series;
  series.subject_id = id;
  series.epoch_seconds = cfg.epoch_seconds;
  series.start_time = sys_days{year{2024} / January / 1} + hours{12};
  series.counts.resize(length);
  std::vector<int> truth(length, 0);

  // Nightly bed periods in hours since the series start (noon).
  const double chronotype = 0.75 * rng.normal();
  double night_length = cfg.risetime_hour - cfg.bedtime_hour;
  if (night_length <= 0.0) night_length += 24.0;
  const double bed_from_noon = std::fmod(cfg.bedtime_hour - 12.0 + 24.0, 24.0);
  std::vector<std::pair<double, double>> nights;
  for (int d = 0; d <= cfg.n_days; ++d) {
    const double start = 24.0 * d + bed_from_noon + chronotype + 0.5 * rng.normal();
    const double end = start + night_length + 0.5 * rng.normal();
    nights.emplace_back(start, std::max(end, start + 1.0));
  }

  const double nap_rate = 0.3 * epoch_hours / 24.0;
  bool asleep = false;
  bool was_in_bed = false;
  std::uint64_t dwell = 0;
  std::size_t night = 0;
  for (std::size_t t = 0; t < length; ++t) {
    const double hour = static_cast<double>(t) * epoch_hours;
    while (night < nights.size() && hour >= nights[night].second) ++night;
    const bool in_bed = night < nights.size() && hour >= nights[night].first;

    if (in_bed) {
      if (!was_in_bed) {
        asleep = false;  // sleep-onset latency
        dwell = rng.geometric_length(2.0 * cfg.dwell_wake);
      } else if (dwell == 0) {
        asleep = !asleep;
        dwell = rng.geometric_length(asleep ? cfg.dwell_sleep : cfg.dwell_wake);
      }
    } else {
      if (was_in_bed) {
        asleep = false;
        dwell = 0;
      }
      if (asleep && dwell == 0) asleep = false;
      if (!asleep && rng.bernoulli(nap_rate)) {
        asleep = true;
        dwell = rng.geometric_length(cfg.dwell_sleep / 4.0);
      }
    }
    was_in_bed = in_bed;
    if (dwell > 0) --dwell;

    double count;
    if (asleep) {
      count = rng.gamma(0.5, cfg.sleep_mean / 0.5);
    } else if (in_bed) {
      count = rng.gamma(1.0, 0.35 * cfg.wake_mean);  // quiet wake
    } else {
      count = rng.gamma(1.2, cfg.wake_mean / 1.2);
    }
    series.counts[t] = std::floor(count + 0.5);
    truth[t] = asleep ? 1 : 0;
  }
  series.truth = std::move(truth);
  return series;
}

}  // namespace

std::vector<EpochSeries> generate_synthetic(const SyntheticConfig& config) {
  config.validate();
  std::vector<EpochSeries> out;
  out.reserve(static_cast<std::size_t>(config.n_subjects));
  for (int i = 0; i < config.n_subjects; ++i) out.push_back(synthesize_subject(config, i));
  return out;
}

std::vector<WindowedInput> make_windows(std::span<const double> counts, int h) {
  if (h < 1) throw Error(ErrorCode::Contract, "window history h must be >= 1");
  const std::size_t history = static_cast<std::size_t>(h);
  std::vector<WindowedInput> windows;
  if (counts.size() <= history) return windows;
  windows.reserve(counts.size() - history);
  for (std::size_t t = history; t < counts.size(); ++t) {
    WindowedInput w;
    w.t_index = t;
    w.values.resize(history + 1);
    for (std::size_t j = 0; j <= history; ++j) w.values[j] = counts[t - j];
    windows.push_back(std::move(w));
  }
  return windows;
}

DataSplit split_record(std::size_t length, int h, const SplitFractions& f) {
  if (h < 1) throw Error(ErrorCode::Contract, "window history h must be >= 1");
  if (!(f.train > 0.0) || !(f.val > 0.0) || !(f.test > 0.0) || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw Error(ErrorCode::Contract, "split fractions must be positive and sum to 1");
  }
  const std::size_t history = static_cast<std::size_t>(h);
  const std::size_t usable = length > history ? length - history : 0;
  // The small slack absorbs representation error such as 0.2 * 100.
  const auto block = [usable](double fraction) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(usable) * fraction + 1e-9));
  };
  const std::size_t n_val = block(f.val);
  const std::size_t n_test = block(f.test);
  if (n_val == 0 || n_test == 0 || n_val + n_test >= usable) {
    throw Error(ErrorCode::Contract, "empty split block");
  }
  const std::size_t n_train = usable - n_val - n_test;

  DataSplit split;
  std::size_t t = history;
  for (std::size_t i = 0; i < n_train; ++i) split.train.push_back(t++);
  for (std::size_t i = 0; i < n_val; ++i) split.val.push_back(t++);
  for (std::size_t i = 0; i < n_test; ++i) split.test.push_back(t++);
  return split;
}

}  // namespace somnolog
