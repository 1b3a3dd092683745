#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace tdprobe {

// Received bytes per fixed-width time bin; bins are relative to the run start.
struct ThroughputSeries {
  std::uint32_t bin_width_ms = 100;
  std::vector<std::uint64_t> bins;

  std::uint64_t total_bytes() const;
};

enum class GapDirection { OriginalSlower, ControlSlower, None };

enum class VerdictReason {
  Detected,
  NoDifference,
  OfferedRateBelowPath,
  InsufficientRuns,
  HighVolatility,
};

std::string to_string(GapDirection direction);
std::string to_string(VerdictReason reason);

struct DetectionVerdict {
  bool differentiated = false;
  GapDirection direction = GapDirection::None;
  double ks_stat = 0.0;
  double area_gap = 0.0;
  int runs_flagged = 0;
  int runs_total = 0;
  VerdictReason reason = VerdictReason::NoDifference;
};

struct DetectConfig {
  double ks_threshold = 0.5;
  double area_threshold = 0.2;
  int min_runs = 3;
  std::uint32_t warmup_bins = 5;
};

// One back-to-back run: measured series for the original and control replays.
struct RunPair {
  ThroughputSeries original;
  ThroughputSeries control;
  bool original_completed = true;
  bool control_completed = true;
};

// Element k = 8 * (sum of bins[0..k]) / ((k+1) * bin seconds).
std::vector<double> running_average_bps(const ThroughputSeries &series);

// Element k = 8 * bins[k] / bin seconds, after dropping the first warmup_bins
// bins. Throws SeriesTooShort when fewer than warmup_bins + 10 bins exist.
std::vector<double> per_bin_rates_bps(const ThroughputSeries &series, std::uint32_t warmup_bins = 5);

// Two-sample Kolmogorov-Smirnov statistic: sup |F_a(x) - F_b(x)| over the
// empirical CDFs. Symmetric; exact (no approximation).
double ks_statistic(std::span<const double> a, std::span<const double> b);

// |mean(a) - mean(b)| / max(mean(a), mean(b), 1.0).
double area_gap(std::span<const double> a, std::span<const double> b);

DetectionVerdict detect(const std::vector<RunPair> &pairs, double trace_offered_rate_bps,
                        const DetectConfig &config = {});

// {"differentiated":...,"direction":...,"ks":...,"area_gap":...,
//  "runs_flagged":...,"runs_total":...,"reason":...} — stable key order.
std::string verdict_to_json(const DetectionVerdict &verdict);

// CSV with header "bin_index,bytes,bps"; the bin width is recoverable from
// any row with bytes > 0 (width_ms = 8000 * bytes / bps).
void write_series_csv(const ThroughputSeries &series, const std::filesystem::path &path);
ThroughputSeries read_series_csv(const std::filesystem::path &path);

}  // namespace tdprobe
