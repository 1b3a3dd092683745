#include "tdprobe/detector.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>

#include "tdprobe/errors.hpp"

namespace tdprobe {

namespace {

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  if (v.size() % 2 == 1) return v[mid];
  return 0.5 * (v[mid - 1] + v[mid]);
}

// Shortest round-trip representation; deterministic across runs.
std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Fixed notation for CSV cells (still round-trip exact, never scientific).
std::string format_fixed(double v) {
  char buf[512];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed);
  return std::string(buf, res.ptr);
}

TdError malformed_series(const std::filesystem::path &path, std::size_t line_no, const std::string &message) {
  return {ErrorKind::Config, "MalformedSeries", path.string() + ":" + std::to_string(line_no) + ": " + message};
}

}  // namespace

std::uint64_t ThroughputSeries::total_bytes() const {
  return std::accumulate(bins.begin(), bins.end(), std::uint64_t{0});
}

std::string to_string(GapDirection direction) {
  switch (direction) {
    case GapDirection::OriginalSlower:
      return "OriginalSlower";
    case GapDirection::ControlSlower:
      return "ControlSlower";
    case GapDirection::None:
      return "None";
  }
  return "None";
}

std::string to_string(VerdictReason reason) {
  switch (reason) {
    case VerdictReason::Detected:
      return "Detected";
    case VerdictReason::NoDifference:
      return "NoDifference";
    case VerdictReason::OfferedRateBelowPath:
      return "OfferedRateBelowPath";
    case VerdictReason::InsufficientRuns:
      return "InsufficientRuns";
    case VerdictReason::HighVolatility:
      return "HighVolatility";
  }
  return "NoDifference";
}

std::vector<double> running_average_bps(const ThroughputSeries &series) {
  if (series.bins.empty())
    throw TdError(ErrorKind::Config, "EmptySeries", "running average needs at least one bin");
  if (series.bin_width_ms == 0)
    throw TdError(ErrorKind::Config, "EmptySeries", "bin width must be positive");
  std::vector<double> out;
  out.reserve(series.bins.size());
  double cumulative = 0.0;
  for (std::size_t k = 0; k < series.bins.size(); ++k) {
    cumulative += static_cast<double>(series.bins[k]);
    out.push_back(8000.0 * cumulative / (static_cast<double>(k + 1) * series.bin_width_ms));
  }
  return out;
}

std::vector<double> per_bin_rates_bps(const ThroughputSeries &series, std::uint32_t warmup_bins) {
  const std::size_t needed = static_cast<std::size_t>(warmup_bins) + 10;
  if (series.bins.size() < needed) throw series_too_short(series.bins.size(), needed);
  if (series.bin_width_ms == 0)
    throw TdError(ErrorKind::Config, "EmptySeries", "bin width must be positive");
  std::vector<double> out;
  out.reserve(series.bins.size() - warmup_bins);
  for (std::size_t k = warmup_bins; k < series.bins.size(); ++k)
    out.push_back(8000.0 * static_cast<double>(series.bins[k]) / series.bin_width_ms);
  return out;
}

double ks_statistic(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty())
    throw TdError(ErrorKind::Config, "EmptySamples", "ks_statistic needs non-empty sample lists");
  std::vector<double> sa(a.begin(), a.end());
  std::vector<double> sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const double na = static_cast<double>(sa.size());
  const double nb = static_cast<double>(sb.size());
  std::size_t i = 0, j = 0;
  double sup = 0.0;
  while (i < sa.size() || j < sb.size()) {
    double x;
    if (i < sa.size() && j < sb.size())
      x = std::min(sa[i], sb[j]);
    else if (i < sa.size())
      x = sa[i];
    else
      x = sb[j];
    while (i < sa.size() && sa[i] == x) ++i;
    while (j < sb.size() && sb[j] == x) ++j;
    sup = std::max(sup, std::fabs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return sup;
}

double area_gap(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty())
    throw TdError(ErrorKind::Config, "EmptySamples", "area_gap needs non-empty sample lists");
  const double ma = mean_of(a);
  const double mb = mean_of(b);
  return std::fabs(ma - mb) / std::max({ma, mb, 1.0});
}

DetectionVerdict detect(const std::vector<RunPair> &pairs, double trace_offered_rate_bps,
                        const DetectConfig &config) {
  const std::size_t needed_bins = static_cast<std::size_t>(config.warmup_bins) + 10;
  std::vector<double> ks_vals;
  std::vector<double> area_vals;
  std::vector<double> orig_means;
  std::vector<double> ctrl_means;
  int completed = 0;
  int flagged = 0;
  int flagged_original_slower = 0;
  int flagged_control_slower = 0;

  for (const RunPair &pair : pairs) {
    if (!pair.original_completed || !pair.control_completed) continue;
    if (pair.original.bins.size() < needed_bins || pair.control.bins.size() < needed_bins) continue;
    const auto rates_orig = per_bin_rates_bps(pair.original, config.warmup_bins);
    const auto rates_ctrl = per_bin_rates_bps(pair.control, config.warmup_bins);
    ++completed;
    const double ks = ks_statistic(rates_orig, rates_ctrl);
    const double area = area_gap(rates_orig, rates_ctrl);
    ks_vals.push_back(ks);
    area_vals.push_back(area);
    const double mean_orig = mean_of(rates_orig);
    const double mean_ctrl = mean_of(rates_ctrl);
    orig_means.push_back(mean_orig);
    ctrl_means.push_back(mean_ctrl);
    if (ks > config.ks_threshold && area > config.area_threshold) {
      ++flagged;
      if (mean_orig < mean_ctrl)
        ++flagged_original_slower;
      else
        ++flagged_control_slower;
    }
  }

  DetectionVerdict verdict;
  verdict.runs_total = completed;
  verdict.runs_flagged = flagged;
  verdict.ks_stat = median_of(ks_vals);
  verdict.area_gap = median_of(area_vals);

  if (completed < config.min_runs) {
    verdict.reason = VerdictReason::InsufficientRuns;
    return verdict;
  }

  // A probe whose offered rate sits below the path's effective limit measures
  // the same throughput on both replays and cannot witness shaping.
  const double overall_orig = mean_of(orig_means);
  const double overall_ctrl = mean_of(ctrl_means);
  if (trace_offered_rate_bps > 0.0 && overall_orig >= 0.9 * trace_offered_rate_bps &&
      overall_ctrl >= 0.9 * trace_offered_rate_bps) {
    verdict.reason = VerdictReason::OfferedRateBelowPath;
    return verdict;
  }

  if (2 * flagged > completed) {
    if (flagged_original_slower > 0 && flagged_control_slower > 0) {
      verdict.reason = VerdictReason::HighVolatility;
      return verdict;
    }
    verdict.differentiated = true;
    verdict.reason = VerdictReason::Detected;
    verdict.direction =
        flagged_original_slower > 0 ? GapDirection::OriginalSlower : GapDirection::ControlSlower;
    return verdict;
  }

  verdict.reason = VerdictReason::NoDifference;
  return verdict;
}

std::string verdict_to_json(const DetectionVerdict &verdict) {
  std::string out = "{\"differentiated\":";
  out += verdict.differentiated ? "true" : "false";
  out += ",\"direction\":\"" + to_string(verdict.direction) + "\"";
  out += ",\"ks\":" + format_double(verdict.ks_stat);
  out += ",\"area_gap\":" + format_double(verdict.area_gap);
  out += ",\"runs_flagged\":" + std::to_string(verdict.runs_flagged);
  out += ",\"runs_total\":" + std::to_string(verdict.runs_total);
  out += ",\"reason\":\"" + to_string(verdict.reason) + "\"}";
  return out;
}

void write_series_csv(const ThroughputSeries &series, const std::filesystem::path &path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_failure(path.string(), "cannot open for writing");
  f << "bin_index,bytes,bps\n";
  for (std::size_t k = 0; k < series.bins.size(); ++k) {
    const double bps = 8000.0 * static_cast<double>(series.bins[k]) / series.bin_width_ms;
    f << k << ',' << series.bins[k] << ',' << format_fixed(bps) << '\n';
  }
  f.flush();
  if (!f) throw io_failure(path.string(), "write failed");
}

ThroughputSeries read_series_csv(const std::filesystem::path &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_failure(path.string(), "cannot open for reading");
  std::string line;
  if (!std::getline(f, line)) throw malformed_series(path, 1, "empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "bin_index,bytes,bps")
    throw malformed_series(path, 1, "expected header \"bin_index,bytes,bps\"");

  ThroughputSeries series;
  series.bin_width_ms = 0;
  std::size_t line_no = 1;
  std::size_t expect_index = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;

    const std::size_t c1 = line.find(',');
    const std::size_t c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
    if (c2 == std::string::npos) throw malformed_series(path, line_no, "expected three comma-separated fields");

    std::size_t index = 0;
    std::uint64_t bytes = 0;
    auto r1 = std::from_chars(line.data(), line.data() + c1, index);
    auto r2 = std::from_chars(line.data() + c1 + 1, line.data() + c2, bytes);
    if (r1.ec != std::errc{} || r1.ptr != line.data() + c1)
      throw malformed_series(path, line_no, "bad bin_index");
    if (r2.ec != std::errc{} || r2.ptr != line.data() + c2)
      throw malformed_series(path, line_no, "bad bytes field");
    const std::string bps_text = line.substr(c2 + 1);
    char *endp = nullptr;
    const double bps = std::strtod(bps_text.c_str(), &endp);
    if (endp == bps_text.c_str() || *endp != '\0' || bps < 0.0 || !std::isfinite(bps))
      throw malformed_series(path, line_no, "bad bps field");
    if (index != expect_index) throw malformed_series(path, line_no, "non-contiguous bin_index");

    if (bytes > 0 && bps > 0.0) {
      const auto width = static_cast<std::uint32_t>(std::llround(8000.0 * static_cast<double>(bytes) / bps));
      if (width == 0) throw malformed_series(path, line_no, "implied bin width is zero");
      if (series.bin_width_ms == 0)
        series.bin_width_ms = width;
      else if (width != series.bin_width_ms)
        throw malformed_series(path, line_no, "inconsistent implied bin width");
    }
    series.bins.push_back(bytes);
    ++expect_index;
  }
  if (series.bins.empty()) throw malformed_series(path, line_no, "no data rows");
  if (series.bin_width_ms == 0) series.bin_width_ms = 100;  // all-zero series carries no width signal
  return series;
}

}  // namespace tdprobe
