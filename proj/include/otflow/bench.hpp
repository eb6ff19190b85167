#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "otflow/potential.hpp"

namespace otflow {

struct BenchConfig {
  std::vector<Index> dims{43, 63, 784};
  Index m = 16;
  int M = 1;
  Index batch = 1024;
  int reps = 20;
  int warmup = 3;
  std::vector<int> probe_counts{1, 4, 16, 64};
  Index error_points = 256;  // points per dimension for the relative-error panel
  ProbeDistribution probe_dist = ProbeDistribution::rademacher;
  std::uint64_t seed = 0;
};

// Throws ConfigError for reps < 5 or empty/non-positive lists.
void validate(const BenchConfig& config);

// One timing or error cell. method is "exact", "hutchinson" or "empty".
// Timing columns are per batch in seconds; error columns are NaN for timing-only
// rows and for "exact".
struct BenchRow {
  Index d = 0;
  std::string method;
  int K = 0;
  double median_seconds = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double rel_err_median = 0.0;
  double rel_err_ci_lo = 0.0;
  double rel_err_ci_hi = 0.0;
};

struct BenchSummary {
  std::vector<BenchRow> rows;
  // Per entry of config.dims.
  std::vector<double> exact_over_hutchinson1;  // NaN when K = 1 is not benchmarked
  std::vector<double> error_slope;             // log-log slope of median error vs K
  double linear_fit_r2 = 0.0;                  // exact median time against d
  double harness_overhead = 0.0;               // empty-kernel median / smallest exact median
};

BenchSummary bench_trace(const BenchConfig& config);

// Wall times in seconds of `reps` calls of `kernel`, after `warmup` untimed calls.
std::vector<double> time_kernel(const std::function<void()>& kernel, int reps, int warmup);

const std::vector<std::string>& bench_csv_header();
std::vector<std::string> bench_csv_fields(const BenchRow& row);
void write_bench_csv(const std::string& path, const BenchSummary& summary);
std::string bench_report(const BenchConfig& config, const BenchSummary& summary);

// Slope and coefficient of determination of the least-squares line y = a + b x.
struct LineFit {
  double intercept = 0.0;
  double slope = 0.0;
  double r2 = 0.0;
};
LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace otflow
