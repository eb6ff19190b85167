#include "otflow/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "otflow/errors.hpp"
#include "otflow/metrics.hpp"

namespace otflow {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

volatile double g_sink = 0.0;

void fill(Matrix& x, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Index j = 0; j < x.cols(); ++j)
    for (Index i = 0; i < x.rows(); ++i) x(i, j) = u(rng);
}

void fill(Vector& x, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Index i = 0; i < x.size(); ++i) x(i) = u(rng);
}

// Glorot-scaled weights and O(1) output layers, so both the network and the
// quadratic term contribute to the trace.
ModelParams bench_params(Index d, const BenchConfig& c, std::mt19937_64& rng) {
  ModelParams p = init_params({.d = d, .m = c.m, .M = c.M}, rng);
  fill(p.w, 1.0, rng);
  fill(p.A, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  fill(p.b, 1.0, rng);
  fill(p.resnet.b0, 1.0, rng);
  for (auto& layer : p.resnet.layers) fill(layer.b, 1.0, rng);
  return p;
}

Matrix bench_points(Index n, Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix S(n, d + 1);
  for (Index j = 0; j < d; ++j)
    for (Index i = 0; i < n; ++i) S(i, j) = n01(rng);
  std::uniform_real_distribution<double> t(0.0, 1.0);
  for (Index i = 0; i < n; ++i) S(i, d) = t(rng);
  return S;
}

BenchRow timing_row(Index d, std::string method, int K, std::vector<double> seconds,
                    std::uint64_t seed) {
  BenchRow row{.d = d, .method = std::move(method), .K = K};
  row.median_seconds = median(seconds);
  std::tie(row.ci_lo, row.ci_hi) = bootstrap_ci(seconds, {.seed = seed});
  row.rel_err_median = row.rel_err_ci_lo = row.rel_err_ci_hi = kNaN;
  return row;
}

std::string g6(double v) { return fmt::format("{:.6g}", v); }

}  // namespace

void validate(const BenchConfig& c) {
  if (c.reps < 5) throw ConfigError(fmt::format("reps must be >= 5, got {}", c.reps));
  if (c.warmup < 0) throw ConfigError("warmup must be >= 0");
  if (c.dims.empty() || std::any_of(c.dims.begin(), c.dims.end(), [](Index d) { return d < 1; }))
    throw ConfigError("dims must be a non-empty list of positive dimensions");
  if (c.probe_counts.empty() ||
      std::any_of(c.probe_counts.begin(), c.probe_counts.end(), [](int k) { return k < 1; }))
    throw ConfigError("probe counts must be a non-empty list of positive integers");
  if (c.m < 1 || c.M < 1) throw ConfigError("m and M must be >= 1");
  if (c.batch < 1 || c.error_points < 2) throw ConfigError("batch >= 1 and error_points >= 2 required");
}

std::vector<double> time_kernel(const std::function<void()>& kernel, int reps, int warmup) {
  for (int i = 0; i < warmup; ++i) kernel();
  std::vector<double> seconds(static_cast<std::size_t>(reps));
  for (double& s : seconds) {
    const auto start = std::chrono::steady_clock::now();
    kernel();
    s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  return seconds;
}

LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r2 = syy > 0 ? sxy * sxy / (sxx * syy) : 1.0;
  return f;
}

BenchSummary bench_trace(const BenchConfig& c) {
  validate(c);
  BenchSummary out;
  std::mt19937_64 rng(c.seed);
  std::vector<double> dims_d, exact_medians;
  std::uint64_t ci_seed = c.seed;

  for (Index d : c.dims) {
    const ModelParams params = bench_params(d, c, rng);
    const Matrix S = bench_points(c.batch, d, rng);

    const auto exact_s = time_kernel(
        [&] {
          const BatchEvaluation eval(S, params);
          g_sink = eval.exact_trace()(0);
        },
        c.reps, c.warmup);
    out.rows.push_back(timing_row(d, "exact", 0, exact_s, ++ci_seed));
    dims_d.push_back(static_cast<double>(d));
    exact_medians.push_back(out.rows.back().median_seconds);

    double hutch1 = kNaN;
    for (int K : c.probe_counts) {
      std::vector<Matrix> probes;
      for (int k = 0; k < K; ++k) probes.push_back(draw_probes(c.batch, d, c.probe_dist, rng));
      const auto hutch_s = time_kernel(
          [&] {
            const BatchEvaluation eval(S, params);
            Vector acc = eval.hessian_quadratic(probes[0]);
            for (int k = 1; k < K; ++k) acc += eval.hessian_quadratic(probes[k]);
            g_sink = acc(0) / K;
          },
          c.reps, c.warmup);
      out.rows.push_back(timing_row(d, "hutchinson", K, hutch_s, ++ci_seed));
      if (K == 1) hutch1 = out.rows.back().median_seconds;
    }
    out.exact_over_hutchinson1.push_back(exact_medians.back() / hutch1);

    // Relative error panel on fresh points.
    const Matrix P = bench_points(c.error_points, d, rng);
    const BatchEvaluation eval(P, params);
    const Vector exact = eval.exact_trace();
    const int Kmax = *std::max_element(c.probe_counts.begin(), c.probe_counts.end());
    std::vector<Vector> quad;
    for (int k = 0; k < Kmax; ++k)
      quad.push_back(eval.hessian_quadratic(draw_probes(c.error_points, d, c.probe_dist, rng)));
    std::vector<double> logK, logErr;
    for (int K : c.probe_counts) {
      std::vector<double> err(static_cast<std::size_t>(c.error_points));
      for (Index i = 0; i < c.error_points; ++i) {
        double est = 0.0;
        for (int k = 0; k < K; ++k) est += quad[static_cast<std::size_t>(k)](i);
        est /= K;
        err[static_cast<std::size_t>(i)] = std::abs(est - exact(i)) / std::abs(exact(i));
      }
      BenchRow row{.d = d, .method = "hutchinson", .K = K};
      row.median_seconds = row.ci_lo = row.ci_hi = kNaN;
      row.rel_err_median = median(err);
      std::tie(row.rel_err_ci_lo, row.rel_err_ci_hi) = bootstrap_ci(err, {.seed = ++ci_seed});
      out.rows.push_back(row);
      logK.push_back(std::log(static_cast<double>(K)));
      logErr.push_back(std::log(row.rel_err_median));
    }
    out.error_slope.push_back(logK.size() >= 2 ? fit_line(logK, logErr).slope : kNaN);
  }

  out.linear_fit_r2 = dims_d.size() >= 2 ? fit_line(dims_d, exact_medians).r2 : kNaN;

  const auto empty_s = time_kernel([] { g_sink = 0.0; }, c.reps, c.warmup);
  out.rows.push_back(timing_row(0, "empty", 0, empty_s, ++ci_seed));
  out.harness_overhead = out.rows.back().median_seconds /
                         *std::min_element(exact_medians.begin(), exact_medians.end());
  return out;
}

const std::vector<std::string>& bench_csv_header() {
  static const std::vector<std::string> h{"d",      "method", "K",           "median_seconds",
                                          "ci_lo",  "ci_hi",  "rel_err_median",
                                          "rel_err_ci_lo", "rel_err_ci_hi"};
  return h;
}

std::vector<std::string> bench_csv_fields(const BenchRow& r) {
  return {std::to_string(r.d), r.method, std::to_string(r.K), g6(r.median_seconds), g6(r.ci_lo),
          g6(r.ci_hi), g6(r.rel_err_median), g6(r.rel_err_ci_lo), g6(r.rel_err_ci_hi)};
}

void write_bench_csv(const std::string& path, const BenchSummary& s) {
  std::ofstream out(path);
  if (!out) throw ConfigError(fmt::format("cannot write '{}'", path));
  out << fmt::format("{}\n", fmt::join(bench_csv_header(), ","));
  for (const auto& row : s.rows) out << fmt::format("{}\n", fmt::join(bench_csv_fields(row), ","));
}

std::string bench_report(const BenchConfig& c, const BenchSummary& s) {
  std::string r = fmt::format("trace benchmark: m={} M={} batch={} reps={}\n", c.m, c.M, c.batch,
                              c.reps);
  for (std::size_t i = 0; i < c.dims.size(); ++i)
    r += fmt::format("  d={}: exact/hutchinson(K=1) time {}, error slope {}\n", c.dims[i],
                     g6(s.exact_over_hutchinson1[i]), g6(s.error_slope[i]));
  r += fmt::format("  exact time vs d linear fit R^2 {}\n", g6(s.linear_fit_r2));
  r += fmt::format("  harness overhead {}\n", g6(s.harness_overhead));
  return r;
}

}  // namespace otflow
