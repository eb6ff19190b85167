#include "otflow/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

#include "otflow/bench.hpp"
#include "otflow/errors.hpp"
#include "otflow/flow.hpp"
#include "otflow/metrics.hpp"
#include "otflow/objective.hpp"

#ifndef OTFLOW_VERSION
#define OTFLOW_VERSION "unknown"
#endif

namespace otflow {
namespace {

namespace fs = std::filesystem;

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
  T out{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, out);
  if (ec != std::errc() || ptr != end || text.empty())
    throw ConfigError(fmt::format("config field '{}': cannot parse '{}'", key, text));
  return out;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

double six_digits(double v) {
  if (!std::isfinite(v)) return v;
  return std::stod(fmt::format("{:.6g}", v));
}

std::string g6(double v) { return fmt::format("{:.6g}", v); }

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

nlohmann::ordered_json versions() {
  nlohmann::ordered_json v;
  v["otflow"] = OTFLOW_VERSION;
  v["eigen"] = fmt::format("{}.{}.{}", EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION, EIGEN_MINOR_VERSION);
  v["fmt"] = fmt::format("{}.{}.{}", FMT_VERSION / 10000, FMT_VERSION / 100 % 100, FMT_VERSION % 100);
  v["cli11"] = CLI11_VERSION;
  v["compiler"] = __VERSION__;
  return v;
}

std::string source_label(const RunConfig& c) {
  if (!c.csv.empty()) return "csv:" + c.csv;
  if (c.normal > 0) return fmt::format("normal:{}", c.normal);
  return "toy:" + c.toy;
}

// Options shared by commands that read a checkpoint and may replace its data source.
struct DataOverrides {
  std::string toy, csv, normal, samples, data_seed;

  void add_to(CLI::App* app) {
    app->add_option("--toy", toy, "Toy density name");
    app->add_option("--csv", csv, "CSV file of numeric rows");
    app->add_option("--normal", normal, "Standard-normal data of this dimension");
    app->add_option("--samples", samples, "Rows drawn for toy and normal sources");
    app->add_option("--data_seed", data_seed, "Seed of the data draw and split");
  }

  void apply(RunConfig& c) const {
    // An explicit source replaces the one recorded in the checkpoint.
    if (!csv.empty() || !toy.empty() || !normal.empty()) {
      c.csv.clear();
      c.normal = 0;
    }
    if (!toy.empty()) apply_run_entry(c, "toy", toy);
    if (!normal.empty()) apply_run_entry(c, "normal", normal);
    if (!csv.empty()) apply_run_entry(c, "csv", csv);
    if (!samples.empty()) apply_run_entry(c, "samples", samples);
    if (!data_seed.empty()) apply_run_entry(c, "data_seed", data_seed);
  }
};

RunConfig config_from_checkpoint(const Checkpoint& ck) {
  RunConfig c;
  for (const auto& [k, v] : ck.config)
    if (!apply_run_entry(c, k, v))
      throw ParseError(fmt::format("checkpoint config has unknown key '{}'", k), 0, 0);
  return c;
}

void check_dimension(Index data_d, const Checkpoint& ck) {
  if (data_d != ck.params.dim())
    throw ConfigError(fmt::format("data has dimension {}, checkpoint model expects {}", data_d,
                                  ck.params.dim()));
  if (ck.mean.size() != ck.params.dim() || ck.std.size() != ck.params.dim())
    throw ConfigError("checkpoint standardization statistics do not match the model dimension");
}

// Test rows of the run's data, mapped into the checkpoint's model coordinates.
Matrix model_test_rows(const RunConfig& c, const Checkpoint& ck) {
  const DatasetSplit split = load_run_data(c);
  check_dimension(split.dim(), ck);
  return standardize(unstandardize(split.test, split.mean, split.std), ck.mean, ck.std);
}

int resolve_nt(int requested, const RunConfig& c) {
  const int nt = requested > 0 ? requested : c.train.validation_nt();
  if (nt < 1) throw ConfigError("nt must be >= 1");
  return nt;
}

class CsvLog {
 public:
  explicit CsvLog(const std::string& path) : out_(path) {
    if (!out_) throw ConfigError(fmt::format("cannot write '{}'", path));
    out_ << "iter,total,C,L,R,val_C,seconds\n";
  }
  void write(const TrainLogRow& r) {
    out_ << fmt::format("{},{},{},{},{},{},{}\n", r.iter, g6(r.total), g6(r.C), g6(r.L), g6(r.R),
                        g6(r.val_C), g6(r.seconds));
    out_.flush();
  }

 private:
  std::ofstream out_;
};

int cmd_train(const std::string& config_path, const std::vector<std::pair<std::string, std::string>>& overrides,
              std::ostream& out, std::ostream& err) {
  RunConfig c;
  if (!config_path.empty()) apply_config_file(c, config_path);
  for (const auto& [k, v] : overrides)
    if (!apply_run_entry(c, k, v)) throw ConfigError(fmt::format("unknown option '{}'", k));
  validate(c.train);

  const DatasetSplit data = load_run_data(c);
  fs::create_directories(c.out);
  const std::string ckpt_path = (fs::path(c.out) / "checkpoint.txt").string();
  const std::string log_path = (fs::path(c.out) / "train_log.csv").string();
  const std::string meta_path = (fs::path(c.out) / "run.json").string();

  out << fmt::format("training on {} (d={}, {} train / {} val rows), {} iterations max\n",
                     source_label(c), data.dim(), data.train.rows(), data.val.rows(),
                     c.train.max_iters);
  CsvLog log(log_path);
  const auto start = std::chrono::steady_clock::now();
  const TrainResult result = train(data, c.train, [&](const TrainLogRow& row) {
    log.write(row);
    if (!std::isnan(row.val_C))
      out << fmt::format("iter {:>6}  loss {:<12}  C {:<12}  val C {}\n", row.iter, g6(row.total),
                         g6(row.C), g6(row.val_C));
  });
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  Checkpoint ck;
  ck.params = result.best;
  ck.iteration = result.best_iter;
  ck.best_val_C = result.best_val_C;
  ck.mean = data.mean;
  ck.std = data.std;
  ck.config = run_entries(c);
  ck.save(ckpt_path);

  nlohmann::ordered_json meta;
  meta["command"] = "train";
  meta["seed"] = c.train.seed;
  nlohmann::ordered_json cfg;
  for (const auto& [k, v] : run_entries(c)) cfg[k] = v;
  meta["config"] = cfg;
  meta["versions"] = versions();
  meta["data"] = {{"source", source_label(c)},
                  {"dim", data.dim()},
                  {"train_rows", data.train.rows()},
                  {"val_rows", data.val.rows()},
                  {"test_rows", data.test.rows()},
                  {"dropped_rows", data.dropped_rows}};
  meta["result"] = {{"status", to_string(result.status)},
                    {"message", result.message},
                    {"iterations", result.iterations},
                    {"best_iter", result.best_iter},
                    {"best_val_C", six_digits(result.best_val_C)},
                    {"seconds", six_digits(seconds)}};
  std::ofstream(meta_path) << meta.dump(2) << "\n";

  out << fmt::format("{}: best validation C {} at iteration {}; wrote {}\n",
                     to_string(result.status), g6(result.best_val_C), result.best_iter, c.out);
  if (result.status == TrainStatus::diverged) {
    err << "error: training diverged: " << result.message << "\n";
    return kExitNumerical;
  }
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const DataOverrides& data, int nt_opt,
             Index generated, const std::string& seed, const std::string& report_path,
             std::ostream& out) {
  const Checkpoint ck = Checkpoint::load(ckpt_path);
  RunConfig c = config_from_checkpoint(ck);
  data.apply(c);
  const Matrix test = model_test_rows(c, ck);
  EvalConfig ec;
  ec.nt = resolve_nt(nt_opt, c);
  ec.generated = generated;
  if (!seed.empty()) ec.seed = parse_value<std::uint64_t>("seed", seed);
  if (generated < 1) throw ConfigError("generated must be >= 1");
  EvalReport r = evaluate(test, ck.params, ec);
  r.coordinates = c.csv.empty() ? "raw" : "standardized";
  ensure_parent(report_path);
  std::ofstream f(report_path);
  if (!f) throw ConfigError(fmt::format("cannot write '{}'", report_path));
  f << r.to_json() << "\n";
  out << r.summary();
  return kExitOk;
}

int cmd_generate(const std::string& ckpt_path, Index n, const std::string& seed, int nt_opt,
                 const std::string& out_path, std::ostream& out) {
  if (n < 1) throw ConfigError("n must be >= 1");
  const Checkpoint ck = Checkpoint::load(ckpt_path);
  const RunConfig c = config_from_checkpoint(ck);
  check_dimension(ck.params.dim(), ck);
  const int nt = resolve_nt(nt_opt, c);
  const std::uint64_t s = seed.empty() ? 0 : parse_value<std::uint64_t>("seed", seed);
  const Matrix y = sample_latent(n, ck.params.dim(), s);
  const Matrix x = unstandardize(integrate_inverse(y, ck.params, nt), ck.mean, ck.std);
  std::vector<std::string> header;
  for (Index j = 0; j < x.cols(); ++j) header.push_back(fmt::format("x{}", j + 1));
  ensure_parent(out_path);
  write_csv(out_path, x, header);
  out << fmt::format("wrote {} samples to {}\n", n, out_path);
  return kExitOk;
}

int cmd_density_grid(const std::string& ckpt_path, const std::vector<double>& bounds,
                     Index resolution, int nt_opt, const std::string& out_path, std::ostream& out) {
  const Checkpoint ck = Checkpoint::load(ckpt_path);
  const RunConfig c = config_from_checkpoint(ck);
  check_dimension(ck.params.dim(), ck);
  if (ck.params.dim() != 2)
    throw ConfigError(fmt::format("density-grid supports only d = 2, checkpoint has d = {}",
                                  ck.params.dim()));
  if (bounds.size() != 4 || !(bounds[0] < bounds[1]) || !(bounds[2] < bounds[3]))
    throw ConfigError("bounds must be xmin,xmax,ymin,ymax with min < max");
  if (resolution < 2) throw ConfigError("resolution must be >= 2");
  const int nt = resolve_nt(nt_opt, c);

  // Cell centers, x varying fastest.
  const double dx = (bounds[1] - bounds[0]) / static_cast<double>(resolution);
  const double dy = (bounds[3] - bounds[2]) / static_cast<double>(resolution);
  Matrix grid(resolution * resolution, 2);
  for (Index iy = 0; iy < resolution; ++iy)
    for (Index ix = 0; ix < resolution; ++ix) {
      grid(iy * resolution + ix, 0) = bounds[0] + (static_cast<double>(ix) + 0.5) * dx;
      grid(iy * resolution + ix, 1) = bounds[2] + (static_cast<double>(iy) + 0.5) * dy;
    }
  const Vector logp = log_density(grid, ck.params, ck.mean, ck.std, nt);

  ensure_parent(out_path);
  std::ofstream f(out_path);
  if (!f) throw ConfigError(fmt::format("cannot write '{}'", out_path));
  f << "x,y,log_density\n";
  for (Index i = 0; i < grid.rows(); ++i)
    f << fmt::format("{},{},{}\n", g6(grid(i, 0)), g6(grid(i, 1)), g6(logp(i)));
  const double mass = logp.array().exp().sum() * dx * dy;
  out << fmt::format("wrote {}x{} grid to {}; probability mass in box {}\n", resolution,
                     resolution, out_path, g6(mass));
  return kExitOk;
}

int cmd_bench(const BenchConfig& bc, const std::string& out_path, std::ostream& out) {
  const BenchSummary s = bench_trace(bc);
  ensure_parent(out_path);
  write_bench_csv(out_path, s);
  out << bench_report(bc, s);
  out << fmt::format("wrote {}\n", out_path);
  return kExitOk;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> run_entries(const RunConfig& c) {
  auto entries = config_entries(c.train);
  entries.emplace_back("toy", c.toy);
  entries.emplace_back("csv", c.csv);
  entries.emplace_back("normal", fmt::format("{}", c.normal));
  entries.emplace_back("samples", fmt::format("{}", c.samples));
  entries.emplace_back("data_seed", fmt::format("{}", c.data_seed));
  entries.emplace_back("out", c.out);
  return entries;
}

bool apply_run_entry(RunConfig& c, const std::string& key, const std::string& value) {
  if (apply_config_entry(c.train, key, value)) return true;
  if (key == "toy") c.toy = value;
  else if (key == "csv") c.csv = value;
  else if (key == "normal") c.normal = parse_value<Index>(key, value);
  else if (key == "samples") c.samples = parse_value<Index>(key, value);
  else if (key == "data_seed") c.data_seed = parse_value<std::uint64_t>(key, value);
  else if (key == "out") c.out = value;
  else return false;
  return true;
}

void apply_config_text(RunConfig& c, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  for (long line_no = 1; std::getline(in, line); ++line_no) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(fmt::format("config line {}: expected 'key = value'", line_no));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (!apply_run_entry(c, key, value))
        throw ConfigError(fmt::format("unknown key '{}'", key));
    } catch (const ConfigError& e) {
      throw ConfigError(fmt::format("config line {}: {}", line_no, e.what()));
    }
  }
}

void apply_config_file(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config file '{}'", path));
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(c, ss.str());
}

DatasetSplit load_run_data(const RunConfig& c) {
  if (c.samples < 10) throw ConfigError("samples must be >= 10");
  if (!c.csv.empty()) return load_csv(c.csv, Delimiter::automatic, {}, c.data_seed);
  if (c.normal > 0)
    return split_and_standardize(sample_latent(c.samples, c.normal, c.data_seed), {}, c.data_seed,
                                 source_label(c), false);
  try {
    return make_toy_split(c.toy, c.samples, c.data_seed);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"OT-Flow continuous normalizing flows"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a flow and write checkpoint, log and metadata");
  std::string config_path;
  train_cmd->set_help_flag("--help", "Print this help message and exit");
  train_cmd->add_option("--config", config_path, "Flat key = value config file");
  const RunConfig defaults;
  std::vector<std::pair<std::string, std::string>> keys = run_entries(defaults);
  keys.emplace_back("nt", "");
  std::map<std::string, std::string> given;
  for (const auto& [k, v] : keys) {
    auto* opt = train_cmd->add_option("--" + k, given[k]);
    if (k == "nt") opt->description("Alias of --nt_train");
    else opt->description(fmt::format("(default {})", v.empty() ? "\"\"" : v));
  }

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on test data");
  std::string ckpt;
  DataOverrides data;
  int nt = 0;
  Index generated = 100000;
  std::string seed;
  std::string report_path = "report.json";
  eval_cmd->add_option("--checkpoint", ckpt)->required();
  data.add_to(eval_cmd);
  eval_cmd->add_option("--nt", nt, "Time steps (default: the checkpoint's validation grid)");
  eval_cmd->add_option("--generated", generated, "Generated samples for MMD");
  eval_cmd->add_option("--seed", seed, "Seed of the latent draws");
  eval_cmd->add_option("--out", report_path, "Report file (one JSON line)");

  // generate
  auto* gen_cmd = app.add_subcommand("generate", "Sample through the inverse flow");
  Index n = 1000;
  std::string samples_path = "samples.csv";
  gen_cmd->add_option("--checkpoint", ckpt)->required();
  gen_cmd->add_option("--n", n, "Number of samples");
  gen_cmd->add_option("--seed", seed, "Seed of the latent draws");
  gen_cmd->add_option("--nt", nt, "Time steps (default: the checkpoint's validation grid)");
  gen_cmd->add_option("--out", samples_path, "Output CSV");

  // density-grid
  auto* grid_cmd = app.add_subcommand("density-grid", "Estimated log density on a 2-D grid");
  std::vector<double> bounds{-6.0, 6.0, -6.0, 6.0};
  Index resolution = 100;
  std::string grid_path = "grid.csv";
  grid_cmd->add_option("--checkpoint", ckpt)->required();
  grid_cmd->add_option("--bounds", bounds, "xmin,xmax,ymin,ymax")->delimiter(',')->expected(4);
  grid_cmd->add_option("--resolution", resolution, "Cells per axis");
  grid_cmd->add_option("--nt", nt, "Time steps (default: the checkpoint's validation grid)");
  grid_cmd->add_option("--seed", seed, "Accepted for uniformity; the grid is deterministic");
  grid_cmd->add_option("--out", grid_path, "Output CSV");

  // bench-trace
  auto* bench_cmd = app.add_subcommand("bench-trace", "Exact trace vs Hutchinson timing and error");
  BenchConfig bc;
  std::string probe_dist = "rademacher";
  std::string bench_path = "bench.csv";
  bench_cmd->add_option("--dims", bc.dims, "Dimensions")->delimiter(',');
  bench_cmd->add_option("--m", bc.m, "Width");
  bench_cmd->add_option("--M", bc.M, "Hidden ResNet layers");
  bench_cmd->add_option("--batch", bc.batch, "Points per timed batch");
  bench_cmd->add_option("--reps", bc.reps, "Timed repetitions (>= 5)");
  bench_cmd->add_option("--warmup", bc.warmup, "Untimed warm-up calls");
  bench_cmd->add_option("--probes", bc.probe_counts, "Probe counts K")->delimiter(',');
  bench_cmd->add_option("--error_points", bc.error_points, "Points for the error panel");
  bench_cmd->add_option("--probe_dist", probe_dist, "rademacher or gaussian");
  bench_cmd->add_option("--seed", bc.seed, "Seed");
  bench_cmd->add_option("--out", bench_path, "Output CSV");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUserError;
  }

  try {
    if (*train_cmd) {
      std::vector<std::pair<std::string, std::string>> overrides;
      for (const auto& [k, v] : keys)
        if (train_cmd->count("--" + k) > 0) overrides.emplace_back(k, given[k]);
      return cmd_train(config_path, overrides, out, err);
    }
    if (*eval_cmd) return cmd_eval(ckpt, data, nt, generated, seed, report_path, out);
    if (*gen_cmd) return cmd_generate(ckpt, n, seed, nt, samples_path, out);
    if (*grid_cmd) return cmd_density_grid(ckpt, bounds, resolution, nt, grid_path, out);
    if (*bench_cmd) {
      if (probe_dist == "rademacher") bc.probe_dist = ProbeDistribution::rademacher;
      else if (probe_dist == "gaussian") bc.probe_dist = ProbeDistribution::gaussian;
      else throw ConfigError(fmt::format("probe_dist must be rademacher or gaussian, got '{}'", probe_dist));
      return cmd_bench(bc, bench_path, out);
    }
  } catch (const DivergenceError& e) {
    err << "error: numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUserError;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUserError;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUserError;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUserError;
  }
  return kExitUserError;
}

}  // namespace otflow
