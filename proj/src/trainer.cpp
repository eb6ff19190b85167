#include "otflow/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "otflow/errors.hpp"
#include "otflow/flow.hpp"
#include "otflow/objective.hpp"

namespace otflow {
namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T out{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, out);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError(fmt::format("config field '{}': cannot parse '{}'", key, text));
  }
  return out;
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void require(bool ok, const char* field, const char* rule) {
  if (!ok) throw ConfigError(fmt::format("config field '{}' must be {}", field, rule));
}

}  // namespace

void validate(const TrainConfig& c) {
  require(c.m >= 1, "m", ">= 1");
  require(c.M >= 1, "M", ">= 1");
  require(c.r >= 0, "r", ">= 0");
  require(c.h > 0.0, "h", "> 0");
  require(c.nt_train >= 1, "nt_train", ">= 1");
  require(c.nt_val >= 0, "nt_val", ">= 0 (0 selects 2 * nt_train)");
  require(c.validation_nt() >= c.nt_train, "nt_val", ">= nt_train");
  require(c.T > 0.0, "T", "> 0");
  require(c.alpha1 >= 0.0, "alpha1", ">= 0");
  require(c.alpha2 >= 0.0, "alpha2", ">= 0");
  require(c.lr > 0.0, "lr", "> 0");
  require(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0, "adam_beta1", "in [0, 1)");
  require(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0, "adam_beta2", "in [0, 1)");
  require(c.adam_eps > 0.0, "adam_eps", "> 0");
  require(c.batch_size >= 1, "batch_size", ">= 1");
  require(c.max_iters >= 1, "max_iters", ">= 1");
  require(c.val_every >= 1, "val_every", ">= 1");
  require(c.patience >= 0, "patience", ">= 0");
  require(c.val_max >= 0, "val_max", ">= 0");
  require(c.lr_decay > 0.0 && c.lr_decay <= 1.0, "lr_decay", "in (0, 1]");
  require(c.lr_decay_every >= 0, "lr_decay_every", ">= 0");
  require(c.num_probes >= 1, "num_probes", ">= 1");
}

std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& c) {
  auto f = [](double v) { return fmt::format("{}", v); };
  auto i = [](auto v) { return fmt::format("{}", v); };
  return {
      {"m", i(c.m)},
      {"M", i(c.M)},
      {"r", i(c.r)},
      {"h", f(c.h)},
      {"nt_train", i(c.nt_train)},
      {"nt_val", i(c.nt_val)},
      {"T", f(c.T)},
      {"alpha1", f(c.alpha1)},
      {"alpha2", f(c.alpha2)},
      {"lr", f(c.lr)},
      {"adam_beta1", f(c.adam_beta1)},
      {"adam_beta2", f(c.adam_beta2)},
      {"adam_eps", f(c.adam_eps)},
      {"batch_size", i(c.batch_size)},
      {"max_iters", i(c.max_iters)},
      {"val_every", i(c.val_every)},
      {"patience", i(c.patience)},
      {"val_max", i(c.val_max)},
      {"lr_decay", f(c.lr_decay)},
      {"lr_decay_every", i(c.lr_decay_every)},
      {"seed", i(c.seed)},
      {"trace", c.trace == TraceEstimator::exact ? "exact" : "hutchinson"},
      {"num_probes", i(c.num_probes)},
      {"probe_dist", c.probe_dist == ProbeDistribution::rademacher ? "rademacher" : "gaussian"},
  };
}

bool apply_config_entry(TrainConfig& c, const std::string& key, const std::string& value) {
  auto dbl = [&](double& field) { field = parse_number<double>(key, value); };
  if (key == "m") c.m = parse_number<Index>(key, value);
  else if (key == "M") c.M = parse_number<int>(key, value);
  else if (key == "r") c.r = parse_number<Index>(key, value);
  else if (key == "h") dbl(c.h);
  else if (key == "nt_train" || key == "nt") c.nt_train = parse_number<int>(key, value);
  else if (key == "nt_val") c.nt_val = parse_number<int>(key, value);
  else if (key == "T") dbl(c.T);
  else if (key == "alpha1") dbl(c.alpha1);
  else if (key == "alpha2") dbl(c.alpha2);
  else if (key == "lr") dbl(c.lr);
  else if (key == "adam_beta1") dbl(c.adam_beta1);
  else if (key == "adam_beta2") dbl(c.adam_beta2);
  else if (key == "adam_eps") dbl(c.adam_eps);
  else if (key == "batch_size") c.batch_size = parse_number<Index>(key, value);
  else if (key == "max_iters") c.max_iters = parse_number<int>(key, value);
  else if (key == "val_every") c.val_every = parse_number<int>(key, value);
  else if (key == "patience") c.patience = parse_number<int>(key, value);
  else if (key == "val_max") c.val_max = parse_number<Index>(key, value);
  else if (key == "lr_decay") dbl(c.lr_decay);
  else if (key == "lr_decay_every") c.lr_decay_every = parse_number<int>(key, value);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "num_probes") c.num_probes = parse_number<int>(key, value);
  else if (key == "trace") {
    if (value == "exact") c.trace = TraceEstimator::exact;
    else if (value == "hutchinson") c.trace = TraceEstimator::hutchinson;
    else throw ConfigError(fmt::format("config field 'trace': expected exact|hutchinson, got '{}'", value));
  } else if (key == "probe_dist") {
    if (value == "rademacher") c.probe_dist = ProbeDistribution::rademacher;
    else if (value == "gaussian") c.probe_dist = ProbeDistribution::gaussian;
    else throw ConfigError(fmt::format("config field 'probe_dist': expected rademacher|gaussian, got '{}'", value));
  } else {
    return false;
  }
  return true;
}

void adam_step(Vector& theta, const Vector& grad, AdamState& state, const AdamSettings& s) {
  if (state.m.size() != theta.size()) {
    state.m = Vector::Zero(theta.size());
    state.v = Vector::Zero(theta.size());
    state.t = 0;
  }
  ++state.t;
  state.m = s.beta1 * state.m + (1.0 - s.beta1) * grad;
  state.v = s.beta2 * state.v + (1.0 - s.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.t));
  theta.array() -= s.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + s.eps);
}

const char* to_string(TrainStatus status) {
  switch (status) {
    case TrainStatus::completed: return "completed";
    case TrainStatus::early_stopped: return "early_stopped";
    case TrainStatus::diverged: return "diverged";
  }
  return "unknown";
}

double validation_C(const Matrix& x, const ModelParams& params, int nt, double T) {
  return loss_C(integrate_forward(x, params, nt, T).state).mean();
}

TrainResult train(const DatasetSplit& data, const TrainConfig& config, const TrainCallback& on_row,
                  const ModelParams* initial) {
  validate(config);
  const Index d = data.dim();
  if (data.train.rows() < 1 || data.val.rows() < 1) {
    throw ConfigError("training needs nonempty train and validation splits");
  }
  const ModelShape shape{.d = d, .m = config.m, .M = config.M, .r = config.r, .h = config.h};

  std::mt19937_64 init_rng(config.seed);
  ModelParams params = initial ? *initial : init_params(shape, init_rng);
  if (params.dim() != d) throw ConfigError("initial parameters do not match the data dimension");
  validate(params);

  const Matrix val = config.val_max > 0 && config.val_max < data.val.rows()
                         ? Matrix(data.val.topRows(config.val_max))
                         : data.val;
  const int nt_val = config.validation_nt();

  ObjectiveConfig objective;
  objective.alpha1 = config.alpha1;
  objective.alpha2 = config.alpha2;
  objective.nt = config.nt_train;
  objective.T = config.T;
  objective.trace = config.trace;
  objective.num_probes = config.num_probes;
  objective.probe_dist = config.probe_dist;

  AdamSettings adam{config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps};
  AdamState state;
  Vector theta = flatten(params);

  const Index n = data.train.rows();
  const Index batch = std::min(config.batch_size, n);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 shuffle_rng(mix(config.seed ^ 0x5eedULL));
  Index cursor = n;  // forces a shuffle before the first batch

  TrainResult result;
  result.best = params;
  int stale = 0;
  Matrix xb;
  const auto start = std::chrono::steady_clock::now();

  for (int it = 1; it <= config.max_iters; ++it) {
    if (cursor >= n) {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      cursor = 0;
    }
    const Index count = std::min(batch, n - cursor);
    xb.resize(count, d);
    for (Index i = 0; i < count; ++i) {
      xb.row(i) = data.train.row(order[static_cast<std::size_t>(cursor + i)]);
    }
    cursor += count;

    TrainLogRow row;
    row.iter = it;
    try {
      objective.probe_seed = mix(config.seed + static_cast<std::uint64_t>(it));
      RecordedObjective rec = record_objective(xb, params, objective);
      const Vector grad = flatten(backward(rec));
      if (!grad.allFinite()) throw DivergenceError("non-finite parameter gradient", config.nt_train);
      row.total = rec.value();
      row.C = rec.losses().C;
      row.L = rec.losses().L;
      row.R = rec.losses().R;
      adam_step(theta, grad, state, adam);
      unflatten(theta, params);

      const bool validate_now = it % config.val_every == 0 || it == config.max_iters;
      if (validate_now) {
        row.val_C = validation_C(val, params, nt_val, config.T);
        if (!std::isfinite(row.val_C)) throw DivergenceError("non-finite validation loss", nt_val);
      }
    } catch (const DivergenceError& e) {
      result.status = TrainStatus::diverged;
      result.message = fmt::format("diverged at iteration {}: {}", it, e.what());
      result.iterations = it;
      result.last = params;
      if (!std::isfinite(result.best_val_C)) result.best = params;
      return result;
    }

    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(row);
    if (on_row) on_row(row);
    result.iterations = it;

    if (!std::isnan(row.val_C)) {
      if (row.val_C < result.best_val_C) {
        result.best_val_C = row.val_C;
        result.best = params;
        result.best_iter = it;
        stale = 0;
      } else if (config.patience > 0 && ++stale >= config.patience) {
        result.status = TrainStatus::early_stopped;
        result.message = fmt::format("no validation improvement in {} checks", config.patience);
        break;
      }
    }
    if (config.lr_decay_every > 0 && it % config.lr_decay_every == 0) adam.lr *= config.lr_decay;
  }
  result.last = params;
  if (result.message.empty()) result.message = "reached max_iters";
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint text format

namespace {

std::string hex(double v) { return fmt::format("{:a}", v); }

void write_array(std::string& out, const std::string& name, const Matrix& a) {
  out += fmt::format("array {} {} {}\n", name, a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < a.cols(); ++j) {
      if (j > 0) out += ' ';
      out += hex(a(i, j));
    }
    out += '\n';
  }
}

class Reader {
 public:
  explicit Reader(const std::string& text) : in_(text) {}

  std::vector<std::string> line() {
    std::string raw;
    do {
      if (!std::getline(in_, raw)) fail("unexpected end of checkpoint");
      ++line_no_;
    } while (raw.empty());
    std::istringstream ss(raw);
    std::vector<std::string> tokens;
    for (std::string tok; ss >> tok;) tokens.push_back(tok);
    return tokens;
  }

  // Key and the rest of the line, which may be empty or contain spaces.
  std::pair<std::string, std::string> key_value() {
    std::string raw;
    if (!std::getline(in_, raw)) fail("unexpected end of checkpoint");
    ++line_no_;
    const auto space = raw.find(' ');
    if (space == 0 || space == std::string::npos) fail("config entries are 'key value'");
    return {raw.substr(0, space), raw.substr(space + 1)};
  }

  std::vector<std::string> expect(const std::string& tag, std::size_t count) {
    auto t = line();
    if (t.empty() || t[0] != tag || t.size() != count) {
      fail(fmt::format("expected '{}' with {} fields", tag, count - 1));
    }
    return t;
  }

  double number(const std::string& tok) {
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size()) fail(fmt::format("bad number '{}'", tok));
    return v;
  }

  long integer(const std::string& tok) {
    long v = 0;
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) fail(fmt::format("bad integer '{}'", tok));
    return v;
  }

  Matrix array(const std::string& name, Index rows, Index cols) {
    const auto head = expect("array", 4);
    if (head[1] != name || integer(head[2]) != rows || integer(head[3]) != cols) {
      fail(fmt::format("expected array {} of shape {}x{}", name, rows, cols));
    }
    Matrix a(rows, cols);
    for (Index i = 0; i < rows; ++i) {
      const auto t = line();
      if (static_cast<Index>(t.size()) != cols) fail(fmt::format("array {} row has wrong length", name));
      for (Index j = 0; j < cols; ++j) a(i, j) = number(t[static_cast<std::size_t>(j)]);
    }
    return a;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(fmt::format("checkpoint line {}: {}", line_no_, what), line_no_, 0);
  }

 private:
  std::istringstream in_;
  long line_no_ = 0;
};

}  // namespace

std::string Checkpoint::to_text() const {
  const Index d = params.dim();
  std::string out = fmt::format("otflow-checkpoint {}\n", version);
  out += fmt::format("iteration {}\n", iteration);
  out += fmt::format("best_val_C {}\n", hex(best_val_C));
  out += fmt::format("config {}\n", config.size());
  for (const auto& [k, v] : config) out += fmt::format("{} {}\n", k, v);
  out += fmt::format("shape {} {} {} {}\n", d, params.width(), params.depth(), params.rank());
  out += fmt::format("h {}\n", hex(params.resnet.h));
  out += fmt::format("c {}\n", hex(params.c));
  write_array(out, "w", params.w);
  write_array(out, "K0", params.resnet.K0);
  write_array(out, "b0", params.resnet.b0);
  for (int i = 0; i < params.depth(); ++i) {
    write_array(out, fmt::format("K{}", i + 1), params.resnet.layers[i].K);
    write_array(out, fmt::format("b{}", i + 1), params.resnet.layers[i].b);
  }
  write_array(out, "A", params.A);
  write_array(out, "b", params.b);
  write_array(out, "mean", mean);
  write_array(out, "std", std);
  out += "end\n";
  return out;
}

Checkpoint Checkpoint::from_text(const std::string& text) {
  Reader r(text);
  Checkpoint ck;
  const auto head = r.expect("otflow-checkpoint", 2);
  ck.version = static_cast<int>(r.integer(head[1]));
  if (ck.version != kFormatVersion) r.fail(fmt::format("unsupported version {}", ck.version));
  ck.iteration = r.integer(r.expect("iteration", 2)[1]);
  ck.best_val_C = r.number(r.expect("best_val_C", 2)[1]);
  const long entries = r.integer(r.expect("config", 2)[1]);
  for (long i = 0; i < entries; ++i) {
    ck.config.push_back(r.key_value());
  }
  const auto shape = r.expect("shape", 5);
  const Index d = r.integer(shape[1]);
  const Index m = r.integer(shape[2]);
  const int M = static_cast<int>(r.integer(shape[3]));
  const Index rank = r.integer(shape[4]);
  if (d < 1 || m < 1 || M < 1 || rank < 1) r.fail("shape entries must be positive");
  const double h = r.number(r.expect("h", 2)[1]);
  ck.params = zero_params({.d = d, .m = m, .M = M, .r = rank, .h = h});
  if (ck.params.rank() != rank) r.fail("rank exceeds d + 1");
  ck.params.resnet.h = h;
  ck.params.c = r.number(r.expect("c", 2)[1]);
  ck.params.w = r.array("w", m, 1);
  ck.params.resnet.K0 = r.array("K0", m, d + 1);
  ck.params.resnet.b0 = r.array("b0", m, 1);
  for (int i = 0; i < M; ++i) {
    ck.params.resnet.layers[i].K = r.array(fmt::format("K{}", i + 1), m, m);
    ck.params.resnet.layers[i].b = r.array(fmt::format("b{}", i + 1), m, 1);
  }
  ck.params.A = r.array("A", rank, d + 1);
  ck.params.b = r.array("b", d + 1, 1);
  ck.mean = r.array("mean", d, 1);
  ck.std = r.array("std", d, 1);
  r.expect("end", 1);
  return ck;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError(fmt::format("cannot write checkpoint '{}'", path));
  out << to_text();
  if (!out) throw ConfigError(fmt::format("failed writing checkpoint '{}'", path));
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(fmt::format("cannot open checkpoint '{}'", path), 0, 0);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return from_text(buffer.str());
}

}  // namespace otflow
