#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "otflow/autodiff.hpp"
#include "otflow/data.hpp"
#include "otflow/potential.hpp"

namespace otflow {

struct TrainConfig {
  Index m = 32;
  int M = 1;
  Index r = 0;  // 0 selects min(10, d)
  double h = 1.0;
  int nt_train = 8;
  int nt_val = 0;  // 0 selects 2 * nt_train
  double T = 1.0;
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  double lr = 1e-2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Index batch_size = 512;
  int max_iters = 1000;
  int val_every = 10;
  int patience = 20;     // validations without improvement before stopping; 0 disables
  Index val_max = 0;     // validation rows used (0 = all)
  double lr_decay = 1.0;  // multiplicative factor applied every lr_decay_every iterations
  int lr_decay_every = 0;
  std::uint64_t seed = 0;
  TraceEstimator trace = TraceEstimator::exact;
  int num_probes = 1;
  ProbeDistribution probe_dist = ProbeDistribution::rademacher;

  int validation_nt() const { return nt_val > 0 ? nt_val : 2 * nt_train; }
};

// Throws ConfigError naming the offending field.
void validate(const TrainConfig& config);

// Flat key/value view of a TrainConfig, in a fixed order.
std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& config);
// Sets one field from text. Returns false when `key` is not a TrainConfig field;
// throws ConfigError when the value does not parse.
bool apply_config_entry(TrainConfig& config, const std::string& key, const std::string& value);

struct AdamState {
  Vector m;
  Vector v;
  long t = 0;
};

struct AdamSettings {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected ADAM update of the flat parameter vector.
void adam_step(Vector& theta, const Vector& grad, AdamState& state, const AdamSettings& settings);

struct TrainLogRow {
  int iter = 0;
  double total = 0.0;
  double C = 0.0;
  double L = 0.0;
  double R = 0.0;
  double val_C = std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated
  double seconds = 0.0;                                      // wall time since start
};

enum class TrainStatus { completed, early_stopped, diverged };

const char* to_string(TrainStatus status);

struct TrainResult {
  ModelParams best;
  ModelParams last;
  double best_val_C = std::numeric_limits<double>::infinity();
  int best_iter = 0;
  int iterations = 0;
  TrainStatus status = TrainStatus::completed;
  std::string message;
  std::vector<TrainLogRow> log;
};

using TrainCallback = std::function<void(const TrainLogRow&)>;

// Mean C over the rows of `x` with an nt-step forward solve.
double validation_C(const Matrix& x, const ModelParams& params, int nt, double T = 1.0);

// ADAM on minibatches of data.train. Every val_every iterations (and at the
// last one) the mean C on data.val at the validation grid decides the best
// parameters. A non-finite objective stops training with status `diverged`,
// keeping the best (or last finite) parameters.
TrainResult train(const DatasetSplit& data, const TrainConfig& config,
                  const TrainCallback& on_row = {}, const ModelParams* initial = nullptr);

struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  int version = kFormatVersion;
  ModelParams params;
  long iteration = 0;
  double best_val_C = std::numeric_limits<double>::quiet_NaN();
  Vector mean;  // standardization statistics of the training data
  Vector std;
  std::vector<std::pair<std::string, std::string>> config;

  // Canonical text with every double written as a hexadecimal float.
  std::string to_text() const;
  // Throws ParseError on malformed input or an unsupported version.
  static Checkpoint from_text(const std::string& text);

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace otflow
