#pragma once

#include <cstdint>
#include <vector>

#include "otflow/objective.hpp"
#include "otflow/potential.hpp"
#include "otflow/tape.hpp"

namespace otflow {

enum class TraceEstimator { exact, hutchinson };

struct ObjectiveConfig {
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  int nt = 8;
  double T = 1.0;
  TraceEstimator trace = TraceEstimator::exact;
  // Hutchinson settings: one probe matrix per solve, held fixed over time.
  ProbeDistribution probe_dist = ProbeDistribution::rademacher;
  int num_probes = 1;
  std::uint64_t probe_seed = 0;
};

// The alpha-weighted objective of one batch, recorded on a tape through the
// unrolled RK4 solve so parameter gradients can be taken by reverse mode.
class RecordedObjective {
 public:
  double value() const { return losses_.total; }
  const LossBreakdown& losses() const { return losses_; }
  const ad::Tape& tape() const { return tape_; }
  ad::Var root() const { return root_; }

 private:
  friend RecordedObjective record_objective(const Matrix&, const ModelParams&,
                                            const ObjectiveConfig&);
  friend ParamGradient backward(RecordedObjective&);

  struct Leaves {
    ad::Var w, K0, b0, A, b, c;
    std::vector<ad::Var> K, bh;
  };

  ad::Tape tape_;
  ad::Var root_;
  Leaves leaves_;
  ModelShape shape_;
  LossBreakdown losses_;
};

// Throws DivergenceError (with the RK4 step index) on a non-finite state.
RecordedObjective record_objective(const Matrix& batch, const ModelParams& params,
                                   const ObjectiveConfig& config);

// Reverse sweep; returns dJ/dtheta shaped like the model parameters.
ParamGradient backward(RecordedObjective& recorded);

}  // namespace otflow
