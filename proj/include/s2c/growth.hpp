#pragma once

#include <vector>

#include "s2c/series_graph.hpp"

namespace s2c {

struct PathLayerSpec {
  LayerName name;
  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel = 3;
  Index stride = 1;
  Index padding = 1;
};

// One two-layer residual path running parallel to `target`, from its tail
// junction to its head junction through a fresh intermediate junction.
struct GrowthAddition {
  LayerName target;
  NodeId tail = 0;
  NodeId head = 0;
  PathLayerSpec first;
  PathLayerSpec second;
};

struct GrowthPlan {
  int stage = 0;  // stage number the plan produces
  std::vector<GrowthAddition> additions;

  bool empty() const { return additions.empty(); }
  Index new_layer_count() const { return static_cast<Index>(2 * additions.size()); }
};

// Kernel pair for a path paralleling a k x k layer: (min(3, k), k - min(3, k) + 1).
// Both keep the receptive field of the paralleled layer; the stride sits on the
// second conv so the jump is applied after the first kernel's growth.
struct PathKernels {
  Index first;
  Index second;
};
PathKernels path_kernels(Index kernel);

// One path per layer of the newest stage; the path paralleling layer i_j is
// named (i+1)_(2j-1), (i+1)_(2j).
template <RealScalar Scalar>
GrowthPlan plan_growth(const SeriesNetwork<Scalar>& net);

enum class BranchInit {
  function_preserving,  // second batch-norm gamma = 0, beta = 0
  standard,             // gamma = 1 everywhere, as for an end-to-end network
};

// Returns the grown network; `net` is left untouched. Inherited layers keep
// their tensors bitwise, including batch-norm running statistics.
template <RealScalar Scalar>
SeriesNetwork<Scalar> apply_growth(const SeriesNetwork<Scalar>& net, const GrowthPlan& plan, SeededRng& rng,
                                   BranchInit init = BranchInit::function_preserving);

struct PreservationReport {
  double max_abs_diff = 0.0;
  int probes = 0;
  bool pass = false;
};

// Eval-mode logits of parent and child on seeded standard-normal probe batches.
template <RealScalar Scalar>
PreservationReport verify_preservation(const SeriesNetwork<Scalar>& parent, const SeriesNetwork<Scalar>& child,
                                       int probes, SeededRng& rng, double tol, Index probe_batch = 8);

struct StopDecision {
  bool stop = false;
  double newest_mean_abs_gamma = 0.0;
  // Index s: mean |gamma| over stage s layers that feed a junction from a path
  // end (backbone layers for stage 0, second path layers for later stages).
  std::vector<double> stage_mean_abs_gamma;
};

// stop iff the newest stage's second-layer mean |gamma| is strictly below threshold.
template <RealScalar Scalar>
StopDecision growth_stop_criterion(const SeriesNetwork<Scalar>& net, double threshold);

}  // namespace s2c
