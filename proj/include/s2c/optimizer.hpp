#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "s2c/series_graph.hpp"

namespace s2c {

// Momentum SGD with L2 weight decay folded into the gradient:
//   g' = g + weight_decay * w;  v = momentum * v + g';  w = w - lr * v
template <RealScalar Scalar>
struct SgdState {
  TensorMap<Scalar> velocity;
  double momentum = 0.9;
  double weight_decay = 0.0002;
  double lr = 0.1;
  // When false, gamma, beta and bias tensors are exempt from weight decay.
  bool decay_all_parameters = true;

  // Adds zero velocity for parameters that appeared since the last call
  // (growth); rejects velocity entries whose parameter disappeared.
  void sync(const ParameterRefs<Scalar>& params);
};

template <RealScalar Scalar>
void sgd_momentum_step(const ParameterRefs<Scalar>& params, const GradientSet<Scalar>& grads, SgdState<Scalar>& state);

// Exponential moving average of every trainable parameter.
template <RealScalar Scalar>
struct EmaState {
  TensorMap<Scalar> shadow;
  double decay = 0.9999;

  // New parameters start their shadow at their current value.
  void sync(const ParameterRefs<Scalar>& params);
  // shadow = decay * shadow + (1 - decay) * param
  void update(const ParameterRefs<Scalar>& params);
  // Exchanges shadow and live tensors; calling twice restores the original state exactly.
  void swap(const ParameterRefs<Scalar>& params);
};

// Swaps EMA shadows into a network for the lifetime of the guard.
template <RealScalar Scalar>
class EmaScope {
 public:
  EmaScope(SeriesNetwork<Scalar>& net, EmaState<Scalar>* ema) : net_(net), ema_(ema) {
    if (ema_) ema_->swap(net_.parameters());
  }
  ~EmaScope() {
    if (ema_) ema_->swap(net_.parameters());
  }
  EmaScope(const EmaScope&) = delete;
  EmaScope& operator=(const EmaScope&) = delete;

 private:
  SeriesNetwork<Scalar>& net_;
  EmaState<Scalar>* ema_;
};

enum class LrPhase { growing, final };

// Halve-on-stagnation schedule. In the growing phase the rate is fixed at
// base_lr; in the final phase the loss history is cut into consecutive windows
// of `window` steps and the rate halves whenever a window's mean fails to beat
// the previous window's mean by more than `epsilon` (relative).
struct LrSchedule {
  LrPhase phase = LrPhase::growing;
  double base_lr = 0.1;
  double halve_factor = 0.5;
  std::size_t window = 1000;
  double epsilon = 1e-3;
  int max_halvings = 4;

  double lr = 0.1;
  int halvings = 0;
  std::size_t checked_until = 0;

  void enter_final_phase();
  // history: per-step training losses since the final phase began.
  double next(std::span<const double> history);
};

// Fixed-budget variant: base_steps at base_lr, then the decay budget split into
// max_halvings equal rungs, each at half the previous rate.
struct FixedStepSchedule {
  double base_lr = 0.1;
  double halve_factor = 0.5;
  std::int64_t base_steps = 3000;
  std::int64_t decay_steps = 2000;
  int max_halvings = 4;

  // step counted from the start of the final phase (0-based)
  double lr_at(std::int64_t step) const;
  int rung_at(std::int64_t step) const;
  // last step (0-based, inclusive) of every rung, rung 0 first
  std::vector<std::int64_t> rung_ends() const;
};

}  // namespace s2c
