#include "s2c/optimizer.hpp"

#include <algorithm>
#include <cmath>

namespace s2c {

namespace {

bool is_decay_exempt(const std::string& key) {
  auto ends_with = [&](std::string_view suffix) {
    return key.size() >= suffix.size() && key.compare(key.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with("/gamma") || ends_with("/beta") || ends_with("/bias");
}

template <RealScalar Scalar, typename Map>
void check_keys(const ParameterRefs<Scalar>& params, const Map& other, const char* what) {
  if (params.size() != other.size()) {
    throw ConsistencyError(std::string(what) + " key set differs from parameter key set");
  }
  auto it = other.begin();
  for (const auto& [key, _] : params) {
    if (it->first != key) throw ConsistencyError(std::string(what) + " key '" + it->first + "' does not match '" + key + "'");
    ++it;
  }
}

}  // namespace

template <RealScalar Scalar>
void SgdState<Scalar>::sync(const ParameterRefs<Scalar>& params) {
  for (const auto& [key, _] : velocity) {
    if (!params.count(key)) throw ConsistencyError("velocity for vanished parameter " + key);
  }
  for (const auto& [key, t] : params) {
    if (!velocity.count(key)) velocity.emplace(key, t->zeros_like());
  }
}

template <RealScalar Scalar>
void sgd_momentum_step(const ParameterRefs<Scalar>& params, const GradientSet<Scalar>& grads, SgdState<Scalar>& state) {
  check_keys(params, grads, "gradient");
  check_keys(params, state.velocity, "velocity");
  for (const auto& [key, g] : grads) {
    if (!g.values().allFinite()) throw NumericError("non-finite gradient for " + key);
  }
  const auto mu = static_cast<Scalar>(state.momentum);
  const auto lr = static_cast<Scalar>(state.lr);
  for (const auto& [key, w] : params) {
    const auto& g = grads.at(key);
    auto& v = state.velocity.at(key);
    if (g.shape() != w->shape() || v.shape() != w->shape()) throw ShapeError("gradient/velocity shape mismatch for " + key);
    const bool decay = state.decay_all_parameters || !is_decay_exempt(key);
    const auto wd = decay ? static_cast<Scalar>(state.weight_decay) : Scalar(0);
    v.values() = mu * v.values() + (g.values() + wd * w->values());
    w->values() -= lr * v.values();
  }
}

template <RealScalar Scalar>
void EmaState<Scalar>::sync(const ParameterRefs<Scalar>& params) {
  for (const auto& [key, _] : shadow) {
    if (!params.count(key)) throw ConsistencyError("EMA shadow for vanished parameter " + key);
  }
  for (const auto& [key, t] : params) {
    if (!shadow.count(key)) shadow.emplace(key, *t);
  }
}

template <RealScalar Scalar>
void EmaState<Scalar>::update(const ParameterRefs<Scalar>& params) {
  check_keys(params, shadow, "EMA shadow");
  const auto d = static_cast<Scalar>(decay);
  for (const auto& [key, w] : params) {
    auto& s = shadow.at(key);
    s.values() = d * s.values() + (Scalar(1) - d) * w->values();
  }
}

template <RealScalar Scalar>
void EmaState<Scalar>::swap(const ParameterRefs<Scalar>& params) {
  check_keys(params, shadow, "EMA shadow");
  for (const auto& [key, w] : params) std::swap(*w, shadow.at(key));
}

void LrSchedule::enter_final_phase() {
  phase = LrPhase::final;
  lr = base_lr;
  halvings = 0;
  checked_until = 0;
}

double LrSchedule::next(std::span<const double> history) {
  if (phase == LrPhase::growing) {
    lr = base_lr;
    return lr;
  }
  const std::size_t n = history.size();
  if (window == 0 || n < 2 * window || n % window != 0 || n <= checked_until) return lr;
  checked_until = n;
  if (halvings >= max_halvings) return lr;
  auto mean = [&](std::size_t begin) {
    double s = 0.0;
    for (std::size_t i = begin; i < begin + window; ++i) s += history[i];
    return s / static_cast<double>(window);
  };
  const double previous = mean(n - 2 * window);
  const double current = mean(n - window);
  if (previous - current <= epsilon * std::abs(previous)) {
    lr *= halve_factor;
    ++halvings;
  }
  return lr;
}

int FixedStepSchedule::rung_at(std::int64_t step) const {
  if (step < base_steps || max_halvings <= 0) return 0;
  const std::int64_t per = std::max<std::int64_t>(1, decay_steps / max_halvings);
  return static_cast<int>(std::min<std::int64_t>(max_halvings, 1 + (step - base_steps) / per));
}

double FixedStepSchedule::lr_at(std::int64_t step) const {
  return base_lr * std::pow(halve_factor, rung_at(step));
}

std::vector<std::int64_t> FixedStepSchedule::rung_ends() const {
  std::vector<std::int64_t> ends{base_steps - 1};
  if (max_halvings <= 0 || decay_steps <= 0) return ends;
  const std::int64_t per = std::max<std::int64_t>(1, decay_steps / max_halvings);
  for (int r = 1; r <= max_halvings; ++r) {
    ends.push_back(r == max_halvings ? base_steps + decay_steps - 1 : base_steps + r * per - 1);
  }
  return ends;
}

template struct SgdState<float>;
template struct SgdState<double>;
template struct EmaState<float>;
template struct EmaState<double>;
template void sgd_momentum_step(const ParameterRefs<float>&, const GradientSet<float>&, SgdState<float>&);
template void sgd_momentum_step(const ParameterRefs<double>&, const GradientSet<double>&, SgdState<double>&);

}  // namespace s2c
