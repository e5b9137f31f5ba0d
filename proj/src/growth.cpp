#include "s2c/growth.hpp"

#include <algorithm>
#include <cmath>

namespace s2c {

PathKernels path_kernels(Index kernel) {
  const Index first = std::min<Index>(3, kernel);
  return {first, kernel - first + 1};
}

template <RealScalar Scalar>
GrowthPlan plan_growth(const SeriesNetwork<Scalar>& net) {
  const int stage = net.stage_count();
  std::vector<const Edge<Scalar>*> targets;
  for (const auto& e : net.edges()) {
    if (e.origin_stage == stage) targets.push_back(&e);
  }
  std::sort(targets.begin(), targets.end(), [](auto* a, auto* b) { return a->name.ordinal < b->name.ordinal; });

  GrowthPlan plan;
  plan.stage = stage + 1;
  for (const auto* t : targets) {
    const auto [k1, k2] = path_kernels(t->kernel());
    const int j = t->name.ordinal;
    GrowthAddition a;
    a.target = t->name;
    a.tail = t->from;
    a.head = t->to;
    a.first = {LayerName{stage + 1, 2 * j - 1}, t->conv.in_channels(), t->conv.out_channels(), k1, 1, (k1 - 1) / 2};
    a.second = {LayerName{stage + 1, 2 * j}, t->conv.out_channels(), t->conv.out_channels(), k2, t->conv.stride,
                (k2 - 1) / 2};
    plan.additions.push_back(a);
  }
  return plan;
}

template <RealScalar Scalar>
SeriesNetwork<Scalar> apply_growth(const SeriesNetwork<Scalar>& net, const GrowthPlan& plan, SeededRng& rng,
                                   BranchInit init) {
  if (plan.empty()) return net;
  if (plan.stage != net.stage_count() + 1) {
    throw ConsistencyError("growth plan targets stage " + std::to_string(plan.stage) + " but network is at stage " +
                           std::to_string(net.stage_count()));
  }
  SeriesNetwork<Scalar> child = net;
  for (const auto& a : plan.additions) {
    const auto idx = net.find_edge(a.target);
    if (!idx) throw ConsistencyError("growth plan targets unknown layer " + a.target.str());
    const auto& t = net.edges()[*idx];
    if (t.origin_stage != net.stage_count() || t.from != a.tail || t.to != a.head ||
        a.first.in_channels != t.conv.in_channels() || a.second.out_channels != t.conv.out_channels() ||
        a.first.out_channels != a.second.in_channels) {
      throw ConsistencyError("growth addition for " + a.target.str() + " does not match the network");
    }
    if (child.find_edge(a.first.name) || child.find_edge(a.second.name)) {
      throw ConsistencyError("growth plan reuses an existing layer name near " + a.target.str());
    }
    const NodeId mid = child.add_node();
    auto make = [&](const PathLayerSpec& s, NodeId from, NodeId to, EdgeRole role) {
      Edge<Scalar> e;
      e.name = s.name;
      e.from = from;
      e.to = to;
      e.conv = ConvParams<Scalar>::he_normal(s.out_channels, s.in_channels, s.kernel, s.stride, s.padding, rng);
      e.bn = BatchNormParams<Scalar>::standard(s.out_channels, t.bn.ema_decay);
      e.bn.epsilon = t.bn.epsilon;
      e.origin_stage = plan.stage;
      e.role = role;
      return e;
    };
    child.add_edge(make(a.first, a.tail, mid, EdgeRole::path_first));
    auto second = make(a.second, mid, a.head, EdgeRole::path_second);
    if (init == BranchInit::function_preserving) {
      second.bn.gamma = Tensor<Scalar>::zeros({a.second.out_channels});
      second.bn.beta = Tensor<Scalar>::zeros({a.second.out_channels});
    }
    child.add_edge(std::move(second));
  }
  child.set_stage_count(plan.stage);
  child.validate();
  return child;
}

template <RealScalar Scalar>
PreservationReport verify_preservation(const SeriesNetwork<Scalar>& parent, const SeriesNetwork<Scalar>& child,
                                       int probes, SeededRng& rng, double tol, Index probe_batch) {
  if (!(parent.input_geometry() == child.input_geometry())) {
    throw ShapeError("parent and child networks take different input shapes");
  }
  const auto& g = parent.input_geometry();
  PreservationReport report;
  report.probes = probes;
  for (int p = 0; p < probes; ++p) {
    const auto batch = Tensor<Scalar>::normal({probe_batch, g.channels, g.height, g.width}, Scalar(0), Scalar(1), rng);
    const auto a = forward_eval(parent, batch).logits;
    const auto b = forward_eval(child, batch).logits;
    const double diff = static_cast<double>((a.values() - b.values()).cwiseAbs().maxCoeff());
    report.max_abs_diff = std::max(report.max_abs_diff, std::isnan(diff) ? INFINITY : diff);
  }
  report.pass = report.max_abs_diff <= tol;
  return report;
}

template <RealScalar Scalar>
StopDecision growth_stop_criterion(const SeriesNetwork<Scalar>& net, double threshold) {
  if (net.stage_count() < 1) throw ConsistencyError("growth stop criterion needs at least one growth stage");
  std::vector<double> sum(static_cast<std::size_t>(net.stage_count() + 1), 0.0);
  std::vector<Index> count(sum.size(), 0);
  for (const auto& e : net.edges()) {
    const bool feeds = e.origin_stage == 0 ? e.role == EdgeRole::backbone : e.role == EdgeRole::path_second;
    if (!feeds) continue;
    const auto s = static_cast<std::size_t>(e.origin_stage);
    sum[s] += static_cast<double>(e.bn.gamma.values().cwiseAbs().sum());
    count[s] += e.bn.gamma.size();
  }
  StopDecision d;
  for (std::size_t s = 0; s < sum.size(); ++s) {
    d.stage_mean_abs_gamma.push_back(count[s] ? sum[s] / static_cast<double>(count[s]) : 0.0);
  }
  d.newest_mean_abs_gamma = d.stage_mean_abs_gamma.back();
  d.stop = d.newest_mean_abs_gamma < threshold;
  return d;
}

#define S2C_INSTANTIATE_GROWTH(S)                                                                              \
  template GrowthPlan plan_growth(const SeriesNetwork<S>&);                                                    \
  template SeriesNetwork<S> apply_growth(const SeriesNetwork<S>&, const GrowthPlan&, SeededRng&, BranchInit);  \
  template PreservationReport verify_preservation(const SeriesNetwork<S>&, const SeriesNetwork<S>&, int,       \
                                                  SeededRng&, double, Index);                                  \
  template StopDecision growth_stop_criterion(const SeriesNetwork<S>&, double);

S2C_INSTANTIATE_GROWTH(float)
S2C_INSTANTIATE_GROWTH(double)

#undef S2C_INSTANTIATE_GROWTH

}  // namespace s2c
