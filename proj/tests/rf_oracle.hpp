#pragma once

#include <map>
#include <optional>
#include <vector>

#include "s2c/series_graph.hpp"

namespace s2c::testing {

struct ImpulseField {
  Index rf = 0;
  Index jump = 0;
  bool contiguous = true;
};

struct ImpulseResult {
  std::map<NodeId, ImpulseField> junctions;
  std::map<std::string, ImpulseField> layers;  // output of each conv-bn layer
};

// Impulse-response receptive fields along the main diagonal. All conv weights
// are made positive and every batch norm the identity, so a unit responds to an
// impulse at (p, p) iff p lies inside its field. The field of unit (c, c) is the
// set of responsive p; the jump is the start offset between units c and c + 1.
inline ImpulseResult impulse_fields(SeriesNetwork<double> net) {
  const auto geo = net.input_geometry();
  const Index side = geo.height;
  for (auto& e : net.mutable_edges()) {
    for (Index i = 0; i < e.conv.weights.size(); ++i) e.conv.weights[i] = 1.0 / static_cast<double>(e.conv.fan_in());
    for (Index c = 0; c < e.bn.channels(); ++c) {
      e.bn.gamma[c] = 1.0;
      e.bn.beta[c] = 0.0;
      e.bn.running_mean[c] = 0.0;
      e.bn.running_var[c] = 1.0 - static_cast<double>(e.bn.epsilon);
    }
  }
  auto batch = Tensor<double>::zeros({side, geo.channels, side, geo.width});
  for (Index p = 0; p < side; ++p)
    for (Index c = 0; c < geo.channels; ++c) batch(p, c, p, p) = 1.0;
  const auto fr = forward_pass(net, batch, {}, Mode::eval);

  auto measure = [&](const Tensor<double>& t) {
    ImpulseField f;
    const Index u = t.dim(2) / 2;
    std::optional<Index> first[2], last[2];
    for (int k = 0; k < 2; ++k) {
      const Index pos = std::min(u + k, t.dim(2) - 1);
      Index count = 0;
      for (Index p = 0; p < side; ++p) {
        if (t(p, 0, pos, pos) > 0.0) {
          if (!first[k]) first[k] = p;
          if (last[k] && *last[k] != p - 1) f.contiguous = false;
          last[k] = p;
          ++count;
        }
      }
      if (k == 0) f.rf = count;
    }
    if (first[0] && first[1]) f.jump = *first[1] - *first[0];
    return f;
  };

  ImpulseResult r;
  for (NodeId v = 0; v < net.node_count(); ++v) {
    if (v == net.input_node()) continue;
    r.junctions[v] = measure(fr.cache.node_values[static_cast<std::size_t>(v)]);
  }
  for (const auto& e : net.edges()) {
    const auto z = batch_norm_eval(conv_forward(fr.cache.node_values[static_cast<std::size_t>(e.from)], e.conv), e.bn);
    r.layers[e.name.str()] = measure(z);
  }
  return r;
}

}  // namespace s2c::testing
