#pragma once

#include <string>
#include <vector>

#include "s2c/series_graph.hpp"

namespace s2c {

// Receptive field size and jump (product of strides) along one spatial axis.
struct FieldInfo {
  Index rf = 1;
  Index jump = 1;

  bool operator==(const FieldInfo&) const = default;
};

struct JunctionInput {
  LayerName layer;
  FieldInfo field;
};

struct JunctionField {
  NodeId node = 0;
  std::vector<JunctionInput> inputs;
  FieldInfo merged;  // largest rf / jump among the inputs
  bool aligned = true;
};

struct ReceptiveFieldReport {
  std::vector<JunctionField> junctions;  // topological order, input node excluded
  bool pass = true;

  std::string summary() const;
};

// Composition rule per layer: rf_out = rf_in + (k - 1) * jump_in, jump_out = jump_in * stride.
// PASS iff every junction receives identical (rf, jump) from all its incoming layers.
template <RealScalar Scalar>
ReceptiveFieldReport receptive_field_check(const SeriesNetwork<Scalar>& net);

}  // namespace s2c
