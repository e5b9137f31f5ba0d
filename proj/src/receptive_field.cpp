#include "s2c/receptive_field.hpp"

#include <algorithm>
#include <sstream>

namespace s2c {

std::string ReceptiveFieldReport::summary() const {
  std::ostringstream out;
  out << (pass ? "PASS" : "FAIL") << "\n";
  for (const auto& j : junctions) {
    out << "junction " << j.node << (j.aligned ? " ok  " : " MISMATCH ");
    for (const auto& in : j.inputs) out << " " << in.layer.str() << "(rf=" << in.field.rf << ",jump=" << in.field.jump << ")";
    out << "\n";
  }
  return out.str();
}

template <RealScalar Scalar>
ReceptiveFieldReport receptive_field_check(const SeriesNetwork<Scalar>& net) {
  const auto order = net.topological_order();
  const auto in = net.incoming();
  std::vector<FieldInfo> field(static_cast<std::size_t>(net.node_count()));
  ReceptiveFieldReport report;
  for (NodeId v : order) {
    if (v == net.input_node()) continue;
    JunctionField jf;
    jf.node = v;
    for (std::size_t ei : in[static_cast<std::size_t>(v)]) {
      const auto& e = net.edges()[ei];
      const FieldInfo src = field[static_cast<std::size_t>(e.from)];
      const FieldInfo f{src.rf + (e.kernel() - 1) * src.jump, src.jump * e.conv.stride};
      if (!jf.inputs.empty() && !(jf.inputs.front().field == f)) jf.aligned = false;
      jf.merged.rf = std::max(jf.merged.rf, f.rf);
      jf.merged.jump = std::max(jf.merged.jump, f.jump);
      jf.inputs.push_back({e.name, f});
    }
    field[static_cast<std::size_t>(v)] = jf.merged;
    report.pass = report.pass && jf.aligned;
    report.junctions.push_back(std::move(jf));
  }
  return report;
}

template ReceptiveFieldReport receptive_field_check(const SeriesNetwork<float>&);
template ReceptiveFieldReport receptive_field_check(const SeriesNetwork<double>&);

}  // namespace s2c
