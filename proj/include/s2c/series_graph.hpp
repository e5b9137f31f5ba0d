#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "s2c/layers.hpp"

namespace s2c {

// "stage_ordinal", e.g. 0_6 is the sixth layer of the plain start network and
// 1_12 the twelfth layer added by the first growth.
struct LayerName {
  int stage = 0;
  int ordinal = 1;

  std::string str() const { return std::to_string(stage) + "_" + std::to_string(ordinal); }
  static LayerName parse(std::string_view text);

  auto operator<=>(const LayerName&) const = default;
};

using NodeId = int;

enum class EdgeRole { backbone, path_first, path_second };

std::string_view role_name(EdgeRole role);

// A conv-bn layer between two junctions.
template <RealScalar Scalar>
struct Edge {
  LayerName name;
  NodeId from = 0;
  NodeId to = 0;
  ConvParams<Scalar> conv;
  BatchNormParams<Scalar> bn;
  int origin_stage = 0;
  EdgeRole role = EdgeRole::backbone;

  Index kernel() const { return conv.kernel_h(); }
};

struct ImageGeometry {
  Index channels = 3;
  Index height = 32;
  Index width = 32;

  bool operator==(const ImageGeometry&) const = default;
};

struct PlainLayerSpec {
  Index filters = 8;
  Index kernel = 5;
  Index stride = 1;
  Index padding = 2;
};

// Per-layer plan for the stage-0 chain.
struct PlainPlan {
  std::vector<PlainLayerSpec> layers;

  // Six 5x5 layers with 8, 8, 16, 16, 32, 32 filters; stride 2 at the two
  // filter-doubling layers.
  static PlainPlan cifar_default();
  static PlainPlan from_lists(std::span<const Index> filters, std::span<const Index> kernels,
                              std::span<const Index> strides);
};

template <RealScalar Scalar>
using TensorMap = std::map<std::string, Tensor<Scalar>>;

template <RealScalar Scalar>
using GradientSet = TensorMap<Scalar>;

template <RealScalar Scalar>
using ParameterRefs = std::map<std::string, Tensor<Scalar>*>;

template <RealScalar Scalar>
using ConstParameterRefs = std::map<std::string, const Tensor<Scalar>*>;

inline std::string weights_key(const LayerName& n) { return n.str() + "/weights"; }
inline std::string gamma_key(const LayerName& n) { return n.str() + "/gamma"; }
inline std::string beta_key(const LayerName& n) { return n.str() + "/beta"; }
inline const std::string head_weights_key = "head/weights";
inline const std::string head_bias_key = "head/bias";

// DAG of add junctions (nodes) and conv-bn layers (edges). Every internal
// junction sums its incoming edges in edge-creation order and applies the
// activation; the output junction only sums and feeds the classifier head.
//
// Any mutable access to trainable parameters bumps revision(), which is how
// stale forward caches are detected.
template <RealScalar Scalar>
class SeriesNetwork {
 public:
  SeriesNetwork() = default;
  SeriesNetwork(ImageGeometry input, Index classes);

  NodeId input_node() const { return 0; }
  NodeId output_node() const { return 1; }
  NodeId add_node();
  Index node_count() const { return node_count_; }

  void add_edge(Edge<Scalar> edge);
  const std::vector<Edge<Scalar>>& edges() const { return edges_; }
  std::vector<Edge<Scalar>>& mutable_edges();
  std::optional<std::size_t> find_edge(const LayerName& name) const;
  const Edge<Scalar>& edge(const LayerName& name) const;
  Edge<Scalar>& mutable_edge(const LayerName& name);

  const HeadParams<Scalar>& head() const { return head_; }
  HeadParams<Scalar>& mutable_head();
  void set_head(HeadParams<Scalar> head);

  int stage_count() const { return stage_count_; }
  void set_stage_count(int stages) { stage_count_ = stages; }
  Activation activation() const { return activation_; }
  const ImageGeometry& input_geometry() const { return input_; }
  Index classes() const { return classes_; }

  std::uint64_t revision() const { return revision_; }
  void touch() { ++revision_; }

  // Incoming edge indices per node, in edge-creation order.
  std::vector<std::vector<std::size_t>> incoming() const;
  // Deterministic topological order; throws GraphError on a cycle.
  std::vector<NodeId> topological_order() const;
  // Acyclicity, reachability, unique names and junction shape agreement.
  void validate() const;
  // Per-node activation shape (channels, height, width) for the configured input.
  std::vector<ImageGeometry> node_geometry() const;

  std::vector<std::string> parameter_keys() const;
  ParameterRefs<Scalar> parameters();
  ConstParameterRefs<Scalar> parameters() const;
  Index parameter_count() const;

 private:
  ImageGeometry input_{};
  Index classes_ = 10;
  Index node_count_ = 2;
  std::vector<Edge<Scalar>> edges_;
  HeadParams<Scalar> head_;
  int stage_count_ = 0;
  Activation activation_ = Activation::relu;
  std::uint64_t revision_ = 0;
};

// Structural and parameter equality (revision counters are ignored).
template <RealScalar Scalar>
bool identical(const SeriesNetwork<Scalar>& a, const SeriesNetwork<Scalar>& b);

template <RealScalar Scalar>
SeriesNetwork<Scalar> build_plain_network(const PlainPlan& plan, ImageGeometry input, Index classes,
                                          SeededRng& rng, Scalar bn_decay = Scalar(0.9999));

template <RealScalar Scalar>
struct ForwardCache {
  std::uint64_t revision = 0;
  Mode mode = Mode::train;
  std::vector<Tensor<Scalar>> node_values;  // post-activation; the input node holds the batch
  std::vector<BatchNormCache<Scalar>> bn;   // per edge
  HeadOutput<Scalar> head;
};

template <RealScalar Scalar>
struct ForwardResult {
  Tensor<Scalar> logits;
  double loss = 0.0;
  double accuracy = 0.0;
  Index correct = 0;
  ForwardCache<Scalar> cache;
};

// Train mode updates batch-norm running statistics (and nothing else); eval
// mode leaves the network untouched. Labels may be empty when only logits are wanted.
template <RealScalar Scalar>
ForwardResult<Scalar> forward_pass(SeriesNetwork<Scalar>& net, const Tensor<Scalar>& batch,
                                   std::span<const int> labels, Mode mode);

template <RealScalar Scalar>
ForwardResult<Scalar> forward_eval(const SeriesNetwork<Scalar>& net, const Tensor<Scalar>& batch,
                                   std::span<const int> labels = {});

// Reverse-topological accumulation over a train-mode cache. Keys match parameter_keys().
template <RealScalar Scalar>
GradientSet<Scalar> backward_pass(const SeriesNetwork<Scalar>& net, const ForwardCache<Scalar>& cache,
                                  std::span<const int> labels);

}  // namespace s2c
