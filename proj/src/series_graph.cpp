#include "s2c/series_graph.hpp"

#include <algorithm>
#include <charconv>
#include <queue>
#include <set>

namespace s2c {

LayerName LayerName::parse(std::string_view text) {
  const auto sep = text.find('_');
  LayerName n;
  if (sep == std::string_view::npos) throw ConfigError("layer name '" + std::string(text) + "' is not stage_ordinal");
  const char* end = text.data() + text.size();
  auto r1 = std::from_chars(text.data(), text.data() + sep, n.stage);
  auto r2 = std::from_chars(text.data() + sep + 1, end, n.ordinal);
  if (r1.ec != std::errc{} || r1.ptr != text.data() + sep || r2.ec != std::errc{} || r2.ptr != end ||
      n.stage < 0 || n.ordinal < 1) {
    throw ConfigError("layer name '" + std::string(text) + "' is not stage_ordinal");
  }
  return n;
}

std::string_view role_name(EdgeRole role) {
  switch (role) {
    case EdgeRole::backbone: return "backbone";
    case EdgeRole::path_first: return "path_first";
    case EdgeRole::path_second: return "path_second";
  }
  return "unknown";
}

PlainPlan PlainPlan::cifar_default() {
  const Index filters[] = {8, 8, 16, 16, 32, 32};
  const Index kernels[] = {5, 5, 5, 5, 5, 5};
  const Index strides[] = {1, 1, 2, 1, 2, 1};
  return from_lists(filters, kernels, strides);
}

PlainPlan PlainPlan::from_lists(std::span<const Index> filters, std::span<const Index> kernels,
                                std::span<const Index> strides) {
  if (filters.empty()) throw ConfigError("plain plan needs at least one layer");
  if (kernels.size() != filters.size() || strides.size() != filters.size()) {
    throw ConfigError("plain plan lists (filters, kernels, strides) differ in length");
  }
  PlainPlan plan;
  for (std::size_t i = 0; i < filters.size(); ++i) {
    if (filters[i] < 1 || strides[i] < 1) throw ConfigError("plain plan filters and strides must be >= 1");
    if (kernels[i] < 1 || kernels[i] % 2 == 0) throw ConfigError("plain plan kernels must be odd");
    plan.layers.push_back({filters[i], kernels[i], strides[i], (kernels[i] - 1) / 2});
  }
  return plan;
}

template <RealScalar Scalar>
SeriesNetwork<Scalar>::SeriesNetwork(ImageGeometry input, Index classes) : input_(input), classes_(classes) {
  if (input.channels < 1 || input.height < 1 || input.width < 1) throw ConfigError("input geometry must be positive");
  if (classes < 2) throw ConfigError("classifier needs at least two classes");
}

template <RealScalar Scalar>
NodeId SeriesNetwork<Scalar>::add_node() {
  touch();
  return static_cast<NodeId>(node_count_++);
}

template <RealScalar Scalar>
void SeriesNetwork<Scalar>::add_edge(Edge<Scalar> edge) {
  if (edge.from < 0 || edge.from >= node_count_ || edge.to < 0 || edge.to >= node_count_) {
    throw GraphError("edge " + edge.name.str() + " references an unknown junction");
  }
  if (find_edge(edge.name)) throw GraphError("duplicate layer name " + edge.name.str());
  touch();
  edges_.push_back(std::move(edge));
}

template <RealScalar Scalar>
std::vector<Edge<Scalar>>& SeriesNetwork<Scalar>::mutable_edges() {
  touch();
  return edges_;
}

template <RealScalar Scalar>
std::optional<std::size_t> SeriesNetwork<Scalar>::find_edge(const LayerName& name) const {
  for (std::size_t i = 0; i < edges_.size(); ++i) {
    if (edges_[i].name == name) return i;
  }
  return std::nullopt;
}

template <RealScalar Scalar>
const Edge<Scalar>& SeriesNetwork<Scalar>::edge(const LayerName& name) const {
  auto i = find_edge(name);
  if (!i) throw GraphError("no layer named " + name.str());
  return edges_[*i];
}

template <RealScalar Scalar>
Edge<Scalar>& SeriesNetwork<Scalar>::mutable_edge(const LayerName& name) {
  auto i = find_edge(name);
  if (!i) throw GraphError("no layer named " + name.str());
  touch();
  return edges_[*i];
}

template <RealScalar Scalar>
HeadParams<Scalar>& SeriesNetwork<Scalar>::mutable_head() {
  touch();
  return head_;
}

template <RealScalar Scalar>
void SeriesNetwork<Scalar>::set_head(HeadParams<Scalar> head) {
  touch();
  head_ = std::move(head);
}

template <RealScalar Scalar>
std::vector<std::vector<std::size_t>> SeriesNetwork<Scalar>::incoming() const {
  std::vector<std::vector<std::size_t>> in(static_cast<std::size_t>(node_count_));
  for (std::size_t i = 0; i < edges_.size(); ++i) in[static_cast<std::size_t>(edges_[i].to)].push_back(i);
  return in;
}

template <RealScalar Scalar>
std::vector<NodeId> SeriesNetwork<Scalar>::topological_order() const {
  const auto n = static_cast<std::size_t>(node_count_);
  std::vector<int> indegree(n, 0);
  std::vector<std::vector<NodeId>> out(n);
  for (const auto& e : edges_) {
    ++indegree[static_cast<std::size_t>(e.to)];
    out[static_cast<std::size_t>(e.from)].push_back(e.to);
  }
  // Smallest ready id first keeps the order stable.
  std::priority_queue<NodeId, std::vector<NodeId>, std::greater<>> ready;
  for (std::size_t v = 0; v < n; ++v) {
    if (indegree[v] == 0) ready.push(static_cast<NodeId>(v));
  }
  std::vector<NodeId> order;
  while (!ready.empty()) {
    const NodeId v = ready.top();
    ready.pop();
    order.push_back(v);
    for (NodeId w : out[static_cast<std::size_t>(v)]) {
      if (--indegree[static_cast<std::size_t>(w)] == 0) ready.push(w);
    }
  }
  if (order.size() != n) throw GraphError("series network contains a cycle");
  return order;
}

template <RealScalar Scalar>
std::vector<ImageGeometry> SeriesNetwork<Scalar>::node_geometry() const {
  const auto order = topological_order();
  const auto in = incoming();
  std::vector<ImageGeometry> geom(static_cast<std::size_t>(node_count_), ImageGeometry{0, 0, 0});
  geom[0] = input_;
  for (NodeId v : order) {
    if (v == input_node()) continue;
    std::optional<ImageGeometry> merged;
    for (std::size_t ei : in[static_cast<std::size_t>(v)]) {
      const auto& e = edges_[ei];
      const ImageGeometry src = geom[static_cast<std::size_t>(e.from)];
      if (src.channels != e.conv.in_channels()) {
        throw GraphError("layer " + e.name.str() + " expects " + std::to_string(e.conv.in_channels()) +
                         " input channels, junction " + std::to_string(e.from) + " carries " +
                         std::to_string(src.channels));
      }
      if (src.height + 2 * e.conv.padding < e.conv.kernel_h() || src.width + 2 * e.conv.padding < e.conv.kernel_w()) {
        throw GraphError("layer " + e.name.str() + " kernel exceeds its padded input");
      }
      const ImageGeometry g{e.conv.out_channels(), e.conv.output_extent(src.height, e.conv.kernel_h()),
                            e.conv.output_extent(src.width, e.conv.kernel_w())};
      if (e.bn.channels() != g.channels) throw GraphError("layer " + e.name.str() + " batch-norm width mismatch");
      if (merged && !(*merged == g)) {
        throw GraphError("junction " + std::to_string(v) + " receives mismatched shapes (layer " + e.name.str() + ")");
      }
      merged = g;
    }
    if (!merged) throw GraphError("junction " + std::to_string(v) + " has no incoming layer");
    geom[static_cast<std::size_t>(v)] = *merged;
  }
  return geom;
}

template <RealScalar Scalar>
void SeriesNetwork<Scalar>::validate() const {
  const auto n = static_cast<std::size_t>(node_count_);
  std::set<LayerName> names;
  for (const auto& e : edges_) {
    if (!names.insert(e.name).second) throw GraphError("duplicate layer name " + e.name.str());
    e.bn.check();
  }
  const auto geom = node_geometry();  // also rejects cycles

  // Every node must be reachable from the input and must reach the output.
  std::vector<std::vector<NodeId>> fwd(n), rev(n);
  for (const auto& e : edges_) {
    fwd[static_cast<std::size_t>(e.from)].push_back(e.to);
    rev[static_cast<std::size_t>(e.to)].push_back(e.from);
  }
  auto reach = [n](NodeId start, const std::vector<std::vector<NodeId>>& adj) {
    std::vector<bool> seen(n, false);
    std::vector<NodeId> stack{start};
    seen[static_cast<std::size_t>(start)] = true;
    while (!stack.empty()) {
      NodeId v = stack.back();
      stack.pop_back();
      for (NodeId w : adj[static_cast<std::size_t>(v)]) {
        if (!seen[static_cast<std::size_t>(w)]) {
          seen[static_cast<std::size_t>(w)] = true;
          stack.push_back(w);
        }
      }
    }
    return seen;
  };
  const auto from_input = reach(input_node(), fwd);
  const auto to_output = reach(output_node(), rev);
  for (std::size_t v = 0; v < n; ++v) {
    if (!from_input[v] || !to_output[v]) {
      throw GraphError("junction " + std::to_string(v) + " is not on an input-to-output path");
    }
  }
  const auto& out = geom[static_cast<std::size_t>(output_node())];
  if (head_.weights.empty() || head_.features() != out.channels || head_.classes() != classes_ ||
      head_.bias.size() != classes_) {
    throw GraphError("classifier head does not match the output junction");
  }
}

template <RealScalar Scalar>
std::vector<std::string> SeriesNetwork<Scalar>::parameter_keys() const {
  std::vector<std::string> keys;
  for (const auto& e : edges_) {
    keys.push_back(weights_key(e.name));
    keys.push_back(gamma_key(e.name));
    keys.push_back(beta_key(e.name));
  }
  keys.push_back(head_weights_key);
  keys.push_back(head_bias_key);
  return keys;
}

template <RealScalar Scalar>
ParameterRefs<Scalar> SeriesNetwork<Scalar>::parameters() {
  touch();
  ParameterRefs<Scalar> refs;
  for (auto& e : edges_) {
    refs[weights_key(e.name)] = &e.conv.weights;
    refs[gamma_key(e.name)] = &e.bn.gamma;
    refs[beta_key(e.name)] = &e.bn.beta;
  }
  refs[head_weights_key] = &head_.weights;
  refs[head_bias_key] = &head_.bias;
  return refs;
}

template <RealScalar Scalar>
ConstParameterRefs<Scalar> SeriesNetwork<Scalar>::parameters() const {
  ConstParameterRefs<Scalar> refs;
  for (const auto& e : edges_) {
    refs[weights_key(e.name)] = &e.conv.weights;
    refs[gamma_key(e.name)] = &e.bn.gamma;
    refs[beta_key(e.name)] = &e.bn.beta;
  }
  refs[head_weights_key] = &head_.weights;
  refs[head_bias_key] = &head_.bias;
  return refs;
}

template <RealScalar Scalar>
Index SeriesNetwork<Scalar>::parameter_count() const {
  Index total = head_.weights.size() + head_.bias.size();
  for (const auto& e : edges_) total += e.conv.weights.size() + e.bn.gamma.size() + e.bn.beta.size();
  return total;
}

template <RealScalar Scalar>
bool identical(const SeriesNetwork<Scalar>& a, const SeriesNetwork<Scalar>& b) {
  if (!(a.input_geometry() == b.input_geometry()) || a.classes() != b.classes() ||
      a.node_count() != b.node_count() || a.stage_count() != b.stage_count() ||
      a.activation() != b.activation() || a.edges().size() != b.edges().size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.edges().size(); ++i) {
    const auto& x = a.edges()[i];
    const auto& y = b.edges()[i];
    if (!(x.name == y.name) || x.from != y.from || x.to != y.to || x.origin_stage != y.origin_stage ||
        x.role != y.role || x.conv.stride != y.conv.stride || x.conv.padding != y.conv.padding ||
        !(x.conv.weights == y.conv.weights) || !(x.bn.gamma == y.bn.gamma) || !(x.bn.beta == y.bn.beta) ||
        !(x.bn.running_mean == y.bn.running_mean) || !(x.bn.running_var == y.bn.running_var) ||
        x.bn.epsilon != y.bn.epsilon || x.bn.ema_decay != y.bn.ema_decay) {
      return false;
    }
  }
  return a.head().weights == b.head().weights && a.head().bias == b.head().bias;
}

template <RealScalar Scalar>
SeriesNetwork<Scalar> build_plain_network(const PlainPlan& plan, ImageGeometry input, Index classes,
                                          SeededRng& rng, Scalar bn_decay) {
  if (plan.layers.empty()) throw ConfigError("plain network needs at least one layer");
  SeriesNetwork<Scalar> net(input, classes);
  NodeId prev = net.input_node();
  Index channels = input.channels;
  for (std::size_t j = 0; j < plan.layers.size(); ++j) {
    const auto& spec = plan.layers[j];
    if (spec.kernel % 2 == 0) throw ConfigError("plain network kernels must be odd");
    const bool last = j + 1 == plan.layers.size();
    const NodeId next = last ? net.output_node() : net.add_node();
    Edge<Scalar> e;
    e.name = LayerName{0, static_cast<int>(j + 1)};
    e.from = prev;
    e.to = next;
    e.conv = ConvParams<Scalar>::he_normal(spec.filters, channels, spec.kernel, spec.stride, spec.padding, rng);
    e.bn = BatchNormParams<Scalar>::standard(spec.filters, bn_decay);
    e.origin_stage = 0;
    e.role = EdgeRole::backbone;
    net.add_edge(std::move(e));
    prev = next;
    channels = spec.filters;
  }
  net.set_head(HeadParams<Scalar>::he_normal(classes, channels, rng));
  try {
    net.validate();
  } catch (const GraphError& err) {
    throw ConfigError(std::string("invalid plain plan: ") + err.what());
  }
  return net;
}

namespace {

template <RealScalar Scalar>
void check_batch(const SeriesNetwork<Scalar>& net, const Tensor<Scalar>& batch) {
  const auto& g = net.input_geometry();
  if (batch.rank() != 4 || batch.dim(1) != g.channels || batch.dim(2) != g.height || batch.dim(3) != g.width) {
    throw ShapeError("batch shape " + shape_string(batch.shape()) + " does not match network input [B," +
                     std::to_string(g.channels) + "," + std::to_string(g.height) + "," + std::to_string(g.width) + "]");
  }
}

// Shared forward driver. stats is non-null only in train mode and receives the
// running-statistics updates; keep_cache retains everything backward needs.
template <RealScalar Scalar>
ForwardResult<Scalar> run_forward(const SeriesNetwork<Scalar>& net, std::vector<Edge<Scalar>>* stats,
                                  const Tensor<Scalar>& batch, std::span<const int> labels, Mode mode,
                                  bool keep_cache) {
  check_batch(net, batch);
  const auto order = net.topological_order();
  const auto in = net.incoming();
  const auto& edges = net.edges();
  const auto nodes = static_cast<std::size_t>(net.node_count());

  std::vector<int> consumers(nodes, 0);
  for (const auto& e : edges) ++consumers[static_cast<std::size_t>(e.from)];

  ForwardResult<Scalar> result;
  auto& cache = result.cache;
  cache.revision = net.revision();
  cache.mode = mode;
  cache.node_values.resize(nodes);
  if (keep_cache) cache.bn.resize(edges.size());
  cache.node_values[0] = batch;

  for (NodeId v : order) {
    if (v == net.input_node()) continue;
    Tensor<Scalar> sum;
    for (std::size_t ei : in[static_cast<std::size_t>(v)]) {
      const auto& e = edges[ei];
      const auto src = static_cast<std::size_t>(e.from);
      Tensor<Scalar> z = conv_forward(cache.node_values[src], e.conv);
      BatchNormCache<Scalar>* bc = keep_cache ? &cache.bn[ei] : nullptr;
      Tensor<Scalar> y = stats ? batch_norm_forward(z, (*stats)[ei].bn, Mode::train, bc) : batch_norm_eval(z, e.bn, bc);
      if (!keep_cache && --consumers[src] == 0 && src != 0) cache.node_values[src] = Tensor<Scalar>();
      if (sum.empty()) {
        sum = std::move(y);
      } else {
        if (y.shape() != sum.shape()) {
          throw GraphError("junction " + std::to_string(v) + ": layer " + e.name.str() + " delivers " +
                           shape_string(y.shape()) + ", expected " + shape_string(sum.shape()));
        }
        sum.values() += y.values();
      }
    }
    if (v != net.output_node()) sum = activation_forward(net.activation(), sum);
    cache.node_values[static_cast<std::size_t>(v)] = std::move(sum);
  }

  cache.head = head_forward(cache.node_values[static_cast<std::size_t>(net.output_node())], labels, net.head());
  result.logits = cache.head.logits;
  result.loss = cache.head.loss;
  result.accuracy = cache.head.accuracy;
  result.correct = cache.head.correct;
  if (!keep_cache) cache = ForwardCache<Scalar>{};
  return result;
}

}  // namespace

template <RealScalar Scalar>
ForwardResult<Scalar> forward_pass(SeriesNetwork<Scalar>& net, const Tensor<Scalar>& batch,
                                   std::span<const int> labels, Mode mode) {
  if (mode == Mode::eval) return run_forward<Scalar>(net, nullptr, batch, labels, mode, true);
  // Running statistics are not trainable parameters, so updating them must not
  // invalidate the cache being built; bypass mutable_edges() and its revision bump.
  auto& edges = const_cast<std::vector<Edge<Scalar>>&>(net.edges());
  return run_forward<Scalar>(net, &edges, batch, labels, mode, true);
}

template <RealScalar Scalar>
ForwardResult<Scalar> forward_eval(const SeriesNetwork<Scalar>& net, const Tensor<Scalar>& batch,
                                   std::span<const int> labels) {
  return run_forward<Scalar>(net, nullptr, batch, labels, Mode::eval, false);
}

template <RealScalar Scalar>
GradientSet<Scalar> backward_pass(const SeriesNetwork<Scalar>& net, const ForwardCache<Scalar>& cache,
                                  std::span<const int> labels) {
  if (cache.revision != net.revision()) {
    throw ConsistencyError("forward cache is stale: network changed since the forward pass");
  }
  if (cache.mode != Mode::train) throw ConsistencyError("backward_pass requires a train-mode forward cache");
  const auto nodes = static_cast<std::size_t>(net.node_count());
  const auto& edges = net.edges();
  if (cache.node_values.size() != nodes || cache.bn.size() != edges.size()) {
    throw ConsistencyError("forward cache does not match the network topology");
  }
  const auto order = net.topological_order();
  const auto in = net.incoming();

  GradientSet<Scalar> grads;
  auto head = head_backward(cache.head, labels, net.head());
  grads[head_weights_key] = std::move(head.weights);
  grads[head_bias_key] = std::move(head.bias);

  std::vector<Tensor<Scalar>> node_grad(nodes);
  node_grad[static_cast<std::size_t>(net.output_node())] = std::move(head.features);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const NodeId v = *it;
    if (v == net.input_node()) continue;
    const auto vi = static_cast<std::size_t>(v);
    Tensor<Scalar> g = std::move(node_grad[vi]);
    if (v != net.output_node()) g = activation_backward(net.activation(), cache.node_values[vi], g);
    for (std::size_t ei : in[vi]) {
      const auto& e = edges[ei];
      auto bg = batch_norm_backward(cache.bn[ei], e.bn, g);
      grads[gamma_key(e.name)] = std::move(bg.gamma);
      grads[beta_key(e.name)] = std::move(bg.beta);
      const auto src = static_cast<std::size_t>(e.from);
      const bool need_input = e.from != net.input_node();
      auto cg = conv_backward(cache.node_values[src], e.conv, bg.input, need_input);
      grads[weights_key(e.name)] = std::move(cg.weights);
      if (!need_input) continue;
      if (node_grad[src].empty()) {
        node_grad[src] = std::move(cg.input);
      } else {
        node_grad[src].values() += cg.input.values();
      }
    }
  }
  return grads;
}

#define S2C_INSTANTIATE_GRAPH(S)                                                                                \
  template class SeriesNetwork<S>;                                                                              \
  template bool identical(const SeriesNetwork<S>&, const SeriesNetwork<S>&);                                    \
  template SeriesNetwork<S> build_plain_network(const PlainPlan&, ImageGeometry, Index, SeededRng&, S);         \
  template ForwardResult<S> forward_pass(SeriesNetwork<S>&, const Tensor<S>&, std::span<const int>, Mode);      \
  template ForwardResult<S> forward_eval(const SeriesNetwork<S>&, const Tensor<S>&, std::span<const int>);      \
  template GradientSet<S> backward_pass(const SeriesNetwork<S>&, const ForwardCache<S>&, std::span<const int>);

S2C_INSTANTIATE_GRAPH(float)
S2C_INSTANTIATE_GRAPH(double)

#undef S2C_INSTANTIATE_GRAPH

}  // namespace s2c
