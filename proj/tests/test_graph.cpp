#include <algorithm>
#include <random>
#include <string>

#include "doctest.h"
#include "s2c/errors.hpp"
#include "s2c/growth.hpp"
#include "s2c/series_graph.hpp"
#include "support.hpp"

using namespace s2c;
using namespace s2c::testing;

namespace {

PlainPlan tiny_plan() {
  const Index f[] = {2, 3, 3, 4};
  const Index k[] = {3, 3, 3, 3};
  const Index s[] = {1, 2, 1, 1};
  return PlainPlan::from_lists(f, k, s);
}

template <RealScalar S>
void randomize_bn(SeriesNetwork<S>& net, SeededRng& rng) {
  for (auto& e : net.mutable_edges()) {
    for (Index c = 0; c < e.bn.channels(); ++c) {
      e.bn.gamma[c] = static_cast<S>(0.5 + rng.uniform());
      e.bn.beta[c] = static_cast<S>(0.2 * rng.normal());
      e.bn.running_mean[c] = static_cast<S>(0.1 * rng.normal());
      e.bn.running_var[c] = static_cast<S>(0.5 + rng.uniform());
    }
  }
}

}  // namespace

TEST_SUITE("series_graph") {
  TEST_CASE("layer names parse and print") {
    CHECK(LayerName::parse("2_24") == LayerName{2, 24});
    CHECK(LayerName{1, 12}.str() == "1_12");
    CHECK_THROWS(LayerName::parse("2-24"));
    CHECK_THROWS(LayerName::parse("a_1"));
    CHECK_THROWS(LayerName::parse("1_0"));
  }

  TEST_CASE("default plain network shape") {
    SeededRng rng(1);
    auto net = build_plain_network<float>(PlainPlan::cifar_default(), ImageGeometry{3, 32, 32}, 10, rng);
    REQUIRE(net.edges().size() == 6);
    const Index filters[] = {8, 8, 16, 16, 32, 32};
    const Index strides[] = {1, 1, 2, 1, 2, 1};
    for (std::size_t i = 0; i < 6; ++i) {
      const auto& e = net.edges()[i];
      CHECK(e.name == LayerName{0, static_cast<int>(i + 1)});
      CHECK(e.conv.out_channels() == filters[i]);
      CHECK(e.conv.kernel_h() == 5);
      CHECK(e.conv.padding == 2);
      CHECK(e.conv.stride == strides[i]);
      CHECK(e.role == EdgeRole::backbone);
    }
    CHECK(net.stage_count() == 0);
    CHECK(net.node_count() == 7);
    const auto geo = net.node_geometry();
    CHECK(geo[static_cast<std::size_t>(net.output_node())] == ImageGeometry{32, 8, 8});
    CHECK(net.head().features() == 32);
    CHECK(net.parameter_keys().size() == 6 * 3 + 2);
    Index count = 10 * 32 + 10;
    const Index ins[] = {3, 8, 8, 16, 16, 32};
    for (std::size_t i = 0; i < 6; ++i) count += filters[i] * ins[i] * 25 + 2 * filters[i];
    CHECK(net.parameter_count() == count);
  }

  TEST_CASE("eval forward of a chain equals composing the layer functions") {
    SeededRng rng(2);
    auto net = build_plain_network<double>(tiny_plan(), ImageGeometry{3, 6, 6}, 4, rng);
    randomize_bn(net, rng);
    auto x = Tensor<double>::normal({2, 3, 6, 6}, 0.0, 1.0, rng);
    Tensor<double> h = x;
    for (std::size_t i = 0; i < net.edges().size(); ++i) {
      const auto& e = net.edges()[i];
      h = batch_norm_eval(conv_forward(h, e.conv), e.bn);
      if (i + 1 < net.edges().size()) h = relu_forward(h);
    }
    const auto ref = head_forward(h, {}, net.head());
    const auto got = forward_eval(net, x);
    CHECK(got.logits == ref.logits);
  }

  TEST_CASE("topological order is deterministic and respects edges") {
    SeededRng rng(3);
    auto net = build_plain_network<double>(tiny_plan(), ImageGeometry{3, 6, 6}, 4, rng);
    SeededRng g(4);
    net = apply_growth(net, plan_growth(net), g);
    const auto order = net.topological_order();
    CHECK(order == net.topological_order());
    std::vector<int> pos(static_cast<std::size_t>(net.node_count()));
    for (std::size_t i = 0; i < order.size(); ++i) pos[static_cast<std::size_t>(order[i])] = static_cast<int>(i);
    for (const auto& e : net.edges()) CHECK(pos[static_cast<std::size_t>(e.from)] < pos[static_cast<std::size_t>(e.to)]);
    CHECK(order.front() == net.input_node());
    CHECK(order.back() == net.output_node());
  }

  TEST_CASE("validation rejects cycles, mismatched junctions and duplicates") {
    SeededRng rng(5);
    {
      SeriesNetwork<double> net(ImageGeometry{1, 4, 4}, 2);
      const NodeId a = net.add_node();
      const NodeId b = net.add_node();
      auto mk = [&](int ord, NodeId from, NodeId to) {
        return Edge<double>{LayerName{0, ord}, from, to, ConvParams<double>::he_normal(1, 1, 1, 1, 0, rng),
                            BatchNormParams<double>::standard(1), 0, EdgeRole::backbone};
      };
      net.add_edge(mk(1, net.input_node(), a));
      net.add_edge(mk(2, a, b));
      net.add_edge(mk(3, b, a));
      net.add_edge(mk(4, b, net.output_node()));
      net.set_head(HeadParams<double>::he_normal(2, 1, rng));
      CHECK_THROWS_AS(net.validate(), GraphError);
      CHECK_THROWS_AS(net.add_edge(mk(4, a, b)), GraphError);
    }
    {
      SeriesNetwork<double> net(ImageGeometry{1, 4, 4}, 2);
      const NodeId a = net.add_node();
      net.add_edge(Edge<double>{LayerName{0, 1}, net.input_node(), a, ConvParams<double>::he_normal(2, 1, 3, 1, 1, rng),
                                BatchNormParams<double>::standard(2), 0, EdgeRole::backbone});
      net.add_edge(Edge<double>{LayerName{0, 2}, a, net.output_node(), ConvParams<double>::he_normal(2, 2, 3, 1, 1, rng),
                                BatchNormParams<double>::standard(2), 0, EdgeRole::backbone});
      net.add_edge(Edge<double>{LayerName{0, 3}, a, net.output_node(), ConvParams<double>::he_normal(2, 2, 3, 2, 1, rng),
                                BatchNormParams<double>::standard(2), 0, EdgeRole::backbone});
      net.set_head(HeadParams<double>::he_normal(2, 2, rng));
      try {
        net.validate();
        FAIL("expected a junction shape error");
      } catch (const GraphError& e) {
        CHECK(std::string(e.what()).find("junction") != std::string::npos);
      }
    }
  }

  TEST_CASE("train forward updates running statistics without invalidating the cache") {
    SeededRng rng(6);
    auto net = build_plain_network<double>(tiny_plan(), ImageGeometry{3, 6, 6}, 4, rng, 0.9);
    auto x = Tensor<double>::normal({4, 3, 6, 6}, 0.0, 1.0, rng);
    const std::vector<int> labels{0, 1, 2, 3};
    const auto rev = net.revision();
    const auto before = net.edges()[0].bn.running_mean;
    const auto fr = forward_pass(net, x, std::span<const int>(labels), Mode::train);
    CHECK(net.revision() == rev);
    CHECK_FALSE(net.edges()[0].bn.running_mean == before);
    CHECK_NOTHROW(backward_pass(net, fr.cache, std::span<const int>(labels)));
  }

  TEST_CASE("stale or eval caches are rejected by backward") {
    SeededRng rng(7);
    auto net = build_plain_network<double>(tiny_plan(), ImageGeometry{3, 6, 6}, 4, rng);
    auto x = Tensor<double>::normal({2, 3, 6, 6}, 0.0, 1.0, rng);
    const std::vector<int> labels{0, 1};
    const auto fr = forward_pass(net, x, std::span<const int>(labels), Mode::train);
    net.mutable_head();
    CHECK_THROWS_AS(backward_pass(net, fr.cache, std::span<const int>(labels)), ConsistencyError);
    const auto ev = forward_pass(net, x, std::span<const int>(labels), Mode::eval);
    CHECK_THROWS_AS(backward_pass(net, ev.cache, std::span<const int>(labels)), ConsistencyError);
  }

  TEST_CASE("backward matches finite differences on a grown network") {
    SeededRng rng(8);
    auto net = build_plain_network<double>(tiny_plan(), ImageGeometry{3, 6, 6}, 3, rng);
    SeededRng g(9);
    net = apply_growth(net, plan_growth(net), g);
    randomize_bn(net, rng);
    auto x = Tensor<double>::normal({3, 3, 6, 6}, 0.0, 1.0, rng);
    const std::vector<int> labels{0, 2, 1};
    const auto fr = forward_pass(net, x, std::span<const int>(labels), Mode::train);
    const auto grads = backward_pass(net, fr.cache, std::span<const int>(labels));
    CHECK(grads.size() == net.parameter_keys().size());
    auto params = net.parameters();
    auto loss = [&] {
      auto copy = net;
      return forward_pass(copy, x, std::span<const int>(labels), Mode::train).loss;
    };
    std::mt19937_64 pick(10);
    int checked = 0;
    for (auto& [key, tensor] : params) {
      for (int s = 0; s < 3; ++s) {
        const Index i = static_cast<Index>(pick() % static_cast<std::uint64_t>(tensor->size()));
        const double fd = central_difference<double>(loss, (*tensor)[i], 1e-5);
        const double an = grads.at(key)[i];
        CAPTURE(key);
        CHECK(relative_error(an, fd, 1e-6) <= 1e-4);
        ++checked;
      }
    }
    CHECK(checked >= 3 * 20);
  }

  TEST_CASE("identical compares structure and parameters bitwise") {
    SeededRng a(11), b(11);
    auto n1 = build_plain_network<float>(tiny_plan(), ImageGeometry{3, 6, 6}, 4, a);
    auto n2 = build_plain_network<float>(tiny_plan(), ImageGeometry{3, 6, 6}, 4, b);
    CHECK(identical(n1, n2));
    n2.mutable_edge(LayerName{0, 2}).bn.beta[0] = 1e-30f;
    CHECK_FALSE(identical(n1, n2));
  }

  TEST_CASE("plain plan rejects even kernels and mismatched lists") {
    const Index f[] = {2, 2};
    const Index k_even[] = {3, 4};
    const Index s[] = {1, 1};
    CHECK_THROWS_AS(PlainPlan::from_lists(f, k_even, s), ConfigError);
    const Index k1[] = {3};
    CHECK_THROWS_AS(PlainPlan::from_lists(f, k1, s), ConfigError);
  }
}
