#include <set>
#include <string>

#include "doctest.h"
#include "s2c/errors.hpp"
#include "s2c/growth.hpp"
#include "support.hpp"

using namespace s2c;
using namespace s2c::testing;

namespace {

template <RealScalar S>
SeriesNetwork<S> default_net(std::uint64_t seed, ImageGeometry geo = {3, 32, 32}) {
  SeededRng rng(seed);
  return build_plain_network<S>(PlainPlan::cifar_default(), geo, 10, rng);
}

// Stand-in for a trained network: nonzero gammas, betas and running statistics.
template <RealScalar S>
void perturb(SeriesNetwork<S>& net, SeededRng& rng) {
  for (auto& e : net.mutable_edges()) {
    for (Index c = 0; c < e.bn.channels(); ++c) {
      e.bn.gamma[c] = static_cast<S>(0.5 + rng.uniform());
      e.bn.beta[c] = static_cast<S>(0.3 * rng.normal());
      e.bn.running_mean[c] = static_cast<S>(0.2 * rng.normal());
      e.bn.running_var[c] = static_cast<S>(0.5 + rng.uniform());
    }
  }
}

}  // namespace

TEST_SUITE("growth_engine") {
  TEST_CASE("path kernels keep the receptive field") {
    CHECK(path_kernels(5).first == 3);
    CHECK(path_kernels(5).second == 3);
    CHECK(path_kernels(3).first == 3);
    CHECK(path_kernels(3).second == 1);
    CHECK(path_kernels(1).first == 1);
    CHECK(path_kernels(1).second == 1);
    CHECK(path_kernels(7).first == 3);
    CHECK(path_kernels(7).second == 5);
    for (Index k = 1; k <= 11; k += 2) {
      const auto p = path_kernels(k);
      CHECK((p.first - 1) + (p.second - 1) == k - 1);
    }
  }

  TEST_CASE("plan naming follows (i+1)_(2j-1), (i+1)_(2j)") {
    auto net = default_net<float>(1);
    const auto p1 = plan_growth(net);
    CHECK(p1.stage == 1);
    REQUIRE(p1.additions.size() == 6);
    CHECK(p1.new_layer_count() == 6 * 2);
    CHECK(p1.additions[2].target == LayerName{0, 3});
    CHECK(p1.additions[2].first.name == LayerName{1, 5});
    CHECK(p1.additions[2].second.name == LayerName{1, 6});
    CHECK(p1.additions[2].second.stride == 2);
    CHECK(p1.additions[2].first.stride == 1);
    SeededRng g(2);
    net = apply_growth(net, p1, g);
    const auto p2 = plan_growth(net);
    CHECK(p2.stage == 2);
    REQUIRE(p2.additions.size() == 12);
    CHECK(p2.new_layer_count() == 24);
    CHECK(p2.additions[11].target == LayerName{1, 12});
    CHECK(p2.additions[11].first.name == LayerName{2, 23});
    CHECK(p2.additions[11].second.name == LayerName{2, 24});
    for (const auto& a : p2.additions) CHECK(a.target.stage == 1);
  }

  TEST_CASE("growth preserves the function exactly in double precision") {
    auto net = default_net<double>(3, {3, 16, 16});
    SeededRng rng(4);
    for (int stage = 1; stage <= 2; ++stage) {
      perturb(net, rng);
      SeededRng g(static_cast<std::uint64_t>(stage));
      auto child = apply_growth(net, plan_growth(net), g);
      SeededRng probes(5);
      const auto rep = verify_preservation(net, child, 16, probes, 0.0, 4);
      CHECK(rep.pass);
      CHECK(rep.max_abs_diff == 0.0);
      CHECK(rep.probes == 16);
      net = std::move(child);
    }
  }

  TEST_CASE("growth preserves the function within 1e-5 in single precision") {
    auto net = default_net<float>(6, {3, 16, 16});
    SeededRng rng(7);
    for (int stage = 1; stage <= 2; ++stage) {
      perturb(net, rng);
      SeededRng g(static_cast<std::uint64_t>(stage));
      auto child = apply_growth(net, plan_growth(net), g);
      SeededRng probes(8);
      const auto rep = verify_preservation(net, child, 16, probes, 1e-5, 4);
      CHECK(rep.pass);
      CHECK(rep.max_abs_diff <= 1e-5);
      net = std::move(child);
    }
  }

  TEST_CASE("nonzero path gamma breaks preservation and is detected") {
    auto net = default_net<double>(9, {3, 16, 16});
    SeededRng g(1);
    auto child = apply_growth(net, plan_growth(net), g);
    child.mutable_edge(LayerName{1, 12}).bn.gamma[0] = 0.5;
    SeededRng probes(2);
    const auto rep = verify_preservation(net, child, 4, probes, 1e-5, 4);
    CHECK_FALSE(rep.pass);
    CHECK(rep.max_abs_diff > 1e-3);
  }

  TEST_CASE("parameter accounting and bitwise inheritance") {
    auto net = default_net<float>(10);
    SeededRng rng(11);
    perturb(net, rng);
    for (int stage = 1; stage <= 2; ++stage) {
      const auto parent = net;
      const auto plan = plan_growth(parent);
      SeededRng g(static_cast<std::uint64_t>(stage));
      auto child = apply_growth(parent, plan, g);
      CHECK(identical(parent, net));  // parent untouched
      const auto pk = parent.parameter_keys();
      const auto ck = child.parameter_keys();
      const std::set<std::string> ps(pk.begin(), pk.end()), cs(ck.begin(), ck.end());
      std::set<std::string> residual;
      for (const auto& k : cs) {
        if (!ps.count(k)) residual.insert(k);
      }
      CHECK(cs.size() == ps.size() + residual.size());
      CHECK(residual.size() == static_cast<std::size_t>(plan.new_layer_count()) * 3);
      const auto pp = parent.parameters();
      const auto cp = child.parameters();
      for (const auto& [k, t] : pp) {
        REQUIRE(cp.count(k));
        CHECK(*cp.at(k) == *t);
      }
      for (const auto& e : parent.edges()) {
        CHECK(child.edge(e.name).bn.running_mean == e.bn.running_mean);
        CHECK(child.edge(e.name).bn.running_var == e.bn.running_var);
      }
      Index added = 0;
      for (const auto& k : residual) added += cp.at(k)->size();
      CHECK(child.parameter_count() == parent.parameter_count() + added);
      for (const auto& a : plan.additions) {
        const auto& second = child.edge(a.second.name);
        const auto& first = child.edge(a.first.name);
        for (Index c = 0; c < second.bn.channels(); ++c) {
          CHECK(second.bn.gamma[c] == 0.0f);
          CHECK(second.bn.beta[c] == 0.0f);
          CHECK(first.bn.gamma[c] == 1.0f);
        }
        CHECK(second.role == EdgeRole::path_second);
        CHECK(second.origin_stage == stage);
      }
      net = std::move(child);
    }
    CHECK(net.edges().size() == 42);
  }

  TEST_CASE("standard branch init matches the grown key set with unit gammas") {
    auto a = default_net<float>(12);
    auto b = a;
    SeededRng g1(1), g2(1);
    const auto fp = apply_growth(a, plan_growth(a), g1, BranchInit::function_preserving);
    const auto st = apply_growth(b, plan_growth(b), g2, BranchInit::standard);
    CHECK(fp.parameter_keys() == st.parameter_keys());
    CHECK(st.edge(LayerName{1, 2}).bn.gamma[0] == 1.0f);
    // Same rng stream: conv weights agree, only the gamma initialization differs.
    CHECK(st.edge(LayerName{1, 2}).conv.weights == fp.edge(LayerName{1, 2}).conv.weights);
  }

  TEST_CASE("mismatched plans are rejected") {
    auto net = default_net<float>(13);
    auto plan = plan_growth(net);
    SeededRng g(1);
    auto bad_stage = plan;
    bad_stage.stage = 3;
    CHECK_THROWS_AS(apply_growth(net, bad_stage, g), ConsistencyError);
    auto bad_target = plan;
    bad_target.additions[0].target = LayerName{0, 9};
    CHECK_THROWS_AS(apply_growth(net, bad_target, g), ConsistencyError);
    auto bad_channels = plan;
    bad_channels.additions[1].second.out_channels = 3;
    CHECK_THROWS_AS(apply_growth(net, bad_channels, g), ConsistencyError);
    auto dup = plan;
    dup.additions[1].first.name = dup.additions[0].first.name;
    CHECK_THROWS_AS(apply_growth(net, dup, g), ConsistencyError);
    CHECK(apply_growth(net, GrowthPlan{1, {}}, g).edges().size() == net.edges().size());
  }

  TEST_CASE("stop criterion averages newest-stage second-layer gammas") {
    auto net = default_net<float>(14);
    CHECK_THROWS(growth_stop_criterion(net, 0.01));
    SeededRng g(1);
    net = apply_growth(net, plan_growth(net), g);
    auto d0 = growth_stop_criterion(net, 0.01);
    CHECK(d0.stop);
    CHECK(d0.newest_mean_abs_gamma == 0.0);
    for (auto& e : net.mutable_edges()) {
      if (e.role != EdgeRole::path_second) continue;
      for (Index c = 0; c < e.bn.channels(); ++c) e.bn.gamma[c] = 2.0f;
    }
    const auto d1 = growth_stop_criterion(net, 0.01);
    CHECK_FALSE(d1.stop);
    CHECK(d1.newest_mean_abs_gamma == doctest::Approx(2.0));
    REQUIRE(d1.stage_mean_abs_gamma.size() == 2);
    CHECK(d1.stage_mean_abs_gamma[0] == doctest::Approx(1.0));
    auto& e = net.mutable_edge(LayerName{1, 2});
    e.bn.gamma = Tensor<float>::from_values({8}, {-3, 3, -3, 3, -3, 3, -3, 3});
    for (auto& other : net.mutable_edges()) {
      if (other.role == EdgeRole::path_second && other.name != LayerName{1, 2}) {
        for (Index c = 0; c < other.bn.channels(); ++c) other.bn.gamma[c] = (c % 2 ? 3.0f : -3.0f);
      }
    }
    CHECK(growth_stop_criterion(net, 0.01).newest_mean_abs_gamma == doctest::Approx(3.0));
    CHECK(growth_stop_criterion(net, 5.0).stop);
  }
}
