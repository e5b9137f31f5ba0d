#include <cmath>
#include <vector>

#include "doctest.h"
#include "s2c/errors.hpp"
#include "s2c/layers.hpp"
#include "support.hpp"

using namespace s2c;
using namespace s2c::testing;

namespace {

struct ConvCase {
  Index batch, in, out, size, kernel, stride, pad;
};

const ConvCase conv_cases[] = {
    {2, 3, 4, 7, 3, 1, 1}, {1, 2, 3, 8, 5, 2, 2}, {3, 1, 2, 6, 1, 1, 0},
    {2, 2, 2, 9, 3, 2, 1}, {1, 3, 2, 5, 5, 1, 2}, {1, 2, 2, 6, 3, 2, 0},
};

}  // namespace

TEST_SUITE("nn_layers") {
  TEST_CASE("conv forward equals the naive loop") {
    SeededRng rng(1);
    for (const auto& c : conv_cases) {
      CAPTURE(c.kernel);
      CAPTURE(c.stride);
      auto x = Tensor<double>::normal({c.batch, c.in, c.size, c.size}, 0.0, 1.0, rng);
      auto p = ConvParams<double>::he_normal(c.out, c.in, c.kernel, c.stride, c.pad, rng);
      const auto y = conv_forward(x, p);
      const auto ref = naive_conv(x, p.weights, c.stride, c.pad);
      REQUIRE(y.shape() == ref.shape());
      CHECK(max_abs_diff(y, ref) <= 1e-12);
    }
  }

  TEST_CASE("conv forward in single precision tracks the double oracle") {
    SeededRng rng(2);
    auto xd = Tensor<double>::normal({2, 3, 8, 8}, 0.0, 1.0, rng);
    auto pd = ConvParams<double>::he_normal(4, 3, 5, 2, 2, rng);
    Tensor<float> xf({2, 3, 8, 8}), wf(pd.weights.shape());
    for (Index i = 0; i < xd.size(); ++i) xf[i] = static_cast<float>(xd[i]);
    for (Index i = 0; i < wf.size(); ++i) wf[i] = static_cast<float>(pd.weights[i]);
    ConvParams<float> pf{wf, 2, 2};
    const auto yf = conv_forward(xf, pf);
    const auto ref = naive_conv(xd, pd.weights, 2, 2);
    for (Index i = 0; i < ref.size(); ++i) CHECK(std::abs(yf[i] - ref[i]) <= 1e-5);
  }

  TEST_CASE("conv backward matches finite differences") {
    SeededRng rng(3);
    for (const auto& c : conv_cases) {
      auto x = Tensor<double>::normal({c.batch, c.in, c.size, c.size}, 0.0, 1.0, rng);
      auto p = ConvParams<double>::he_normal(c.out, c.in, c.kernel, c.stride, c.pad, rng);
      const auto y0 = conv_forward(x, p);
      const auto u = Tensor<double>::normal(y0.shape(), 0.0, 1.0, rng);
      const auto g = conv_backward(x, p, u);
      auto loss = [&] { return dot(naive_conv(x, p.weights, c.stride, c.pad), u); };
      for (Index i = 0; i < x.size(); i += 3) {
        CHECK(relative_error(g.input[i], central_difference<double>(loss, x[i], 1e-5)) <= 1e-6);
      }
      for (Index i = 0; i < p.weights.size(); i += 2) {
        CHECK(relative_error(g.weights[i], central_difference<double>(loss, p.weights[i], 1e-5)) <= 1e-6);
      }
      CHECK(conv_backward(x, p, u, false).input.size() == 0);
    }
  }

  TEST_CASE("conv rejects mismatched channels") {
    SeededRng rng(4);
    auto p = ConvParams<double>::he_normal(2, 3, 3, 1, 1, rng);
    CHECK_THROWS_AS(conv_forward(Tensor<double>::zeros({1, 2, 5, 5}), p), ShapeError);
  }

  TEST_CASE("he-normal stddev is sqrt(2 / fan_in)") {
    SeededRng rng(5);
    auto p = ConvParams<double>::he_normal(64, 32, 5, 1, 2, rng);
    double sum = 0.0, sq = 0.0;
    for (Index i = 0; i < p.weights.size(); ++i) {
      sum += p.weights[i];
      sq += p.weights[i] * p.weights[i];
    }
    const double n = static_cast<double>(p.weights.size());
    CHECK(std::abs(sum / n) < 0.005);
    CHECK(std::sqrt(sq / n) == doctest::Approx(std::sqrt(2.0 / 800.0)).epsilon(0.02));
  }

  TEST_CASE("batch norm train forward normalizes with biased batch moments") {
    SeededRng rng(6);
    auto x = Tensor<double>::normal({4, 2, 3, 3}, 2.0, 3.0, rng);
    auto p = BatchNormParams<double>::standard(2, 0.9);
    p.gamma[0] = 1.5;
    p.beta[1] = -0.5;
    const auto y = batch_norm_forward(x, p, Mode::train);
    for (Index c = 0; c < 2; ++c) {
      double mean = 0.0, n = 36.0;
      for (Index b = 0; b < 4; ++b)
        for (Index h = 0; h < 3; ++h)
          for (Index w = 0; w < 3; ++w) mean += x(b, c, h, w) / n;
      double var = 0.0;
      for (Index b = 0; b < 4; ++b)
        for (Index h = 0; h < 3; ++h)
          for (Index w = 0; w < 3; ++w) var += (x(b, c, h, w) - mean) * (x(b, c, h, w) - mean) / n;
      for (Index b = 0; b < 4; ++b) {
        const double expect = (c == 0 ? 1.5 : 1.0) * (x(b, c, 1, 2) - mean) / std::sqrt(var + 1e-5) + (c == 1 ? -0.5 : 0.0);
        CHECK(y(b, c, 1, 2) == doctest::Approx(expect).epsilon(1e-12));
      }
      CHECK(p.running_mean[c] == doctest::Approx(0.1 * mean).epsilon(1e-12));
      CHECK(p.running_var[c] == doctest::Approx(0.9 + 0.1 * var).epsilon(1e-12));
    }
  }

  TEST_CASE("batch norm eval uses running statistics and leaves parameters alone") {
    auto p = BatchNormParams<double>::standard(1);
    p.gamma[0] = 2.0;
    p.beta[0] = 0.25;
    p.running_mean[0] = 1.0;
    p.running_var[0] = 4.0;
    const auto before = p;
    auto x = Tensor<double>::from_values({1, 1, 1, 2}, {3.0, -1.0});
    const auto y = batch_norm_forward(x, p, Mode::eval);
    CHECK(y[0] == doctest::Approx(2.0 * 2.0 / std::sqrt(4.0 + 1e-5) + 0.25).epsilon(1e-15));
    CHECK(y[1] == doctest::Approx(2.0 * -2.0 / std::sqrt(4.0 + 1e-5) + 0.25).epsilon(1e-15));
    CHECK(p.running_mean == before.running_mean);
    CHECK(p.running_var == before.running_var);
  }

  TEST_CASE("zero gamma and beta make the batch norm output exactly zero") {
    SeededRng rng(7);
    auto x = Tensor<float>::normal({3, 2, 4, 4}, 0.0f, 5.0f, rng);
    auto p = BatchNormParams<float>::standard(2);
    p.gamma = Tensor<float>::zeros({2});
    for (Mode m : {Mode::train, Mode::eval}) {
      const auto y = batch_norm_forward(x, p, m);
      for (Index i = 0; i < y.size(); ++i) REQUIRE(y[i] == 0.0f);
    }
  }

  TEST_CASE("batch norm backward matches finite differences in train mode") {
    SeededRng rng(8);
    auto x = Tensor<double>::normal({3, 2, 3, 3}, 0.5, 2.0, rng);
    auto p = BatchNormParams<double>::standard(2);
    p.gamma[0] = 0.7;
    p.gamma[1] = -1.3;
    p.beta[0] = 0.2;
    const auto u = Tensor<double>::normal(x.shape(), 0.0, 1.0, rng);
    BatchNormCache<double> cache;
    auto work = p;
    batch_norm_forward(x, work, Mode::train, &cache);
    const auto g = batch_norm_backward(cache, p, u);
    auto loss = [&] {
      auto q = p;
      return dot(batch_norm_forward(x, q, Mode::train), u);
    };
    for (Index i = 0; i < x.size(); ++i) {
      CHECK(relative_error(g.input[i], central_difference<double>(loss, x[i], 1e-5), 1e-7) <= 1e-5);
    }
    for (Index c = 0; c < 2; ++c) {
      CHECK(relative_error(g.gamma[c], central_difference<double>(loss, p.gamma[c], 1e-5)) <= 1e-6);
      CHECK(relative_error(g.beta[c], central_difference<double>(loss, p.beta[c], 1e-5)) <= 1e-6);
    }
  }

  TEST_CASE("batch norm backward matches finite differences in eval mode") {
    SeededRng rng(9);
    auto x = Tensor<double>::normal({2, 2, 2, 2}, 0.0, 1.0, rng);
    auto p = BatchNormParams<double>::standard(2);
    p.gamma[1] = 3.0;
    p.running_mean[0] = 0.3;
    p.running_var[1] = 2.5;
    const auto u = Tensor<double>::normal(x.shape(), 0.0, 1.0, rng);
    BatchNormCache<double> cache;
    batch_norm_eval(x, p, &cache);
    const auto g = batch_norm_backward(cache, p, u);
    auto loss = [&] { return dot(batch_norm_eval(x, p), u); };
    for (Index i = 0; i < x.size(); ++i) {
      CHECK(relative_error(g.input[i], central_difference<double>(loss, x[i], 1e-5)) <= 1e-7);
    }
    for (Index c = 0; c < 2; ++c) {
      CHECK(relative_error(g.gamma[c], central_difference<double>(loss, p.gamma[c], 1e-5)) <= 1e-7);
    }
  }

  TEST_CASE("relu forward and backward") {
    auto x = Tensor<double>::from_values({4}, {-1.0, 0.0, 2.0, -0.0});
    const auto y = relu_forward(x);
    CHECK(y[0] == 0.0);
    CHECK(y[1] == 0.0);
    CHECK(y[2] == 2.0);
    auto u = Tensor<double>::from_values({4}, {5.0, 6.0, 7.0, 8.0});
    const auto g = relu_backward(x, u);
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);  // derivative at 0 is 0
    CHECK(g[2] == 7.0);
    CHECK(g[3] == 0.0);
  }

  TEST_CASE("add junction sums in order and fans the gradient out") {
    auto a = Tensor<float>::from_values({2}, {1.0f, 2.0f});
    auto b = Tensor<float>::from_values({2}, {10.0f, 20.0f});
    const Tensor<float>* in[] = {&a, &b};
    const auto s = add_junction_forward<float>(std::span<const Tensor<float>* const>(in));
    CHECK(s[0] == 11.0f);
    CHECK(s[1] == 22.0f);
    const auto g = add_junction_backward<float>(2, s);
    REQUIRE(g.size() == 2);
    CHECK(g[0] == s);
    CHECK(g[1] == s);
    auto c = Tensor<float>::zeros({3});
    const Tensor<float>* bad[] = {&a, &c};
    CHECK_THROWS_AS(add_junction_forward<float>(std::span<const Tensor<float>* const>(bad)), ShapeError);
  }

  TEST_CASE("head computes pooled linear softmax cross-entropy") {
    SeededRng rng(10);
    auto f = Tensor<double>::normal({3, 4, 2, 2}, 0.0, 1.0, rng);
    auto p = HeadParams<double>::he_normal(5, 4, rng);
    p.bias = Tensor<double>::normal({5}, 0.0, 0.1, rng);
    const std::vector<int> labels{0, 3, 4};
    const auto out = head_forward(f, std::span<const int>(labels), p);
    double total = 0.0;
    Index correct = 0;
    for (Index n = 0; n < 3; ++n) {
      std::vector<double> pooled(4, 0.0), logits(5, 0.0);
      for (Index c = 0; c < 4; ++c)
        for (Index h = 0; h < 2; ++h)
          for (Index w = 0; w < 2; ++w) pooled[c] += f(n, c, h, w) / 4.0;
      for (Index k = 0; k < 5; ++k) {
        logits[k] = p.bias[k];
        for (Index c = 0; c < 4; ++c) logits[k] += p.weights[k * 4 + c] * pooled[c];
        CHECK(out.logits[n * 5 + k] == doctest::Approx(logits[k]).epsilon(1e-13));
      }
      double mx = logits[0];
      Index arg = 0;
      for (Index k = 1; k < 5; ++k) {
        if (logits[k] > mx) {
          mx = logits[k];
          arg = k;
        }
      }
      double z = 0.0;
      for (double l : logits) z += std::exp(l - mx);
      total += -(logits[labels[n]] - mx - std::log(z));
      correct += arg == labels[n];
    }
    CHECK(out.loss == doctest::Approx(total / 3.0).epsilon(1e-13));
    CHECK(out.correct == correct);
    CHECK_THROWS_AS(head_forward(f, std::span<const int>(std::vector<int>{0, 1, 5}), p), DataError);
    CHECK_THROWS_AS(head_forward(f, std::span<const int>(std::vector<int>{0, 1}), p), DataError);
  }

  TEST_CASE("head backward matches finite differences") {
    SeededRng rng(11);
    auto f = Tensor<double>::normal({2, 3, 2, 2}, 0.0, 1.0, rng);
    auto p = HeadParams<double>::he_normal(4, 3, rng);
    const std::vector<int> labels{2, 1};
    const auto out = head_forward(f, std::span<const int>(labels), p);
    const auto g = head_backward(out, std::span<const int>(labels), p);
    auto loss = [&] { return head_forward(f, std::span<const int>(labels), p).loss; };
    for (Index i = 0; i < f.size(); ++i) {
      CHECK(relative_error(g.features[i], central_difference<double>(loss, f[i], 1e-5)) <= 1e-6);
    }
    for (Index i = 0; i < p.weights.size(); ++i) {
      CHECK(relative_error(g.weights[i], central_difference<double>(loss, p.weights[i], 1e-5)) <= 1e-6);
    }
    for (Index i = 0; i < p.bias.size(); ++i) {
      CHECK(relative_error(g.bias[i], central_difference<double>(loss, p.bias[i], 1e-5)) <= 1e-6);
    }
  }

  TEST_CASE("cross-entropy is stable for large logits") {
    auto f = Tensor<double>::constant({1, 1, 1, 1}, 1.0);
    HeadParams<double> p{Tensor<double>::from_values({2, 1}, {1000.0, -1000.0}), Tensor<double>::zeros({2})};
    const std::vector<int> labels{1};
    const auto out = head_forward(f, std::span<const int>(labels), p);
    CHECK(std::isfinite(out.loss));
    CHECK(out.loss == doctest::Approx(2000.0));
  }
}
