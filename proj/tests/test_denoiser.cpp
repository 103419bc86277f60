#include <cmath>

#include "doctest.h"
#include "pdiff/denoiser.hpp"
#include "support.hpp"

using namespace pdiff;

namespace {

CrossAttentionWeights unit_weights(Tape& tape, int c, int dc, int d) {
  CrossAttentionWeights w;
  w.wq = tape.constant(Tensor({c, d}, 1.0));
  w.wk = tape.constant(Tensor({dc, d}, 1.0));
  w.wv = tape.constant(Tensor({dc, d}, 1.0));
  w.wo = tape.constant(Tensor({d, c}, 1.0));
  w.bo = tape.constant(Tensor({c}));
  return w;
}

struct Fixture {
  ParameterSet params;
  Denoiser net;
  explicit Fixture(DenoiserConfig cfg = {}) : net(params, cfg) {}
};

}  // namespace

TEST_SUITE("denoiser") {
  TEST_CASE("a single token takes all the attention") {
    Tape tape;
    const Var x = tape.constant(testing::random_tensor({2, 3, 3}, 1));
    const Var cond = tape.constant(testing::random_tensor({1, 4}, 2));
    const auto out = cross_attention(x, cond, unit_weights(tape, 2, 4, 2), 1, true);
    for (double v : out.map.value().values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
  }

  TEST_CASE("identical keys split attention evenly") {
    Tape tape;
    const Var x = tape.constant(testing::random_tensor({2, 2, 2}, 3));
    const Var cond = tape.constant(Tensor({2, 4}, 0.3));
    const auto out = cross_attention(x, cond, unit_weights(tape, 2, 4, 2), 1, true);
    for (double v : out.map.value().values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
  }

  TEST_CASE("attention weights follow the softmax of scaled scores") {
    Tape tape;
    const Var x = tape.constant(Tensor({1, 1, 1}, 1.0));
    const Var cond = tape.constant(Tensor({2, 1}, std::vector<double>{1.0, 0.0}));
    const auto out = cross_attention(x, cond, unit_weights(tape, 1, 1, 1), 1, true);
    const double e = std::exp(1.0);
    CHECK(out.map.value()[0] == doctest::Approx(e / (e + 1.0)).epsilon(1e-14));
    CHECK(out.map.value()[1] == doctest::Approx(1.0 / (e + 1.0)).epsilon(1e-14));
    CHECK(out.map.value()[0] == doctest::Approx(0.7311).epsilon(1e-4));
    CHECK(out.map.value()[1] == doctest::Approx(0.2689).epsilon(1e-4));
  }

  TEST_CASE("maps are row-stochastic over tokens at every position") {
    Fixture f;
    testing::jitter_parameters(f.params, 4);
    Tape tape;
    const Var z = tape.constant(testing::random_tensor({3, 32, 32}, 5));
    const Var cond = tape.constant(testing::random_tensor({16, 64}, 6));
    const auto pred = f.net.predict_noise(tape, f.params, z, 40, cond);
    REQUIRE(pred.attention.size() == Denoiser::kAttentionLayers);
    CHECK(pred.attention.resolutions == std::vector<int>{32, 16, 8, 8, 16, 32});
    for (std::size_t l = 0; l < pred.attention.size(); ++l) {
      const Tensor& m = pred.attention.map(l);
      const int r = pred.attention.resolutions[l];
      CHECK(m.dim(0) == 16);
      CHECK(m.dim(1) == r);
      for (int p = 0; p < r * r; ++p) {
        double s = 0.0;
        for (int k = 0; k < 16; ++k) {
          const double v = m[static_cast<std::size_t>(k) * r * r + p];
          CHECK(v >= 0.0);
          s += v;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("fresh network predicts zero noise and is deterministic") {
    Fixture a, b;
    CHECK(a.params.total_elements() <= 100000);
    Tape ta, tb;
    const Tensor z = testing::random_tensor({3, 32, 32}, 7);
    const Tensor c = testing::random_tensor({16, 64}, 8);
    const auto pa = a.net.predict_noise(ta, a.params, ta.constant(z), 10, ta.constant(c));
    const auto pb = b.net.predict_noise(tb, b.params, tb.constant(z), 10, tb.constant(c));
    for (double v : pa.eps.value().values()) CHECK(v == 0.0);
    for (std::size_t l = 0; l < pa.attention.size(); ++l) {
      CHECK(pa.attention.map(l).storage() == pb.attention.map(l).storage());
    }
  }

  TEST_CASE("capturing maps does not change the prediction") {
    Fixture f;
    testing::jitter_parameters(f.params, 9);
    const Tensor z = testing::random_tensor({3, 32, 32}, 10);
    const Tensor c = testing::random_tensor({16, 64}, 11);
    Tape t1, t2;
    const auto on = f.net.predict_noise(t1, f.params, t1.constant(z), 70, t1.constant(c), true);
    const auto off = f.net.predict_noise(t2, f.params, t2.constant(z), 70, t2.constant(c), false);
    CHECK(on.eps.value().storage() == off.eps.value().storage());
    CHECK(off.attention.size() == 0);
  }

  TEST_CASE("timestep changes the prediction") {
    Fixture f;
    testing::jitter_parameters(f.params, 12);
    const Tensor z = testing::random_tensor({3, 32, 32}, 13);
    const Tensor c = testing::random_tensor({16, 64}, 14);
    Tape t1, t2;
    const auto a = f.net.predict_noise(t1, f.params, t1.constant(z), 5, t1.constant(c));
    const auto b = f.net.predict_noise(t2, f.params, t2.constant(z), 95, t2.constant(c));
    CHECK(max_abs_diff(a.eps.value(), b.eps.value()) > 1e-6);
  }

  TEST_CASE("parameter gradients of the squared prediction") {
    const DenoiserConfig cfg = DenoiserConfig::gradient_check_profile();
    Fixture f(cfg);
    CHECK(f.params.total_elements() <= 5000);
    testing::jitter_parameters(f.params, 15);
    const Tensor z = testing::random_tensor({3, 8, 8}, 16);
    const Tensor c = testing::random_tensor({5, cfg.cond_width}, 17);
    const auto errors = testing::parameter_gradient_errors(f.params, [&](Tape& tape) {
      const auto p = f.net.predict_noise(tape, f.params, tape.constant(z), 30, tape.constant(c));
      return sum(square(p.eps));
    });
    for (const auto& g : errors) {
      INFO(g.name);
      CHECK(g.relative < 1e-4);
    }
  }

  TEST_CASE("large inputs stay finite") {
    Fixture f;
    testing::jitter_parameters(f.params, 18, 0.05);
    Tape tape;
    const auto p = f.net.predict_noise(tape, f.params, tape.constant(testing::random_tensor({3, 32, 32}, 19, 1e3)), 1,
                                       tape.constant(testing::random_tensor({16, 64}, 20)));
    CHECK(p.eps.value().all_finite());
  }

  TEST_CASE("input validation") {
    Fixture f;
    Tape tape;
    const Var c = tape.constant(Tensor({4, 64}));
    CHECK_THROWS_AS(f.net.predict_noise(tape, f.params, tape.constant(Tensor({3, 16, 16})), 5, c), ValidationError);
    CHECK_THROWS_AS(f.net.predict_noise(tape, f.params, tape.constant(Tensor({3, 32, 32})), 0, c), ValidationError);
    CHECK_THROWS_AS(f.net.predict_noise(tape, f.params, tape.constant(Tensor({3, 32, 32})), 101, c), ValidationError);
    CHECK_THROWS_AS(f.net.predict_noise(tape, f.params, tape.constant(Tensor({3, 32, 32})), 5, tape.constant(Tensor({4, 8}))),
                    ValidationError);
    Tensor bad({3, 32, 32});
    bad[0] = std::nan("");
    CHECK_THROWS_AS(f.net.predict_noise(tape, f.params, tape.constant(bad), 5, c), ValidationError);
  }

  TEST_CASE("timestep embedding is bounded and distinct") {
    const Tensor a = timestep_embedding(1, 16);
    const Tensor b = timestep_embedding(2, 16);
    CHECK(a.size() == 16);
    for (double v : a.values()) CHECK(std::abs(v) <= 1.0);
    CHECK(max_abs_diff(a, b) > 0.0);
  }
}
