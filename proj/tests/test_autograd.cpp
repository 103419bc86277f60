#include <cmath>

#include "doctest.h"
#include "pdiff/autograd.hpp"
#include "support.hpp"

using namespace pdiff;
using testing::random_tensor;

namespace {

// Reduces op(inputs) against a fixed random projection and compares the
// input gradients with central differences.
double op_gradient_error(const std::vector<Tensor>& inputs, const std::function<Var(const std::vector<Var>&)>& op) {
  Tensor probe;
  auto forward = [&](const std::vector<Tensor>& xs, Tape& tape, std::vector<Var>& vars) {
    vars.clear();
    for (const auto& x : xs) vars.push_back(tape.input(x));
    const Var y = op(vars);
    if (probe.empty()) probe = random_tensor(y.value().shape(), 99);
    return dot(reshape(y, {static_cast<int>(y.value().size())}),
               tape.constant(probe.reshaped({static_cast<int>(probe.size())})));
  };
  Tape tape;
  std::vector<Var> vars;
  const Var loss = forward(inputs, tape, vars);
  tape.backward(loss);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic = tape.grad(vars[i]);
    const Tensor numeric = testing::numeric_input_gradient(inputs[i], [&](const Tensor& xi) {
      std::vector<Tensor> xs = inputs;
      xs[i] = xi;
      Tape t2;
      std::vector<Var> v2;
      return forward(xs, t2, v2).value().item();
    });
    worst = std::max(worst, testing::relative_error(analytic, numeric));
  }
  return worst;
}

}  // namespace

TEST_SUITE("autograd") {
  TEST_CASE("elementwise ops match finite differences") {
    const Tensor a = random_tensor({2, 3}, 1);
    Tensor b = random_tensor({2, 3}, 2);
    for (double& v : b.values()) v = 1.5 + std::abs(v);
    CHECK(op_gradient_error({a, b}, [](auto& v) { return add(v[0], v[1]); }) < 1e-8);
    CHECK(op_gradient_error({a, b}, [](auto& v) { return sub(v[0], v[1]); }) < 1e-8);
    CHECK(op_gradient_error({a, b}, [](auto& v) { return mul(v[0], v[1]); }) < 1e-8);
    CHECK(op_gradient_error({a, b}, [](auto& v) { return div(v[0], v[1]); }) < 1e-8);
    CHECK(op_gradient_error({a}, [](auto& v) { return scale(v[0], -2.5); }) < 1e-8);
    CHECK(op_gradient_error({a}, [](auto& v) { return square(v[0]); }) < 1e-8);
    CHECK(op_gradient_error({b}, [](auto& v) { return sqrt(v[0]); }) < 1e-8);
    CHECK(op_gradient_error({a}, [](auto& v) { return sigmoid(v[0]); }) < 1e-8);
    CHECK(op_gradient_error({a}, [](auto& v) { return silu(v[0]); }) < 1e-8);
    CHECK(op_gradient_error({a}, [](auto& v) { return relu(v[0]); }) < 1e-8);
    CHECK(op_gradient_error({a, b}, [&](auto& v) { return mul_const(v[0], b); }) < 1e-8);
  }

  TEST_CASE("reductions and shape ops match finite differences") {
    const Tensor a = random_tensor({3, 4}, 3);
    const Tensor s = Tensor({}, std::vector<double>{1.7});
    CHECK(op_gradient_error({a}, [](auto& v) { return sum(v[0]); }) < 1e-8);
    CHECK(op_gradient_error({a}, [](auto& v) { return mean(v[0]); }) < 1e-8);
    CHECK(op_gradient_error({a, s}, [](auto& v) { return div_by(v[0], v[1]); }) < 1e-8);
    CHECK(op_gradient_error({a}, [](auto& v) { return transpose(v[0]); }) < 1e-8);
    CHECK(op_gradient_error({a}, [](auto& v) { return select_row(v[0], 2); }) < 1e-8);
    const Tensor r = random_tensor({4}, 4);
    CHECK(op_gradient_error({a, r}, [](auto& v) { return replace_row(v[0], 1, v[1]); }) < 1e-8);
    CHECK(op_gradient_error({r}, [](auto& v) { return repeat_rows(v[0], 3); }) < 1e-8);
    CHECK(op_gradient_error({r, r}, [](auto& v) { return concat(v[0], v[1]); }) < 1e-8);
    CHECK(op_gradient_error({r, r}, [](auto& v) { return dot(v[0], v[1]); }) < 1e-8);
  }

  TEST_CASE("matmul and linear match finite differences") {
    const Tensor x = random_tensor({3, 4}, 5);
    const Tensor w = random_tensor({4, 2}, 6);
    const Tensor b = random_tensor({2}, 7);
    CHECK(op_gradient_error({x, w}, [](auto& v) { return matmul(v[0], v[1]); }) < 1e-8);
    CHECK(op_gradient_error({x, w, b}, [](auto& v) { return linear(v[0], v[1], v[2]); }) < 1e-8);
  }

  TEST_CASE("spatial ops match finite differences") {
    const Tensor x = random_tensor({2, 4, 4}, 8);
    const Tensor w = random_tensor({3, 2, 3, 3}, 9);
    const Tensor b = random_tensor({3}, 10);
    CHECK(op_gradient_error({x, w, b}, [](auto& v) { return conv2d(v[0], v[1], v[2]); }) < 1e-8);
    CHECK(op_gradient_error({x, random_tensor({2}, 11)}, [](auto& v) { return add_channel_bias(v[0], v[1]); }) < 1e-8);
    CHECK(op_gradient_error({x}, [](auto& v) { return avg_pool2(v[0]); }) < 1e-8);
    CHECK(op_gradient_error({x}, [](auto& v) { return upsample2(v[0]); }) < 1e-8);
    CHECK(op_gradient_error({x, x}, [](auto& v) { return concat_channels(v[0], v[1]); }) < 1e-8);
    CHECK(op_gradient_error({x}, [](auto& v) { return crop(v[0], 1, 0, 3, 3); }) < 1e-8);
    CHECK(op_gradient_error({x}, [](auto& v) { return channel_mean(v[0]); }) < 1e-8);
    CHECK(op_gradient_error({x}, [](auto& v) { return sum_channels(v[0]); }) < 1e-8);
    CHECK(op_gradient_error({x}, [](auto& v) { return spatial_sum(v[0]); }) < 1e-8);
    CHECK(op_gradient_error({random_tensor({4, 4}, 12)}, [](auto& v) { return broadcast_channels(v[0], 3); }) < 1e-8);
    CHECK(op_gradient_error({x}, [](auto& v) { return from_tokens(to_tokens(v[0]), 4, 4); }) < 1e-8);
  }

  TEST_CASE("attention ops match finite differences") {
    const Tensor q = random_tensor({6, 4}, 13);
    const Tensor k = random_tensor({3, 4}, 14);
    const Tensor v = random_tensor({3, 4}, 15);
    for (int heads : {1, 2}) {
      CHECK(op_gradient_error({q, k}, [heads](auto& x) { return attention_probs(x[0], x[1], heads); }) < 1e-7);
      CHECK(op_gradient_error({q, k, v}, [heads](auto& x) {
              return attention_apply(attention_probs(x[0], x[1], heads), x[2]);
            }) < 1e-7);
      CHECK(op_gradient_error({q, k}, [heads](auto& x) {
              return attention_map(attention_probs(x[0], x[1], heads), 2, 3);
            }) < 1e-7);
    }
  }

  TEST_CASE("parameter gradients land in the aligned buffer") {
    ParameterSet params;
    const auto i = params.add("w", Tensor({2}, std::vector<double>{1.0, -2.0}));
    Gradients g(params);
    Tape tape;
    const Var w = tape.parameter(params, i);
    tape.backward(sum(square(w)), &g);
    CHECK(g[i][0] == doctest::Approx(2.0));
    CHECK(g[i][1] == doctest::Approx(-4.0));
    CHECK(g.global_norm() == doctest::Approx(std::sqrt(20.0)));
  }

  TEST_CASE("constants receive no gradient and backward needs a scalar") {
    Tape tape;
    const Var c = tape.constant(Tensor({2}, 1.0));
    const Var x = tape.input(Tensor({2}, 3.0));
    tape.backward(sum(mul(c, x)));
    CHECK(tape.grad(c)[0] == 0.0);
    CHECK(tape.grad(x)[0] == 1.0);
    CHECK_THROWS_AS(tape.backward(x), ValidationError);
  }

  TEST_CASE("shape mismatches are rejected") {
    Tape tape;
    const Var a = tape.input(Tensor({2, 3}));
    const Var b = tape.input(Tensor({3, 2}));
    CHECK_THROWS_AS(add(a, b), ValidationError);
    CHECK_THROWS_AS(matmul(a, a), ValidationError);
  }
}
