#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pdiff/autograd.hpp"
#include "pdiff/model.hpp"
#include "pdiff/rng.hpp"
#include "pdiff/toyfaces.hpp"

namespace testing {

using namespace pdiff;

struct GroupError {
  std::string name;
  double relative = 0.0;
  double analytic_norm = 0.0;
};

// Central differences over every element of every parameter. The loss
// closure records a fresh forward pass on the given tape.
inline std::vector<GroupError> parameter_gradient_errors(ParameterSet& params,
                                                         const std::function<Var(Tape&)>& loss, double h = 1e-5) {
  Gradients analytic(params);
  {
    Tape tape;
    const Var l = loss(tape);
    tape.backward(l, &analytic);
  }
  auto eval = [&] {
    Tape tape;
    return loss(tape).value().item();
  };
  std::vector<GroupError> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].value;
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double orig = p[k];
      p[k] = orig + h;
      const double fp = eval();
      p[k] = orig - h;
      const double fm = eval();
      p[k] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double a = analytic[i][k];
      diff2 += (a - fd) * (a - fd);
      a2 += a * a;
      n2 += fd * fd;
    }
    const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
    const double diff = std::sqrt(diff2);
    out.push_back({params[i].name, scale > 1e-7 ? diff / scale : diff, std::sqrt(a2)});
  }
  return out;
}

// Gradient with respect to a leaf input, by central differences.
inline Tensor numeric_input_gradient(const Tensor& x, const std::function<double(const Tensor&)>& f, double h = 1e-5) {
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t k = 0; k < x.size(); ++k) {
    probe[k] = x[k] + h;
    const double fp = f(probe);
    probe[k] = x[k] - h;
    const double fm = f(probe);
    probe[k] = x[k];
    g[k] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double relative_error(const Tensor& a, const Tensor& b) {
  double d = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double s = std::max(std::sqrt(na), std::sqrt(nb));
  return s > 1e-12 ? std::sqrt(d) / s : std::sqrt(d);
}

// Perturbs every parameter so no gradient path is trivially zero
// (the output convolution starts at zero).
inline void jitter_parameters(ParameterSet& params, std::uint64_t seed, double scale = 0.2) {
  Rng rng(seed);
  for (auto& e : params) {
    for (double& v : e.value.values()) v += scale * rng.normal();
  }
}

inline Tensor random_tensor(std::vector<int> shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor t = rng.normal_tensor(std::move(shape));
  for (double& v : t.values()) v *= scale;
  return t;
}

inline Tensor uniform_tensor(std::vector<int> shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace testing
