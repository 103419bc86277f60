#include "pdiff/schedule.hpp"

#include <string>

namespace pdiff {

NoiseSchedule build_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ValidationError("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ValidationError("schedule requires 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.alphas.resize(static_cast<std::size_t>(steps));
  s.alpha_bars.resize(static_cast<std::size_t>(steps));
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps > 1 ? static_cast<double>(i) / (steps - 1) : 0.0;
    const double beta = beta_start + (beta_end - beta_start) * frac;
    s.alphas[static_cast<std::size_t>(i)] = 1.0 - beta;
    prod *= 1.0 - beta;
    s.alpha_bars[static_cast<std::size_t>(i)] = prod;
  }
  return s;
}

void check_timestep(const NoiseSchedule& sched, int t) {
  if (t < 1 || t > sched.steps) {
    throw ValidationError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(sched.steps) + "]");
  }
}

double NoiseSchedule::alpha_bar(int t) const {
  check_timestep(*this, t);
  return alpha_bars[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::sigma(int t) const {
  const double ab = alpha_bar(t);
  return std::sqrt((1.0 - ab) / ab);
}

Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  require_same_shape(z0, eps, "forward_noise");
  const double ab = sched.alpha_bar(t);
  Tensor out(z0.shape());
  forward_noise_into<double>(z0.values(), eps.values(), ab, out.values());
  return out;
}

Tensor one_step_reverse(const Tensor& zt, const Tensor& eps_pred, int t, const NoiseSchedule& sched) {
  require_same_shape(zt, eps_pred, "one_step_reverse");
  const double ab = sched.alpha_bar(t);
  Tensor out(zt.shape());
  one_step_reverse_into<double>(zt.values(), eps_pred.values(), ab, out.values());
  return out;
}

Var one_step_reverse(Var zt, Var eps_pred, int t, const NoiseSchedule& sched) {
  require_same_shape(zt.value(), eps_pred.value(), "one_step_reverse");
  const double ab = sched.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  Tensor value = one_step_reverse(zt.value(), eps_pred.value(), t, sched);
  return zt.tape->record(std::move(value), {zt, eps_pred}, [zt, eps_pred, a, b](const Tensor& g, Tape& tape) {
    if (Tensor* gz = tape.grad_buffer(zt)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gz)[i] += g[i] / a;
    }
    if (Tensor* ge = tape.grad_buffer(eps_pred)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ge)[i] -= g[i] * b / a;
    }
  });
}

}  // namespace pdiff
