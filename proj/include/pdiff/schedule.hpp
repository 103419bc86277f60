#pragma once

#include <cmath>
#include <concepts>
#include <span>
#include <vector>

#include "pdiff/autograd.hpp"
#include "pdiff/tensor.hpp"

namespace pdiff {

// Linear-beta noise schedule. Timesteps are 1-indexed at this interface
// (t = 1..T) and stored 0-indexed.
struct NoiseSchedule {
  int steps = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  double alpha_bar(int t) const;
  // sqrt((1 - abar) / abar): the noise level of z_t / sqrt(abar).
  double sigma(int t) const;
};

NoiseSchedule build_schedule(int steps, double beta_start, double beta_end);

void check_timestep(const NoiseSchedule& sched, int t);

// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps
Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);

// z0_hat = (z_t - sqrt(1 - abar_t) eps_pred) / sqrt(abar_t)
Tensor one_step_reverse(const Tensor& zt, const Tensor& eps_pred, int t, const NoiseSchedule& sched);
Var one_step_reverse(Var zt, Var eps_pred, int t, const NoiseSchedule& sched);

template <std::floating_point T>
void forward_noise_into(std::span<const T> z0, std::span<const T> eps, double alpha_bar, std::span<T> out) {
  const T a = static_cast<T>(std::sqrt(alpha_bar));
  const T b = static_cast<T>(std::sqrt(1.0 - alpha_bar));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
}

template <std::floating_point T>
void one_step_reverse_into(std::span<const T> zt, std::span<const T> eps, double alpha_bar, std::span<T> out) {
  const T a = static_cast<T>(std::sqrt(alpha_bar));
  const T b = static_cast<T>(std::sqrt(1.0 - alpha_bar));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (zt[i] - b * eps[i]) / a;
}

}  // namespace pdiff
