#pragma once

#include <cstddef>
#include <vector>

#include "attnreg/tensor.hpp"

namespace attnreg {

// Index -1 stands for the clean end of the chain (ᾱ = 1).
inline constexpr long kCleanStep = -1;

struct NoiseSchedule {
  std::size_t t_train = 0;
  std::vector<double> betas;  // betas[i] is β_{i+1}
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  // ᾱ at a schedule index, with kCleanStep mapping to 1.
  double alpha_bar(long step) const;
};

// Linear betas; ᾱ by running product.
NoiseSchedule make_schedule(std::size_t t_train = 1000, double beta_start = 1e-4, double beta_end = 2e-2);

// sqrt(ᾱ)·z0 + sqrt(1-ᾱ)·eps.
Tensor forward_noise(const Tensor& z0, std::size_t step, const Tensor& eps, const NoiseSchedule& sched);
Tensor forward_noise_at(const Tensor& z0, const Tensor& eps, double alpha_bar);

// eps_u + s·(eps_c - eps_u).
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double s);

// Clean-signal estimate implied by a noise prediction.
Tensor predict_x0(const Tensor& z_t, const Tensor& eps, double alpha_bar);

// Deterministic DDIM update from index t to t_prev (kCleanStep allowed).
Tensor ddim_step(const Tensor& z_t, const Tensor& eps, long t, long t_prev, const NoiseSchedule& sched);
Tensor ddim_step_at(const Tensor& z_t, const Tensor& eps, double alpha_bar_t, double alpha_bar_prev);

// `steps` uniformly spaced indices, noisiest first (980, 960, ..., 0 for 50 of 1000).
std::vector<long> ddim_ladder(const NoiseSchedule& sched, std::size_t steps);

}  // namespace attnreg
