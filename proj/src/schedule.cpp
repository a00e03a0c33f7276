#include "attnreg/schedule.hpp"

#include <cmath>

#include "attnreg/errors.hpp"

namespace attnreg {

namespace {

void check_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype())
    throw DimensionError(std::string(what) + ": shape/dtype mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// out = ca·a + cb·b, evaluated in double per element.
Tensor combine(const Tensor& a, double ca, const Tensor& b, double cb, const char* what) {
  check_same(a, b, what);
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < o.size(); ++i)
      o[i] = static_cast<T>(ca * static_cast<double>(x[i]) + cb * static_cast<double>(y[i]));
  });
  require_finite(out, what);
  return out;
}

}  // namespace

double NoiseSchedule::alpha_bar(long step) const {
  if (step == kCleanStep) return 1.0;
  if (step < 0 || static_cast<std::size_t>(step) >= t_train)
    throw ValidationError("schedule index " + std::to_string(step) + " out of range");
  return alpha_bars[static_cast<std::size_t>(step)];
}

NoiseSchedule make_schedule(std::size_t t_train, double beta_start, double beta_end) {
  if (t_train == 0) throw ValidationError("t_train must be positive");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
    throw ValidationError("betas must satisfy 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.t_train = t_train;
  double running = 1.0;
  for (std::size_t i = 0; i < t_train; ++i) {
    const double frac = t_train == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(t_train - 1);
    const double beta = beta_start + (beta_end - beta_start) * frac;
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    running *= 1.0 - beta;
    s.alpha_bars.push_back(running);
  }
  return s;
}

Tensor forward_noise_at(const Tensor& z0, const Tensor& eps, double alpha_bar) {
  if (!(alpha_bar >= 0 && alpha_bar <= 1)) throw ValidationError("alpha_bar must lie in [0, 1]");
  return combine(z0, std::sqrt(alpha_bar), eps, std::sqrt(1.0 - alpha_bar), "forward_noise");
}

Tensor forward_noise(const Tensor& z0, std::size_t step, const Tensor& eps, const NoiseSchedule& sched) {
  return forward_noise_at(z0, eps, sched.alpha_bar(static_cast<long>(step)));
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double s) {
  return combine(eps_uncond, 1.0 - s, eps_cond, s, "cfg_combine");
}

Tensor predict_x0(const Tensor& z_t, const Tensor& eps, double alpha_bar) {
  if (!(alpha_bar > 0 && alpha_bar <= 1)) throw ValidationError("alpha_bar must lie in (0, 1]");
  const double r = std::sqrt(alpha_bar);
  return combine(z_t, 1.0 / r, eps, -std::sqrt(1.0 - alpha_bar) / r, "predict_x0");
}

Tensor ddim_step_at(const Tensor& z_t, const Tensor& eps, double alpha_bar_t, double alpha_bar_prev) {
  if (!(alpha_bar_prev >= alpha_bar_t)) throw ValidationError("ddim_step must move toward the clean end");
  const Tensor x0 = predict_x0(z_t, eps, alpha_bar_t);
  return combine(x0, std::sqrt(alpha_bar_prev), eps, std::sqrt(1.0 - alpha_bar_prev), "ddim_step");
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps, long t, long t_prev, const NoiseSchedule& sched) {
  if (!(t > t_prev && t_prev >= kCleanStep))
    throw ValidationError("ddim_step needs t > t_prev, got " + std::to_string(t) + " -> " + std::to_string(t_prev));
  return ddim_step_at(z_t, eps, sched.alpha_bar(t), sched.alpha_bar(t_prev));
}

std::vector<long> ddim_ladder(const NoiseSchedule& sched, std::size_t steps) {
  if (steps == 0 || steps > sched.t_train) throw ValidationError("steps must lie in [1, T_train]");
  const std::size_t stride = sched.t_train / steps;
  std::vector<long> ladder;
  for (std::size_t j = steps; j-- > 0;) ladder.push_back(static_cast<long>(j * stride));
  return ladder;
}

}  // namespace attnreg
