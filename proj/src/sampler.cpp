#include "attnreg/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "attnreg/autodiff.hpp"
#include "attnreg/errors.hpp"
#include "attnreg/rng.hpp"

namespace attnreg {

namespace {

Tensor initial_noise(std::uint64_t seed, const Shape& shape, DType dtype) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from_values(shape, v, dtype);
}

Tensor clamp01(const Tensor& x) {
  auto v = x.to_doubles();
  for (auto& e : v) e = std::clamp(e, 0.0, 1.0);
  return Tensor::from_values(x.shape(), v, DType::f32);
}

// Shared loop; `ctx` null means no hooks and no diagnostics.
SampleResult run(const Tensor& image, const RegulationContext* ctx, const Prompt& prompt,
                 const DenoiserModel& model, const NoiseSchedule& sched, const SamplerConfig& sc,
                 const RegulationConfig* rc, const AttentionObserver& observer) {
  sc.validate(sched);
  if (sched.t_train != model.config.t_train) throw ValidationError("schedule length does not match the model");
  const auto side = model.config.image_side;
  if (image.shape() != Shape{side, side})
    throw ValidationError("image shape " + shape_str(image.shape()) + " does not match the model side " +
                          std::to_string(side));
  if (rc) {
    rc->validate();
    for (auto q : rc->q_levels)
      if (std::find(model.config.q_levels.begin(), model.config.q_levels.end(), q) == model.config.q_levels.end())
        throw ValidationError("regulation resolution " + std::to_string(q) + " is not a model attention level");
  }
  const DType dtype = model.dtype();
  const Tensor z_orig = sc.codec->encode(image).cast(dtype);
  const auto ladder = ddim_ladder(sched, sc.steps);
  const auto cond = embed_condition(prompt, model);
  const auto uncond = embed_condition(Prompt::null_prompt(model.config.max_tokens), model);
  const std::size_t steps = ladder.size();
  const std::size_t window_len = rc ? window_length(steps, rc->mu, rc->window_mode) : 0;

  Tensor z = forward_noise(z_orig, static_cast<std::size_t>(ladder[0]), initial_noise(sc.seed, z_orig.shape(), dtype),
                           sched);
  SampleResult result;
  for (std::size_t j = 0; j < steps; ++j) {
    const long t = ladder[j];
    const long t_prev = j + 1 < steps ? ladder[j + 1] : kCleanStep;
    const auto ts = static_cast<std::size_t>(t);
    StepTrace tr;
    tr.step_index = j;
    tr.schedule_t = t;
    tr.in_window = rc && in_window(j, steps, rc->mu, rc->window_mode);

    ForwardResult fc, fu;
    if (!ctx) {
      fc = denoiser_forward(model, z, ts, cond);
      fu = denoiser_forward(model, z, ts, uncond);
    } else {
      RegulationHooks cond_hooks(*ctx, *rc, true, tr.in_window);
      RegulationHooks uncond_hooks(*ctx, *rc, false, tr.in_window);
      if (tr.in_window && rc->enable_latent_correct) {
        const auto eg = pathology_energy_gradient(model, z, ts, cond, cond_hooks, *ctx);
        const double alpha = alpha_schedule(window_position(j, steps, rc->mu, rc->window_mode), window_len,
                                            rc->alpha_max);
        tr.l_path = eg.energy;
        tr.alpha = alpha;
        z = latent_correction(z, eg.grad, alpha);
      }
      fc = denoiser_forward(model, z, ts, cond, &cond_hooks);
      fu = denoiser_forward(model, z, ts, uncond, &uncond_hooks);
      if (tr.in_window) {
        const double conc = mean_concentration(fc.records, ctx->prior, ctx->k_path);
        tr.concentration = conc;
        tr.l_path_after = 1.0 - conc;
        if (!tr.l_path) tr.l_path = tr.l_path_after;
      }
    }
    if (observer) observer({j, t, fc.records, fu.records});
    const Tensor eps = cfg_combine(fu.eps, fc.eps, sc.guidance);
    try {
      z = ddim_step(z, eps, t, t_prev, sched);
    } catch (const NumericError& ex) {
      throw NumericError("latent became non-finite at step " + std::to_string(j) + " (t=" + std::to_string(t) +
                         "): " + ex.what());
    }
    result.trace.push_back(tr);
  }
  result.latent = z;
  result.image = clamp01(sc.codec->decode(z));
  return result;
}

}  // namespace

EnergyGradient pathology_energy_gradient(const DenoiserModel& model, const Tensor& z_t, std::size_t t,
                                         const ConditionEmbedding& cond, AttentionHooks& hooks,
                                         const RegulationContext& context) {
  Tape tape;
  const Tensor leaf = tape.watch(z_t);
  const auto taped = denoiser_forward(model, leaf, t, cond, &hooks);
  const Tensor energy = pathology_energy(taped.records, context.prior, context.k_path);
  const Tensor leaves[] = {leaf};
  return {energy.item(), tape.backward(energy, leaves)[0]};
}

void SamplerConfig::validate(const NoiseSchedule& sched) const {
  if (steps < 1 || steps > sched.t_train) throw ValidationError("steps must lie in [1, T_train]");
  if (!(guidance >= 0) || !std::isfinite(guidance)) throw ValidationError("guidance must be >= 0");
  if (!codec) throw ValidationError("sampler needs a latent codec");
}

SampleResult sample_counterfactual(const Tensor& image, const OrganMaskSet& masks, const Prompt& prompt,
                                   const DenoiserModel& model, const NoiseSchedule& sched,
                                   const SamplerConfig& sconfig, const RegulationConfig& rconfig,
                                   const AttentionObserver& observer) {
  if (masks.left_lung.shape() != image.shape() || masks.right_lung.shape() != image.shape() ||
      masks.heart.shape() != image.shape())
    throw ValidationError("mask resolution does not match the image");
  const auto ctx = make_regulation_context(masks, prompt, rconfig, model.dtype());
  return run(image, &ctx, prompt, model, sched, sconfig, &rconfig, observer);
}

SampleResult sample_counterfactual(const Tensor& image, const RegulationContext& context, const Prompt& prompt,
                                   const DenoiserModel& model, const NoiseSchedule& sched,
                                   const SamplerConfig& sconfig, const RegulationConfig& rconfig,
                                   const AttentionObserver& observer) {
  return run(image, &context, prompt, model, sched, sconfig, &rconfig, observer);
}

SampleResult sample_plain(const Tensor& image, const Prompt& prompt, const DenoiserModel& model,
                          const NoiseSchedule& sched, const SamplerConfig& sconfig) {
  return run(image, nullptr, prompt, model, sched, sconfig, nullptr, {});
}

std::string trace_jsonl(const std::vector<StepTrace>& trace) {
  std::string out;
  for (const auto& s : trace) {
    nlohmann::ordered_json j;
    j["step_index"] = s.step_index;
    j["schedule_t"] = s.schedule_t;
    j["in_window"] = s.in_window;
    j["L_path"] = s.l_path ? nlohmann::ordered_json(*s.l_path) : nlohmann::ordered_json(nullptr);
    j["alpha_t"] = s.alpha ? nlohmann::ordered_json(*s.alpha) : nlohmann::ordered_json(nullptr);
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace attnreg
