#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "attnreg/denoiser.hpp"
#include "attnreg/phantom.hpp"
#include "attnreg/prompt.hpp"
#include "attnreg/regulation.hpp"
#include "attnreg/schedule.hpp"

namespace attnreg {

struct SamplerConfig {
  std::size_t steps = 50;
  double guidance = 7.5;
  std::uint64_t seed = 0;
  std::shared_ptr<const LatentCodec> codec = std::make_shared<LatentCodec>();

  void validate(const NoiseSchedule& sched) const;
};

struct StepTrace {
  std::size_t step_index = 0;
  long schedule_t = 0;
  bool in_window = false;
  std::optional<double> l_path;        // energy at z_t, window steps only
  std::optional<double> alpha;         // correction step size, when applied
  std::optional<double> l_path_after;  // energy after correction and regulation
  std::optional<double> concentration; // mean pathology-token concentration used by the step
};

// Attention maps of one step: `records` from the conditional branch,
// `uncond_records` from the null-prompt branch.
struct StepAttention {
  std::size_t step_index;
  long schedule_t;
  const std::vector<AttentionRecord>& records;
  const std::vector<AttentionRecord>& uncond_records;
};

struct SampleResult {
  Tensor image;   // decoded and clamped to [0,1]
  Tensor latent;  // final z_0 before decoding
  std::vector<StepTrace> trace;
};

using AttentionObserver = std::function<void(const StepAttention&)>;

struct EnergyGradient {
  double energy;
  Tensor grad;  // d energy / d z_t
};

// Pathology energy of one conditional forward pass at z_t under `hooks`, with
// its gradient with respect to z_t. This is what the latent correction uses.
EnergyGradient pathology_energy_gradient(const DenoiserModel& model, const Tensor& z_t, std::size_t t,
                                         const ConditionEmbedding& cond, AttentionHooks& hooks,
                                         const RegulationContext& context);

// Regulated DDIM editing of `image` toward `prompt`.
SampleResult sample_counterfactual(const Tensor& image, const OrganMaskSet& masks, const Prompt& prompt,
                                   const DenoiserModel& model, const NoiseSchedule& sched,
                                   const SamplerConfig& sconfig, const RegulationConfig& rconfig,
                                   const AttentionObserver& observer = {});

// Same, with a prebuilt context (lets callers substitute masks or priors).
SampleResult sample_counterfactual(const Tensor& image, const RegulationContext& context, const Prompt& prompt,
                                   const DenoiserModel& model, const NoiseSchedule& sched,
                                   const SamplerConfig& sconfig, const RegulationConfig& rconfig,
                                   const AttentionObserver& observer = {});

// DDIM editing with no hooks at all.
SampleResult sample_plain(const Tensor& image, const Prompt& prompt, const DenoiserModel& model,
                          const NoiseSchedule& sched, const SamplerConfig& sconfig);

// One JSON object per step: step_index, schedule_t, in_window, L_path, alpha_t.
std::string trace_jsonl(const std::vector<StepTrace>& trace);

}  // namespace attnreg
