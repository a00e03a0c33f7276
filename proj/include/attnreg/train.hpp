#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "attnreg/denoiser.hpp"
#include "attnreg/phantom.hpp"
#include "attnreg/prompt.hpp"
#include "attnreg/schedule.hpp"

namespace attnreg {

struct TrainConfig {
  std::size_t epochs = 20;
  double lr = 2e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double null_prompt_prob = 0.1;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  double beta1 = 0.9;
  double beta2 = 0.999;

  void validate() const;
};

struct TrainItem {
  Tensor image;
  Prompt prompt;
};

// Clean image ↔ "clear", lesioned image ↔ "lesion <laterality> <region>".
std::vector<TrainItem> training_items(const Manifest& manifest, std::size_t max_tokens = kDefaultMaxTokens);

struct TrainResult {
  DenoiserModel model;
  std::vector<double> batch_losses;  // mean epsilon-MSE per optimizer step
};

struct TrainProgress {
  std::size_t epoch;
  std::size_t step;
  double loss;
};

// Epsilon-prediction training with Adam. Deterministic for a fixed seed.
TrainResult train_denoiser(const std::vector<TrainItem>& items, const DenoiserConfig& config,
                           const NoiseSchedule& sched, const TrainConfig& train,
                           const std::function<void(const TrainProgress&)>& progress = {});

// Mean epsilon-MSE of `model` over `samples` draws of (item, t, ε).
double evaluate_loss(const DenoiserModel& model, const std::vector<TrainItem>& items, const NoiseSchedule& sched,
                     std::size_t samples, std::uint64_t seed);

// Trailing moving average with the given window (shorter at the start).
std::vector<double> smooth(const std::vector<double>& values, std::size_t window);

}  // namespace attnreg
