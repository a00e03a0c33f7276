#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnreg/denoiser.hpp"
#include "attnreg/metrics.hpp"
#include "attnreg/phantom.hpp"
#include "attnreg/regulation.hpp"
#include "attnreg/sampler.hpp"
#include "attnreg/train.hpp"

namespace attnreg {

struct DataConfig {
  std::size_t n = 200;
  std::uint64_t seed = 0;
  PhantomConfig phantom;
};

struct ScheduleConfig {
  std::size_t t_train = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;

  NoiseSchedule make() const { return make_schedule(t_train, beta_start, beta_end); }
};

struct EvalConfig {
  std::vector<std::string> variants = {"full", "no-anat", "no-path", "no-latent"};
  std::vector<std::uint64_t> seeds = {0};
  std::size_t max_phantoms = 0;  // 0 = every manifest entry
  EditThresholds thresholds;
  std::size_t jobs = 1;
};

// Everything a run depends on besides the input files. The codec is not part
// of the document; runs always use the identity codec.
struct RunConfig {
  DataConfig data;
  DenoiserConfig model;
  ScheduleConfig schedule;
  SamplerConfig sampler;
  RegulationConfig regulation;
  EvalConfig eval;
  TrainConfig train;

  // Field invariants of every section plus cross-section agreement
  // (schedule length, image side, regulated resolutions).
  void validate() const;
};

// Missing sections and keys keep their defaults; unknown ones are rejected.
// Throws ValidationError.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_json(const RunConfig& config);

}  // namespace attnreg
