#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "attnreg/metrics.hpp"
#include "attnreg/phantom.hpp"
#include "attnreg/prompt.hpp"
#include "attnreg/regulation.hpp"
#include "attnreg/sampler.hpp"

namespace attnreg {

struct AblationVariant {
  std::string name;
  RegulationConfig config;
};

// Names: full, no-anat, no-path, no-latent, none. Each switches mechanisms
// off relative to `base`, so its other settings (eta, mu, ...) carry over.
AblationVariant make_variant(const std::string& name, const RegulationConfig& base);
std::vector<std::string> variant_names();
// full, no-anat, no-path, no-latent.
std::vector<std::string> default_variant_names();

struct EditCase {
  std::string id;
  Tensor image;
  OrganMaskSet masks;
  Prompt prompt;
  std::uint64_t seed = 0;
  EditKind kind = EditKind::add_lesion;
};

// One add-lesion edit per (entry, seed): the clean image with the prompt taken
// from the entry's lesion cues. Entries are used in manifest order, the first
// `max_entries` of them (0 means all).
std::vector<EditCase> lesion_edit_cases(const Manifest& manifest, const std::vector<std::uint64_t>& seeds,
                                        std::size_t max_entries = 0);

struct VariantSummary {
  std::string variant;
  std::size_t n = 0;
  double edit_success_rate = 0;
  double mean_ssim_out = 0;
  double mean_change_ratio = 0;
  double mean_concentration = 0;
  // Fraction of cases where Full is strictly better than this variant, per
  // metric (edit_success, ssim_out, change_ratio, concentration). The Full
  // row is 1 by definition.
  std::map<std::string, double> win_rate_vs_full;
};

struct AblationReport {
  std::vector<std::string> case_ids;
  std::vector<VariantSummary> summaries;
  // reports[v][c]: variant v on case c.
  std::vector<std::vector<EditReport>> reports;
};

// Runs every variant on every case. A "full" variant is prepended when the
// list lacks one, since win rates are measured against it. Cases run on up to
// `jobs` threads; the result does not depend on `jobs`.
AblationReport ablation_run(const std::vector<EditCase>& cases, const DenoiserModel& model, const NoiseSchedule& sched,
                            const SamplerConfig& sampler, std::vector<AblationVariant> variants,
                            const EditThresholds& thresholds = {}, std::size_t jobs = 1);

// JSON array, one object per variant.
std::string ablation_json(const AblationReport& report);
std::string ablation_table(const AblationReport& report);

}  // namespace attnreg
