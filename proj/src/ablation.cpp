#include "attnreg/ablation.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "attnreg/errors.hpp"
#include "attnreg/io.hpp"
#include "attnreg/rng.hpp"

namespace attnreg {

namespace {

const std::vector<std::string> kWinMetrics{"edit_success", "ssim_out", "change_ratio", "concentration"};

double metric(const EditReport& r, const std::string& name) {
  if (name == "edit_success") return r.edit_success ? 1.0 : 0.0;
  if (name == "ssim_out") return r.ssim_out_of_roi;
  if (name == "change_ratio") return r.change_ratio;
  return r.mean_concentration.value_or(0.0);
}

}  // namespace

std::vector<std::string> variant_names() { return {"full", "no-anat", "no-path", "no-latent", "none"}; }
std::vector<std::string> default_variant_names() { return {"full", "no-anat", "no-path", "no-latent"}; }

AblationVariant make_variant(const std::string& name, const RegulationConfig& base) {
  AblationVariant v{name, base};
  auto& c = v.config;
  if (name == "full") {
    c.enable_anat_gate = c.enable_path_reweight = c.enable_latent_correct = true;
  } else if (name == "no-anat") {
    c.enable_anat_gate = false;
  } else if (name == "no-path") {
    c.enable_path_reweight = false;
  } else if (name == "no-latent") {
    c.enable_latent_correct = false;
  } else if (name == "none") {
    c.enable_anat_gate = c.enable_path_reweight = c.enable_latent_correct = false;
  } else {
    throw ValidationError("unknown ablation variant '" + name + "'");
  }
  return v;
}

std::vector<EditCase> lesion_edit_cases(const Manifest& manifest, const std::vector<std::uint64_t>& seeds,
                                        std::size_t max_entries) {
  if (seeds.empty()) throw ValidationError("no edit seeds given");
  const std::size_t n = max_entries == 0 ? manifest.entries.size() : std::min(max_entries, manifest.entries.size());
  if (n == 0) throw ValidationError("manifest has no entries");
  std::vector<EditCase> cases;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = manifest.entries[i];
    const Tensor image = read_pgm(manifest.root / e.image);
    const OrganMaskSet masks = load_masks(manifest, e);
    const Prompt prompt = Prompt::make(Pathology::lesion, e.lesion.laterality, e.lesion.region);
    for (auto seed : seeds)
      cases.push_back({e.id + "/s" + std::to_string(seed), image, masks, prompt, mix_seed(seed, e.seed),
                       EditKind::add_lesion});
  }
  return cases;
}

AblationReport ablation_run(const std::vector<EditCase>& cases, const DenoiserModel& model, const NoiseSchedule& sched,
                            const SamplerConfig& sampler, std::vector<AblationVariant> variants,
                            const EditThresholds& thresholds, std::size_t jobs) {
  if (cases.empty()) throw ValidationError("ablation needs at least one edit case");
  if (variants.empty()) throw ValidationError("ablation needs at least one variant");
  const auto full_it = std::find_if(variants.begin(), variants.end(), [](const auto& v) { return v.name == "full"; });
  if (full_it == variants.end()) variants.insert(variants.begin(), make_variant("full", variants.front().config));
  for (const auto& v : variants) v.config.validate();
  sampler.validate(sched);
  const std::size_t full = static_cast<std::size_t>(
      std::find_if(variants.begin(), variants.end(), [](const auto& v) { return v.name == "full"; }) -
      variants.begin());

  AblationReport report;
  report.reports.assign(variants.size(), std::vector<EditReport>(cases.size()));
  for (const auto& c : cases) report.case_ids.push_back(c.id);

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t ci; (ci = next++) < cases.size();) {
      try {
        const auto& c = cases[ci];
        const Tensor roi = select_roi(c.masks, c.prompt).mask;
        SamplerConfig sc = sampler;
        sc.seed = c.seed;
        for (std::size_t v = 0; v < variants.size(); ++v) {
          const auto res = sample_counterfactual(c.image, c.masks, c.prompt, model, sched, sc, variants[v].config);
          report.reports[v][ci] = evaluate_edit(c.image, res.image, roi, res.trace, thresholds, c.kind);
        }
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = cases.size();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(jobs, 1, cases.size());
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  const double n = static_cast<double>(cases.size());
  for (std::size_t v = 0; v < variants.size(); ++v) {
    VariantSummary s;
    s.variant = variants[v].name;
    s.n = cases.size();
    for (std::size_t c = 0; c < cases.size(); ++c) {
      const auto& r = report.reports[v][c];
      s.edit_success_rate += r.edit_success ? 1 : 0;
      s.mean_ssim_out += r.ssim_out_of_roi;
      s.mean_change_ratio += r.change_ratio;
      s.mean_concentration += r.mean_concentration.value_or(0.0);
    }
    s.edit_success_rate /= n;
    s.mean_ssim_out /= n;
    s.mean_change_ratio /= n;
    s.mean_concentration /= n;
    for (const auto& m : kWinMetrics) {
      if (v == full) {
        s.win_rate_vs_full[m] = 1.0;
        continue;
      }
      std::size_t wins = 0;
      for (std::size_t c = 0; c < cases.size(); ++c)
        wins += metric(report.reports[full][c], m) > metric(report.reports[v][c], m);
      s.win_rate_vs_full[m] = static_cast<double>(wins) / n;
    }
    report.summaries.push_back(std::move(s));
  }
  return report;
}

std::string ablation_json(const AblationReport& report) {
  auto rows = nlohmann::ordered_json::array();
  for (const auto& s : report.summaries) {
    nlohmann::ordered_json row;
    row["variant"] = s.variant;
    row["n"] = s.n;
    row["edit_success_rate"] = s.edit_success_rate;
    row["mean_ssim_out"] = s.mean_ssim_out;
    row["mean_change_ratio"] = s.mean_change_ratio;
    row["win_rate_vs_full"] = s.win_rate_vs_full;
    rows.push_back(std::move(row));
  }
  return rows.dump(2) + "\n";
}

std::string ablation_table(const AblationReport& report) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-10s %4s %8s %8s %8s %8s | %s\n", "variant", "n", "success", "ssim_out", "ratio",
                "conc", "full wins: success ssim_out ratio conc");
  out += line;
  for (const auto& s : report.summaries) {
    const auto& w = s.win_rate_vs_full;
    std::snprintf(line, sizeof line, "%-10s %4zu %8.3f %8.4f %8.3f %8.4f | %7.2f %8.2f %5.2f %4.2f\n",
                  s.variant.c_str(), s.n, s.edit_success_rate, s.mean_ssim_out, s.mean_change_ratio,
                  s.mean_concentration, w.at("edit_success"), w.at("ssim_out"), w.at("change_ratio"),
                  w.at("concentration"));
    out += line;
  }
  return out;
}

}  // namespace attnreg
