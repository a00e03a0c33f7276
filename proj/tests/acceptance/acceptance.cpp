// End-to-end acceptance run. Prints one PASS/FAIL line per criterion (detail
// lines are indented; criteria appear in dependency order, numbered) and
// exits non-zero if any criterion fails.
//
//   acceptance [WORK_DIR]
//
// WORK_DIR defaults to a fresh directory under the system temp path; it holds
// the generated datasets, the trained checkpoint and CLI outputs.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <unistd.h>

#include "attnreg/ablation.hpp"
#include "attnreg/cli.hpp"
#include "attnreg/io.hpp"
#include "attnreg/rng.hpp"
#include "attnreg/train.hpp"

using namespace attnreg;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void verdict(int id, const char* name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("[%s] %2d %s: %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
}

void note(const std::string& s) {
  std::printf("      %s\n", s.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor normal_tensor(std::uint64_t seed, Shape shape, DType dtype) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from_values(std::move(shape), v, dtype);
}

Tensor rect(std::size_t side, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  std::vector<double> v(side * side, 0.0);
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = c0; c < c1; ++c) v[r * side + c] = 1;
  return Tensor::from_values({side, side}, v, DType::f32);
}

Tensor with_offset(const Tensor& z, std::size_t i, double h) {
  auto v = z.to_doubles();
  v[i] += h;
  return Tensor::from_values(z.shape(), v, z.dtype());
}

// 1. Tape gradient of the pathology energy against central differences.
void gradient_fidelity() {
  const auto t0 = Clock::now();
  DenoiserConfig dc;
  dc.image_side = 16;
  dc.q_levels = {4};
  dc.model_width = dc.head_dim = dc.embed_dim = dc.time_embed_dim = 16;
  RegulationConfig rc;
  rc.q_levels = {4};
  // Hand-drawn 16×16 anatomy; the patient's left lung is on the image right.
  const OrganMaskSet masks{rect(16, 2, 13, 9, 14), rect(16, 2, 13, 2, 7), rect(16, 9, 14, 6, 11)};
  const Prompt prompt = Prompt::make(Pathology::lesion, Laterality::left, Region::upper);
  const double h = 1e-4;
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto model = DenoiserModel::init(dc, seed, DType::f64);
    const auto ctx = make_regulation_context(masks, prompt, rc, DType::f64);
    const auto cond = embed_condition(prompt, model);
    const Tensor z = normal_tensor(mix_seed(seed, 77), {16, 16}, DType::f64);
    const std::size_t t = 200 + 150 * seed;
    RegulationHooks hooks(ctx, rc, true, true);
    const auto eg = pathology_energy_gradient(model, z, t, cond, hooks, ctx);
    auto energy = [&](const Tensor& zz) {
      return pathology_energy(denoiser_forward(model, zz, t, cond, &hooks).records, ctx.prior, ctx.k_path).item();
    };
    const auto g = eg.grad.to_doubles();
    double max_err = 0, max_fd = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double fd = (energy(with_offset(z, i, h)) - energy(with_offset(z, i, -h))) / (2 * h);
      max_err = std::max(max_err, std::abs(fd - g[i]));
      max_fd = std::max(max_fd, std::abs(fd));
    }
    const double rel = max_err / std::max(max_fd, 1e-300);
    note(fmt("seed %llu t=%zu L_path=%.4f max|grad|=%.3e rel err=%.2e", static_cast<unsigned long long>(seed), t,
             eg.energy, max_fd, rel));
    worst = std::max(worst, rel);
  }
  const double secs = seconds_since(t0);
  verdict(1, "gradient fidelity", worst <= 1e-3 && secs < 120,
          fmt("worst max-norm relative error %.2e (<= 1e-3) over 5 seeds, %.1f s (< 120 s)", worst, secs));
}

struct Setup {
  fs::path work;
  Manifest train_set, edit_set;
  NoiseSchedule sched = make_schedule();
  DenoiserModel model;
  fs::path model_dir;
};

// 9. Two identical training runs on 200 phantoms; the first becomes the model
// for the remaining criteria.
void training_sanity(Setup& s) {
  const auto items = training_items(s.train_set);
  TrainConfig tc;  // 20 epochs
  DenoiserConfig dc;
  const auto t0 = Clock::now();
  auto a = train_denoiser(items, dc, s.sched, tc);
  const double secs = seconds_since(t0);
  auto b = train_denoiser(items, dc, s.sched, tc);
  bool same = a.model.params.size() == b.model.params.size();
  for (const auto& [name, p] : a.model.params) same = same && p.bit_equal(b.model.params.at(name));
  same = same && a.batch_losses == b.batch_losses;
  const auto sm = smooth(a.batch_losses, 10);
  const double start = sm.at(9), end = sm.back();
  s.model = a.model;
  s.model_dir = s.work / "model";
  s.model.save(s.model_dir);
  verdict(9, "training sanity", secs < 1800 && end < start && same,
          fmt("%zu items x %zu epochs in %.0f s (< 1800 s); smoothed loss %.4f -> %.4f; rerun %s", items.size(),
              tc.epochs, secs, start, end, same ? "bit-identical" : "DIFFERS"));
}

// Edit inputs for manifest entry i: clean image, masks, lesion prompt.
struct EditInput {
  Tensor image;
  OrganMaskSet masks;
  Prompt prompt;
  std::uint64_t seed;
};

EditInput edit_input(const Manifest& m, std::size_t i) {
  const auto& e = m.entries.at(i);
  return {read_pgm(m.root / e.image), load_masks(m, e),
          Prompt::make(Pathology::lesion, e.lesion.laterality, e.lesion.region), e.seed};
}

// 2. Row sums of every map the sampler emits during a regulated run.
void stochasticity(const Setup& s) {
  const auto in = edit_input(s.edit_set, 0);
  SamplerConfig sc;
  sc.seed = 11;
  RegulationConfig rc;
  double worst = 0;
  std::size_t rows = 0, maps = 0;
  auto scan = [&](const std::vector<AttentionRecord>& records) {
    for (const auto& r : records)
      for (const Tensor* m : {&r.raw, &r.map}) {
        ++maps;
        const auto v = m->to_doubles();
        const std::size_t n = m->dim(0), k = m->dim(1);
        for (std::size_t i = 0; i < n; ++i) {
          double sum = 0;
          for (std::size_t j = 0; j < k; ++j) sum += v[i * k + j];
          worst = std::max(worst, std::abs(sum - 1.0));
          ++rows;
        }
      }
  };
  const auto t0 = Clock::now();
  sample_counterfactual(in.image, in.masks, in.prompt, s.model, s.sched, sc, rc, [&](const StepAttention& a) {
    scan(a.records);
    scan(a.uncond_records);
  });
  const double secs = seconds_since(t0);
  verdict(2, "attention stochasticity", worst <= 1e-5 && secs < 60,
          fmt("%zu maps, %zu rows over 50 steps; max |row sum - 1| = %.2e (<= 1e-5); %.1f s (< 60 s)", maps, rows,
              worst, secs));
}

// 3. Neutral settings reproduce the unregulated sampler bit for bit.
void trivial_guards(const Setup& s) {
  const auto in = edit_input(s.edit_set, 1);
  SamplerConfig sc;
  sc.seed = 5;
  const RegulationConfig base;
  const auto plain = sample_plain(in.image, in.prompt, s.model, s.sched, sc);
  const auto ctx = make_regulation_context(in.masks, in.prompt, base);
  auto same = [&](const SampleResult& r) { return r.image.bit_equal(plain.image) && r.latent.bit_equal(plain.latent); };

  RegulationConfig eta0 = base;  // reweighting with eta = 0
  eta0.eta = 0;
  eta0.enable_anat_gate = eta0.enable_latent_correct = false;
  const bool a = same(sample_counterfactual(in.image, ctx, in.prompt, s.model, s.sched, sc, eta0));

  auto ones = ctx;  // gating with an all-ones anatomy mask
  for (auto& [q, m] : ones.anatomy) m = Tensor::full(m.shape(), 1.0);
  RegulationConfig gate = base;
  gate.enable_path_reweight = gate.enable_latent_correct = false;
  const bool b = same(sample_counterfactual(in.image, ones, in.prompt, s.model, s.sched, sc, gate));

  auto zero = ctx;  // reweighting and correction with Ω ≡ 0
  for (auto& [q, o] : zero.prior.omega) o = Tensor::zeros(o.shape());
  RegulationConfig path = base;
  path.enable_anat_gate = false;
  const bool c = same(sample_counterfactual(in.image, zero, in.prompt, s.model, s.sched, sc, path));

  RegulationConfig off = base;  // all three switches off
  off.enable_anat_gate = off.enable_path_reweight = off.enable_latent_correct = false;
  const bool d = same(sample_counterfactual(in.image, in.masks, in.prompt, s.model, s.sched, sc, off));

  const bool differs = !same(sample_counterfactual(in.image, ctx, in.prompt, s.model, s.sched, sc, base));
  auto yn = [](bool v) { return v ? "identical" : "DIFFERS"; };
  verdict(3, "trivial-guard equivalences", a && b && c && d,
          fmt("eta=0 %s; all-ones anatomy %s; zero prior %s; all off %s (full regulation %s)", yn(a), yn(b), yn(c),
              yn(d), differs ? "differs, as expected" : "ALSO identical"));
}

// 4. Re-evaluated energy after each correction does not increase.
void descent(const Setup& s) {
  std::size_t steps = 0, ok = 0;
  double worst_rise = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto in = edit_input(s.edit_set, i);
    SamplerConfig sc;
    sc.seed = mix_seed(in.seed, 4);
    const auto r = sample_counterfactual(in.image, in.masks, in.prompt, s.model, s.sched, sc, RegulationConfig{});
    for (const auto& st : r.trace) {
      if (!st.alpha) continue;
      ++steps;
      const double rise = *st.l_path_after - *st.l_path;
      if (rise <= 0) ++ok;
      worst_rise = std::max(worst_rise, rise);
    }
  }
  const double frac = steps ? static_cast<double>(ok) / static_cast<double>(steps) : 0;
  verdict(4, "descent property", frac >= 0.9,
          fmt("L_path(corrected) <= L_path(z_t) at %zu/%zu window steps = %.1f%% (>= 90%%); largest rise %.2e", ok, steps,
              100 * frac, worst_rise));
}

// 5-7. One ablation run over 50 edits feeds all three directional criteria.
void ablation(const Setup& s) {
  const auto cases = lesion_edit_cases(s.edit_set, {0});
  RegulationConfig base;
  std::vector<AblationVariant> variants;
  for (const char* n : {"full", "no-anat", "no-path", "none"}) variants.push_back(make_variant(n, base));
  const auto t0 = Clock::now();
  const auto rep = ablation_run(cases, s.model, s.sched, SamplerConfig{}, variants);
  const double secs = seconds_since(t0);
  std::istringstream table(ablation_table(rep));
  for (std::string line; std::getline(table, line);) note(line);
  note(fmt("%zu edits x %zu variants in %.0f s", cases.size(), variants.size(), secs));

  auto index = [&](const std::string& name) {
    for (std::size_t v = 0; v < rep.summaries.size(); ++v)
      if (rep.summaries[v].variant == name) return v;
    throw std::runtime_error("missing variant " + name);
  };
  const auto& full = rep.reports[index("full")];
  auto wins = [&](const std::string& other, const std::function<double(const EditReport&)>& metric) {
    const auto& o = rep.reports[index(other)];
    std::size_t w = 0;
    for (std::size_t c = 0; c < full.size(); ++c) w += metric(full[c]) > metric(o[c]);
    return static_cast<double>(w) / static_cast<double>(full.size());
  };

  const double conc = wins("none", [](const EditReport& r) { return r.mean_concentration.value_or(0.0); });
  verdict(5, "concentration improvement", conc >= 0.8,
          fmt("full > no regulation on %.0f%% of %zu edits (>= 80%%); mean %.4f vs %.4f", 100 * conc, full.size(),
              rep.summaries[index("full")].mean_concentration, rep.summaries[index("none")].mean_concentration));

  const double ssim = wins("no-anat", [](const EditReport& r) { return r.ssim_out_of_roi; });
  verdict(6, "anatomy direction", ssim >= 0.7,
          fmt("out-of-ROI SSIM full > no-anat on %.0f%% of %zu edits (>= 70%%); mean %.4f vs %.4f", 100 * ssim,
              full.size(), rep.summaries[index("full")].mean_ssim_out, rep.summaries[index("no-anat")].mean_ssim_out));

  const double sf = rep.summaries[index("full")].edit_success_rate;
  const double sp = rep.summaries[index("no-path")].edit_success_rate;
  // edit_success needs both halves; report them separately so a failure is
  // attributable.
  auto in_rate = [&](const std::string& name) {
    std::size_t k = 0;
    for (const auto& r : rep.reports[index(name)]) k += r.in_roi_signed >= EditThresholds{}.tau_in;
    return static_cast<double>(k) / static_cast<double>(cases.size());
  };
  double min_out = 1e9;
  for (const auto& r : full) min_out = std::min(min_out, r.out_roi_change);
  verdict(7, "pathology direction", sf > sp,
          fmt("edit_success rate full %.2f vs no-path %.2f (must be strictly higher); in-ROI brightening test met "
              "%.2f vs %.2f; smallest out-of-ROI change %.3f (tau_out %.2f)",
              sf, sp, in_rate("full"), in_rate("no-path"), min_out, EditThresholds{}.tau_out));
}

// 8. DDIM with an oracle noise predictor.
void sampler_consistency(const Setup& s) {
  const auto in = edit_input(s.edit_set, 2);
  const Tensor z0 = in.image;
  const Tensor eps = normal_tensor(99, z0.shape(), DType::f32);
  const auto ladder = ddim_ladder(s.sched, 50);

  double one_step = 0;  // worst ratio of the inversion error to its f32 bound
  for (long t : ladder) {
    const double ab = s.sched.alpha_bar(t);
    const Tensor x0 = predict_x0(forward_noise(z0, static_cast<std::size_t>(t), eps, s.sched), eps, ab);
    double err = 0;
    for (std::size_t i = 0; i < z0.numel(); ++i) err = std::max(err, std::abs(x0.at(i) - z0.at(i)));
    one_step = std::max(one_step, err / (1e-5 / std::sqrt(ab)));
  }

  Tensor z = forward_noise(z0, static_cast<std::size_t>(ladder[0]), eps, s.sched);
  for (std::size_t j = 0; j < ladder.size(); ++j) {
    const long t = ladder[j];
    const long prev = j + 1 < ladder.size() ? ladder[j + 1] : kCleanStep;
    const double ab = s.sched.alpha_bar(t);
    auto zv = z.to_doubles(), xv = z0.to_doubles();
    for (std::size_t i = 0; i < zv.size(); ++i) zv[i] = (zv[i] - std::sqrt(ab) * xv[i]) / std::sqrt(1 - ab);
    z = ddim_step(z, Tensor::from_values(z.shape(), zv, z.dtype()), t, prev, s.sched);
  }
  double recon = 0;
  for (std::size_t i = 0; i < z0.numel(); ++i) recon = std::max(recon, std::abs(z.at(i) - z0.at(i)));
  verdict(8, "sampler consistency", recon <= 1e-3 && one_step <= 1.0,
          fmt("50-step oracle reconstruction max error %.2e (<= 1e-3); one-step inversion within %.2f of the "
              "1e-5/sqrt(abar) f32 bound",
              recon, one_step));
}

// 10. The CLI edit twice with the same inputs.
void end_to_end(const Setup& s) {
  const auto& m = s.edit_set;
  const auto& e = m.entries.at(3);
  auto args = [&](const std::string& out) {
    return std::vector<std::string>{
        "edit", "--image", (m.root / e.image).string(), "--masks",
        (m.root / e.mask_left).string() + "," + (m.root / e.mask_right).string() + "," + (m.root / e.mask_heart).string(),
        "--prompt", Prompt::make(Pathology::lesion, e.lesion.laterality, e.lesion.region).to_json(), "--model",
        s.model_dir.string(), "--seed", "21", "--out", (s.work / out).string()};
  };
  std::ostringstream out, err;
  const int c1 = cli_dispatch(args("edit_a"), out, err);
  const int c2 = cli_dispatch(args("edit_b"), out, err);
  bool same = c1 == 0 && c2 == 0;
  for (const char* f : {"edited.pgm", "trace.jsonl", "report.json"})
    same = same && read_text(s.work / "edit_a" / f) == read_text(s.work / "edit_b" / f);
  verdict(10, "end-to-end determinism", same,
          fmt("exit codes %d/%d; edited.pgm, trace.jsonl, report.json %s", c1, c2, same ? "byte-identical" : "DIFFER"));
  if (!err.str().empty()) note(err.str());
}

}  // namespace

int main(int argc, char** argv) {
  Setup s;
  s.work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / ("attnreg_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(s.work);
  fs::create_directories(s.work);
  const auto t0 = Clock::now();
  try {
    gradient_fidelity();
    s.train_set = build_dataset(200, 2024, s.work / "train");
    s.edit_set = build_dataset(50, 7, s.work / "edits");
    // Training comes first because every later criterion needs the model.
    training_sanity(s);
    stochasticity(s);
    trivial_guards(s);
    descent(s);
    ablation(s);
    sampler_consistency(s);
    end_to_end(s);
  } catch (const std::exception& ex) {
    std::printf("[FAIL] aborted: %s\n", ex.what());
    ++failures;
  }
  std::printf("%d criteria failed; total %.0f s; artifacts in %s\n", failures, seconds_since(t0), s.work.c_str());
  if (argc <= 1 && failures == 0) fs::remove_all(s.work);
  return failures == 0 ? 0 : 1;
}
