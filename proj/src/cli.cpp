#include "attnreg/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "attnreg/ablation.hpp"
#include "attnreg/errors.hpp"
#include "attnreg/io.hpp"
#include "attnreg/run_config.hpp"

namespace attnreg {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) parts.push_back(item);
  return parts;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> seeds;
  for (const auto& part : split_commas(s)) {
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
      v = std::stoull(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != part.size() || part.front() == '-') throw ValidationError("bad seed '" + part + "'");
    seeds.push_back(v);
  }
  if (seeds.empty()) throw ValidationError("no seeds given");
  return seeds;
}

RunConfig config_from(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

void write_echo(const fs::path& dir, const RunConfig& cfg, const std::vector<std::string>& args) {
  write_text(dir / "run_config.json", run_config_json(cfg));
  write_text(dir / "command.json", json(args).dump(2) + "\n");
}

// Adopts the checkpoint's architecture so the echo describes what actually ran.
DenoiserModel load_model_into(RunConfig& cfg, const std::string& dir) {
  DenoiserModel model = DenoiserModel::load(dir);
  cfg.model = model.config;
  cfg.data.phantom.side = model.config.image_side;
  cfg.validate();
  return model;
}

OrganMaskSet read_mask_triple(const std::string& spec) {
  const auto parts = split_commas(spec);
  if (parts.size() != 3) throw ValidationError("--masks expects LEFT_LUNG,RIGHT_LUNG,HEART paths");
  for (const auto& p : parts)
    if (!fs::is_regular_file(p)) throw ValidationError("mask file " + p + " does not exist");
  return {read_pgm(parts[0]), read_pgm(parts[1]), read_pgm(parts[2])};
}

json report_json(const EditReport& r) {
  json j{{"ssim_global", r.ssim_global},
         {"ssim_out_of_roi", r.ssim_out_of_roi},
         {"in_roi_change", r.in_roi_change},
         {"out_roi_change", r.out_roi_change},
         {"change_ratio", r.change_ratio},
         {"in_roi_signed", r.in_roi_signed},
         {"edit_success", r.edit_success}};
  j["mean_l_path"] = r.mean_l_path ? json(*r.mean_l_path) : json(nullptr);
  j["mean_concentration"] = r.mean_concentration ? json(*r.mean_concentration) : json(nullptr);
  return j;
}

struct EditOptions {
  std::string image, masks, prompt, model, config, out, dump_attn;
  std::uint64_t seed = 0;
  double eta = 0, mu = 0, alpha_max = 0;
  bool no_anat = false, no_path = false, no_latent = false;
  CLI::Option *seed_opt = nullptr, *eta_opt = nullptr, *mu_opt = nullptr, *alpha_opt = nullptr;
};

void add_edit_options(CLI::App& sub, EditOptions& o, bool dump_only) {
  sub.add_option("--image", o.image, "input image (PGM)")->required()->check(CLI::ExistingFile);
  sub.add_option("--masks", o.masks, "LEFT_LUNG,RIGHT_LUNG,HEART mask PGMs")->required();
  sub.add_option("--prompt", o.prompt, R"(JSON, e.g. {"pathology":"lesion","laterality":"left","region":"upper"})")
      ->required();
  sub.add_option("--model", o.model, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  sub.add_option("--config", o.config, "run config JSON")->check(CLI::ExistingFile);
  o.seed_opt = sub.add_option("--seed", o.seed, "sampling seed");
  sub.add_option("--out", o.out, "output directory")->required();
  o.eta_opt = sub.add_option("--eta", o.eta, "cross-attention enhancement strength");
  o.mu_opt = sub.add_option("--mu", o.mu, "regulation window fraction");
  o.alpha_opt = sub.add_option("--alpha-max", o.alpha_max, "latent correction step ceiling");
  sub.add_flag("--no-anat-gate", o.no_anat, "disable anatomy self-attention gating");
  sub.add_flag("--no-path-reweight", o.no_path, "disable pathology cross-attention reweighting");
  sub.add_flag("--no-latent-correct", o.no_latent, "disable latent correction");
  if (!dump_only) sub.add_option("--dump-attn", o.dump_attn, "also write attention maps to this directory");
}

const char* kind_name(AttentionKind k) { return k == AttentionKind::self ? "self" : "cross"; }

// Writes the conditional branch's (post-hook) maps of every step as TNSR files
// plus an index.
class AttentionDumper {
 public:
  explicit AttentionDumper(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  void operator()(const StepAttention& s) {
    for (const auto& r : s.records) {
      char name[96];
      std::snprintf(name, sizeof name, "step%02zu_layer%zu_%s_q%zu.tnsr", s.step_index, r.layer_id, kind_name(r.kind),
                    r.q);
      write_tnsr(dir_ / name, r.map.detached());
      index_.push_back({{"file", name},
                        {"step_index", s.step_index},
                        {"schedule_t", s.schedule_t},
                        {"layer_id", r.layer_id},
                        {"kind", kind_name(r.kind)},
                        {"q", r.q}});
    }
  }

  void finish() const { write_text(dir_ / "index.json", index_.dump(2) + "\n"); }

 private:
  fs::path dir_;
  json index_ = json::array();
};

int run_edit(const EditOptions& o, bool dump_only, const std::vector<std::string>& args, std::ostream& out) {
  RunConfig cfg = config_from(o.config);
  if (o.seed_opt->count()) cfg.sampler.seed = o.seed;
  if (o.eta_opt->count()) cfg.regulation.eta = o.eta;
  if (o.mu_opt->count()) cfg.regulation.mu = o.mu;
  if (o.alpha_opt->count()) cfg.regulation.alpha_max = o.alpha_max;
  if (o.no_anat) cfg.regulation.enable_anat_gate = false;
  if (o.no_path) cfg.regulation.enable_path_reweight = false;
  if (o.no_latent) cfg.regulation.enable_latent_correct = false;
  const DenoiserModel model = load_model_into(cfg, o.model);

  const Tensor image = read_pgm(o.image);
  const OrganMaskSet masks = read_mask_triple(o.masks);
  const Prompt prompt = Prompt::from_json(o.prompt, model.config.max_tokens);
  const auto sched = cfg.schedule.make();

  const fs::path out_dir = o.out;
  const std::string dump_dir = dump_only ? (out_dir / "attention").string() : o.dump_attn;
  std::optional<AttentionDumper> dumper;
  if (!dump_dir.empty()) dumper.emplace(dump_dir);
  AttentionObserver observer;
  if (dumper) observer = [&](const StepAttention& s) { (*dumper)(s); };

  const auto res = sample_counterfactual(image, masks, prompt, model, sched, cfg.sampler, cfg.regulation, observer);
  if (dumper) dumper->finish();

  fs::create_directories(out_dir);
  write_pgm(out_dir / "edited.pgm", res.image);
  write_text(out_dir / "trace.jsonl", trace_jsonl(res.trace));
  write_echo(out_dir, cfg, args);
  write_text(out_dir / "prompt.json", prompt.to_json() + "\n");
  const EditKind kind = prompt.pathology == Pathology::clear ? EditKind::remove_lesion : EditKind::add_lesion;
  const auto rep =
      evaluate_edit(image, res.image, select_roi(masks, prompt).mask, res.trace, cfg.eval.thresholds, kind);
  write_text(out_dir / "report.json", report_json(rep).dump(2) + "\n");
  out << "wrote " << (out_dir / "edited.pgm").string() << "  ssim_out " << rep.ssim_out_of_roi << "  change_ratio "
      << rep.change_ratio << "\n";
  return 0;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention-regulated counterfactual editing of synthetic chest phantoms", "attnreg"};
  app.require_subcommand(1);

  // phantoms
  auto* ph = app.add_subcommand("phantoms", "generate a phantom dataset with masks and manifest");
  std::size_t ph_n = 0;
  std::uint64_t ph_seed = 0;
  std::string ph_out, ph_config;
  auto* ph_n_opt = ph->add_option("--n", ph_n, "number of phantoms");
  auto* ph_seed_opt = ph->add_option("--seed", ph_seed, "dataset seed");
  ph->add_option("--out", ph_out, "output directory")->required();
  ph->add_option("--config", ph_config, "run config JSON")->check(CLI::ExistingFile);

  // train
  auto* tr = app.add_subcommand("train", "train the denoiser on a phantom dataset");
  std::string tr_data, tr_config, tr_out;
  std::size_t tr_epochs = 0;
  std::uint64_t tr_seed = 0;
  tr->add_option("--data", tr_data, "dataset directory (manifest.json)")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--config", tr_config, "run config JSON")->check(CLI::ExistingFile);
  auto* tr_epochs_opt = tr->add_option("--epochs", tr_epochs, "training epochs");
  auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "training seed");
  tr->add_option("--out", tr_out, "checkpoint directory")->required();

  // edit / dump-attn
  auto* ed = app.add_subcommand("edit", "regulated counterfactual edit of one image");
  EditOptions ed_opts;
  add_edit_options(*ed, ed_opts, false);
  auto* da = app.add_subcommand("dump-attn", "run an edit and write every conditional attention map");
  EditOptions da_opts;
  add_edit_options(*da, da_opts, true);

  // eval
  auto* ev = app.add_subcommand("eval", "ablation study over a phantom dataset");
  std::string ev_data, ev_model, ev_config, ev_variants, ev_seeds, ev_out;
  std::size_t ev_jobs = 1, ev_max = 0;
  ev->add_option("--data", ev_data, "dataset directory (manifest.json)")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--model", ev_model, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--config", ev_config, "run config JSON")->check(CLI::ExistingFile);
  auto* ev_variants_opt = ev->add_option("--variants", ev_variants, "comma list of full,no-anat,no-path,no-latent,none");
  auto* ev_seeds_opt = ev->add_option("--seeds", ev_seeds, "comma list of sampling seeds");
  auto* ev_jobs_opt = ev->add_option("--jobs", ev_jobs, "worker threads");
  auto* ev_max_opt = ev->add_option("--max-phantoms", ev_max, "use only the first N phantoms");
  ev->add_option("--out", ev_out, "report directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return 0;
    const auto used = app.get_subcommands();
    err << (used.empty() ? app.help() : used.front()->help());
    return 2;
  }

  try {
    if (*ph) {
      RunConfig cfg = config_from(ph_config);
      if (ph_n_opt->count()) cfg.data.n = ph_n;
      if (ph_seed_opt->count()) cfg.data.seed = ph_seed;
      cfg.validate();
      const auto m = build_dataset(cfg.data.n, cfg.data.seed, ph_out, cfg.data.phantom);
      write_echo(ph_out, cfg, args);
      out << "wrote " << m.entries.size() << " phantom pairs to " << ph_out << "\n";
      return 0;
    }
    if (*tr) {
      RunConfig cfg = config_from(tr_config);
      if (tr_epochs_opt->count()) cfg.train.epochs = tr_epochs;
      if (tr_seed_opt->count()) cfg.train.seed = tr_seed;
      cfg.validate();
      const Manifest manifest = load_manifest(tr_data);
      const auto items = training_items(manifest, cfg.model.max_tokens);
      std::size_t epoch = 0, count = 0;
      double total = 0;
      auto report = [&] {
        if (count) out << "epoch " << epoch << " mean loss " << total / static_cast<double>(count) << std::endl;
      };
      auto result = train_denoiser(items, cfg.model, cfg.schedule.make(), cfg.train, [&](const TrainProgress& p) {
        if (p.epoch != epoch) {
          report();
          epoch = p.epoch;
          total = 0;
          count = 0;
        }
        total += p.loss;
        ++count;
      });
      report();
      result.model.save(tr_out);
      const auto s = smooth(result.batch_losses, 10);
      json losses{{"batch_losses", result.batch_losses},
                  {"smoothed_start", s.empty() ? 0.0 : s[std::min<std::size_t>(9, s.size() - 1)]},
                  {"smoothed_end", s.empty() ? 0.0 : s.back()}};
      write_text(fs::path(tr_out) / "losses.json", losses.dump(2) + "\n");
      write_echo(tr_out, cfg, args);
      out << "saved checkpoint to " << tr_out << "\n";
      return 0;
    }
    if (*ed) return run_edit(ed_opts, false, args, out);
    if (*da) return run_edit(da_opts, true, args, out);
    if (*ev) {
      RunConfig cfg = config_from(ev_config);
      if (ev_variants_opt->count()) cfg.eval.variants = split_commas(ev_variants);
      if (ev_seeds_opt->count()) cfg.eval.seeds = parse_seeds(ev_seeds);
      if (ev_jobs_opt->count()) cfg.eval.jobs = ev_jobs;
      if (ev_max_opt->count()) cfg.eval.max_phantoms = ev_max;
      const DenoiserModel model = load_model_into(cfg, ev_model);
      const Manifest manifest = load_manifest(ev_data);
      const auto cases = lesion_edit_cases(manifest, cfg.eval.seeds, cfg.eval.max_phantoms);
      std::vector<AblationVariant> variants;
      for (const auto& name : cfg.eval.variants) variants.push_back(make_variant(name, cfg.regulation));
      const auto rep = ablation_run(cases, model, cfg.schedule.make(), cfg.sampler, variants, cfg.eval.thresholds,
                                    cfg.eval.jobs);
      const fs::path dir = ev_out;
      write_text(dir / "report.json", ablation_json(rep));
      write_text(dir / "report.txt", ablation_table(rep));
      write_echo(dir, cfg, args);
      out << ablation_table(rep);
      return 0;
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace attnreg
