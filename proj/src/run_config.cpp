#include "attnreg/run_config.hpp"

#include <algorithm>
#include <functional>
#include <map>

#include <json.hpp>

#include "attnreg/ablation.hpp"
#include "attnreg/errors.hpp"
#include "attnreg/io.hpp"

namespace attnreg {

namespace {

using json = nlohmann::ordered_json;
using Setters = std::map<std::string, std::function<void(const json&)>>;

template <class T>
std::function<void(const json&)> into(T& field) {
  return [&field](const json& v) { field = v.get<T>(); };
}

void read_section(const json& j, const std::string& name, const Setters& setters) {
  if (!j.is_object()) throw ValidationError("config section '" + name + "' must be an object");
  for (const auto& [key, v] : j.items()) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ValidationError("unknown key '" + key + "' in config section '" + name + "'");
    try {
      it->second(v);
    } catch (const nlohmann::json::exception& ex) {
      throw ValidationError("bad value for '" + name + "." + key + "': " + ex.what());
    }
  }
}

Setters data_setters(DataConfig& d) {
  auto& p = d.phantom;
  return {{"n", into(d.n)},
          {"seed", into(d.seed)},
          {"side", into(p.side)},
          {"pooling_factors", into(p.pooling_factors)},
          {"lung_area_min", into(p.lung_area_min)},
          {"lung_area_max", into(p.lung_area_max)},
          {"lesion_radius_min", into(p.lesion_radius_min)},
          {"lesion_radius_max", into(p.lesion_radius_max)},
          {"lesion_amplitude_min", into(p.lesion_amplitude_min)},
          {"lesion_amplitude_max", into(p.lesion_amplitude_max)},
          {"rib_amplitude", into(p.rib_amplitude)}};
}

Setters schedule_setters(ScheduleConfig& s) {
  return {{"t_train", into(s.t_train)}, {"beta_start", into(s.beta_start)}, {"beta_end", into(s.beta_end)}};
}

Setters sampler_setters(SamplerConfig& s) {
  return {{"steps", into(s.steps)}, {"guidance", into(s.guidance)}, {"seed", into(s.seed)}};
}

Setters regulation_setters(RegulationConfig& r) {
  return {{"eta", into(r.eta)},
          {"mu", into(r.mu)},
          {"alpha_max", into(r.alpha_max)},
          {"q_levels", into(r.q_levels)},
          {"blur_sigma", into(r.blur_sigma)},
          {"enable_anat_gate", into(r.enable_anat_gate)},
          {"enable_path_reweight", into(r.enable_path_reweight)},
          {"enable_latent_correct", into(r.enable_latent_correct)},
          {"gate_orientation", [&r](const json& v) { r.gate_orientation = parse_gate_orientation(v.get<std::string>()); }},
          {"window_mode", [&r](const json& v) { r.window_mode = parse_window_mode(v.get<std::string>()); }},
          {"anat_dilation", into(r.anat_dilation)},
          {"gate_anatomy_tokens", into(r.gate_anatomy_tokens)}};
}

Setters eval_setters(EvalConfig& e) {
  return {{"variants", into(e.variants)},
          {"seeds", into(e.seeds)},
          {"max_phantoms", into(e.max_phantoms)},
          {"tau_in", into(e.thresholds.tau_in)},
          {"tau_out", into(e.thresholds.tau_out)},
          {"jobs", into(e.jobs)}};
}

Setters train_setters(TrainConfig& t) {
  return {{"epochs", into(t.epochs)},         {"lr", into(t.lr)},
          {"batch_size", into(t.batch_size)}, {"seed", into(t.seed)},
          {"null_prompt_prob", into(t.null_prompt_prob)}, {"grad_clip", into(t.grad_clip)},
          {"beta1", into(t.beta1)},           {"beta2", into(t.beta2)}};
}

}  // namespace

void RunConfig::validate() const {
  data.phantom.validate();
  if (data.n == 0) throw ValidationError("data.n must be positive");
  model.validate();
  if (schedule.t_train != model.t_train)
    throw ValidationError("schedule.t_train (" + std::to_string(schedule.t_train) + ") differs from model.t_train (" +
                          std::to_string(model.t_train) + ")");
  const auto sched = schedule.make();
  sampler.validate(sched);
  regulation.validate();
  for (auto q : regulation.q_levels)
    if (std::find(model.q_levels.begin(), model.q_levels.end(), q) == model.q_levels.end())
      throw ValidationError("regulation resolution " + std::to_string(q) + " is not a model attention resolution");
  if (data.phantom.side != model.image_side)
    throw ValidationError("data.side (" + std::to_string(data.phantom.side) + ") differs from model.image_side (" +
                          std::to_string(model.image_side) + ")");
  if (eval.variants.empty()) throw ValidationError("eval.variants must not be empty");
  for (const auto& v : eval.variants) make_variant(v, regulation);
  if (eval.seeds.empty()) throw ValidationError("eval.seeds must not be empty");
  if (eval.jobs == 0) throw ValidationError("eval.jobs must be positive");
  if (!(eval.thresholds.tau_in >= 0 && eval.thresholds.tau_out >= 0))
    throw ValidationError("edit thresholds must be non-negative");
  train.validate();
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("run config is not valid JSON: ") + ex.what());
  }
  if (!j.is_object()) throw ValidationError("run config must be a JSON object");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "data") read_section(v, key, data_setters(c.data));
    else if (key == "model") c.model = parse_denoiser_config(v.dump());
    else if (key == "schedule") read_section(v, key, schedule_setters(c.schedule));
    else if (key == "sampler") read_section(v, key, sampler_setters(c.sampler));
    else if (key == "regulation") read_section(v, key, regulation_setters(c.regulation));
    else if (key == "eval") read_section(v, key, eval_setters(c.eval));
    else if (key == "train") read_section(v, key, train_setters(c.train));
    else throw ValidationError("unknown config section '" + key + "'");
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("config file " + path.string() + " does not exist");
  return parse_run_config(read_text(path));
}

std::string run_config_json(const RunConfig& c) {
  const auto& p = c.data.phantom;
  const auto& r = c.regulation;
  const auto& e = c.eval;
  const auto& t = c.train;
  json j;
  j["data"] = {{"n", c.data.n},
               {"seed", c.data.seed},
               {"side", p.side},
               {"pooling_factors", p.pooling_factors},
               {"lung_area_min", p.lung_area_min},
               {"lung_area_max", p.lung_area_max},
               {"lesion_radius_min", p.lesion_radius_min},
               {"lesion_radius_max", p.lesion_radius_max},
               {"lesion_amplitude_min", p.lesion_amplitude_min},
               {"lesion_amplitude_max", p.lesion_amplitude_max},
               {"rib_amplitude", p.rib_amplitude}};
  j["model"] = json::parse(config_json(c.model));
  j["schedule"] = {{"t_train", c.schedule.t_train},
                   {"beta_start", c.schedule.beta_start},
                   {"beta_end", c.schedule.beta_end}};
  j["sampler"] = {{"steps", c.sampler.steps}, {"guidance", c.sampler.guidance}, {"seed", c.sampler.seed}};
  j["regulation"] = {{"eta", r.eta},
                     {"mu", r.mu},
                     {"alpha_max", r.alpha_max},
                     {"q_levels", r.q_levels},
                     {"blur_sigma", r.blur_sigma},
                     {"enable_anat_gate", r.enable_anat_gate},
                     {"enable_path_reweight", r.enable_path_reweight},
                     {"enable_latent_correct", r.enable_latent_correct},
                     {"gate_orientation", to_string(r.gate_orientation)},
                     {"window_mode", to_string(r.window_mode)},
                     {"anat_dilation", r.anat_dilation},
                     {"gate_anatomy_tokens", r.gate_anatomy_tokens}};
  j["eval"] = {{"variants", e.variants},
               {"seeds", e.seeds},
               {"max_phantoms", e.max_phantoms},
               {"tau_in", e.thresholds.tau_in},
               {"tau_out", e.thresholds.tau_out},
               {"jobs", e.jobs}};
  j["train"] = {{"epochs", t.epochs},
                {"lr", t.lr},
                {"batch_size", t.batch_size},
                {"seed", t.seed},
                {"null_prompt_prob", t.null_prompt_prob},
                {"grad_clip", t.grad_clip},
                {"beta1", t.beta1},
                {"beta2", t.beta2}};
  return j.dump(2) + "\n";
}

}  // namespace attnreg
