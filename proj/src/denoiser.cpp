#include "attnreg/denoiser.hpp"

#include <cmath>
#include <json.hpp>
#include <numbers>

#include "attnreg/errors.hpp"
#include "attnreg/io.hpp"
#include "attnreg/ops.hpp"
#include "attnreg/rng.hpp"

namespace attnreg {

namespace {

using nlohmann::json;

std::string level_name(const char* kind, std::size_t i) { return std::string(kind) + std::to_string(i); }

// Parameter name -> (shape, init std). Biases use std 0.
std::map<std::string, std::pair<Shape, double>> parameter_layout(const DenoiserConfig& c) {
  std::map<std::string, std::pair<Shape, double>> out;
  const auto C = c.model_width, d = c.head_dim, E = c.embed_dim, p2 = c.patch() * c.patch();
  auto w = [&](const std::string& name, std::size_t fan_in, std::size_t fan_out, double gain = 1.0) {
    out[name] = {{fan_in, fan_out}, gain / std::sqrt(static_cast<double>(fan_in))};
  };
  auto b = [&](const std::string& name, std::size_t n) { out[name] = {{n}, 0.0}; };

  out["embed.token"] = {{kVocabSize, E}, 1.0};
  out["embed.pos"] = {{c.max_tokens, E}, 0.1};
  w("time.w1", c.time_embed_dim, C);
  b("time.b1", C);
  w("time.w2", C, C);
  b("time.b2", C);
  w("in.w", p2, C);
  b("in.b", C);
  w("out.w", C, p2, 0.1);
  b("out.b", p2);
  // Time-dependent per-pixel gain on z_t added to the prediction. At high noise eps is
  // close to z_t itself, which the attention stack alone reproduces poorly.
  out["skip.gain.w"] = {{C, p2}, 0.0};
  b("skip.gain.b", p2);

  const auto n = c.q_levels.size();
  for (std::size_t i = 0; i < n; ++i) out["pos." + std::to_string(i)] = {{c.q_levels[i] * c.q_levels[i], C}, 0.1};
  for (std::size_t i = 0; i + 1 < n; ++i) {
    w("down." + std::to_string(i), C, C);
    w("up." + std::to_string(i), C, C);
    w("skip." + std::to_string(i), C, C);
  }
  auto block = [&](const std::string& blk) {
    for (std::size_t j = 0; j < c.n_self_layers; ++j) {
      const auto pre = blk + ".self" + std::to_string(j) + ".";
      w(pre + "wq", C, d);
      w(pre + "wk", C, d);
      w(pre + "wv", C, d);
      w(pre + "wo", d, C);
    }
    for (std::size_t j = 0; j < c.n_cross_layers; ++j) {
      const auto pre = blk + ".cross" + std::to_string(j) + ".";
      w(pre + "wq", C, d);
      w(pre + "wk", E, d);
      w(pre + "wv", E, d);
      w(pre + "wo", d, C);
    }
    const auto H = C * c.ff_mult;
    w(blk + ".ff.w1", C, H);
    b(blk + ".ff.b1", H);
    w(blk + ".ff.w2", H, C);
    b(blk + ".ff.b2", C);
  };
  for (std::size_t i = 0; i < n; ++i) block(level_name("d", i));
  for (std::size_t i = 0; i + 1 < n; ++i) block(level_name("u", i));
  return out;
}

Tensor time_features(std::size_t t, std::size_t dim, DType dtype) {
  const std::size_t half = dim / 2;
  std::vector<double> v(dim);
  for (std::size_t k = 0; k < half; ++k) {
    const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    v[k] = std::sin(static_cast<double>(t) * f);
    v[half + k] = std::cos(static_cast<double>(t) * f);
  }
  return Tensor::from_values({1, dim}, v, dtype);
}

class Forward {
 public:
  Forward(const DenoiserModel& m, const ConditionEmbedding& cond, AttentionHooks* hooks)
      : m_(m), c_(m.config), cond_(cond.matrix), hooks_(hooks) {}

  const Tensor& P(const std::string& name) const { return m_.param(name); }

  Tensor self_attention(const Tensor& h, const std::string& pre, std::size_t q) {
    const Tensor qm = matmul(h, P(pre + "wq"));
    const Tensor km = matmul(h, P(pre + "wk"));
    const Tensor vm = matmul(h, P(pre + "wv"));
    const Tensor raw = softmax_rows(matmul_nt(qm, km), 1.0 / std::sqrt(static_cast<double>(c_.head_dim)));
    const std::size_t id = next_layer_++;
    Tensor s = hooks_ ? hooks_->on_self(raw, id, q) : raw;
    records.push_back({id, AttentionKind::self, q, s, raw});
    return matmul(matmul(s, vm), P(pre + "wo"));
  }

  Tensor cross_attention(const Tensor& h, const std::string& pre, std::size_t q) {
    const Tensor qm = matmul(h, P(pre + "wq"));
    const Tensor km = matmul(cond_, P(pre + "wk"));
    const Tensor vm = matmul(cond_, P(pre + "wv"));
    const Tensor raw = softmax_rows(matmul_nt(qm, km), 1.0 / std::sqrt(static_cast<double>(c_.head_dim)));
    const std::size_t id = next_layer_++;
    Tensor a = hooks_ ? hooks_->on_cross(raw, id, q) : raw;
    records.push_back({id, AttentionKind::cross, q, a, raw});
    return matmul(matmul(a, vm), P(pre + "wo"));
  }

  Tensor block(Tensor x, const std::string& blk, std::size_t q) {
    for (std::size_t j = 0; j < c_.n_self_layers; ++j)
      x = add(x, self_attention(layer_norm_rows(x), blk + ".self" + std::to_string(j) + ".", q));
    for (std::size_t j = 0; j < c_.n_cross_layers; ++j)
      x = add(x, cross_attention(layer_norm_rows(x), blk + ".cross" + std::to_string(j) + ".", q));
    Tensor h = silu(add_row(matmul(layer_norm_rows(x), P(blk + ".ff.w1")), P(blk + ".ff.b1")));
    return add(x, add_row(matmul(h, P(blk + ".ff.w2")), P(blk + ".ff.b2")));
  }

  Tensor run(const Tensor& z, std::size_t t) {
    const auto& q = c_.q_levels;
    const std::size_t n = q.size();
    Tensor temb = matmul(time_features(t, c_.time_embed_dim, m_.dtype()), P("time.w1"));
    temb = silu(add_row(temb, P("time.b1")));
    temb = add_row(matmul(temb, P("time.w2")), P("time.b2"));

    Tensor x = add_row(matmul(patchify(z, c_.patch()), P("in.w")), P("in.b"));
    x = add_row(add(x, P("pos.0")), temb);
    std::vector<Tensor> skips;
    for (std::size_t i = 0; i < n; ++i) {
      x = block(x, level_name("d", i), q[i]);
      if (i + 1 == n) break;
      skips.push_back(x);
      x = matmul(pool_tokens(x, q[i], q[i] / q[i + 1]), P("down." + std::to_string(i)));
      x = add_row(add(x, P("pos." + std::to_string(i + 1))), temb);
    }
    for (std::size_t i = n - 1; i-- > 0;) {
      const Tensor up = matmul(upsample_tokens(x, q[i + 1], q[i] / q[i + 1]), P("up." + std::to_string(i)));
      x = add_row(add(up, matmul(skips[i], P("skip." + std::to_string(i)))), temb);
      x = block(x, level_name("u", i), q[i]);
    }
    const Tensor gain = add_row(matmul(temb, P("skip.gain.w")), P("skip.gain.b"));
    Tensor out = add_row(matmul(layer_norm_rows(x), P("out.w")), P("out.b"));
    out = add(out, mul_row(patchify(z, c_.patch()), gain));
    return unpatchify(out, c_.image_side, c_.image_side, c_.patch());
  }

  std::vector<AttentionRecord> records;

 private:
  const DenoiserModel& m_;
  const DenoiserConfig& c_;
  const Tensor& cond_;
  AttentionHooks* hooks_;
  std::size_t next_layer_ = 0;
};

json to_json(const DenoiserConfig& c) {
  return json{{"image_side", c.image_side},         {"q_levels", c.q_levels},
              {"model_width", c.model_width},       {"head_dim", c.head_dim},
              {"n_self_layers", c.n_self_layers},   {"n_cross_layers", c.n_cross_layers},
              {"embed_dim", c.embed_dim},           {"time_embed_dim", c.time_embed_dim},
              {"ff_mult", c.ff_mult},               {"max_tokens", c.max_tokens},
              {"t_train", c.t_train}};
}

}  // namespace

void DenoiserConfig::validate() const {
  if (image_side == 0) throw ValidationError("image_side must be positive");
  if (q_levels.empty()) throw ValidationError("q_levels must not be empty");
  for (std::size_t i = 0; i < q_levels.size(); ++i) {
    const auto q = q_levels[i];
    if (q == 0 || image_side % q != 0)
      throw ValidationError("q level " + std::to_string(q) + " does not divide image side " + std::to_string(image_side));
    if (i > 0 && (q >= q_levels[i - 1] || q_levels[i - 1] % q != 0))
      throw ValidationError("q_levels must decrease, each dividing the previous");
  }
  if (head_dim == 0) throw ValidationError("head_dim must be positive");
  if (model_width == 0 || embed_dim == 0 || ff_mult == 0) throw ValidationError("widths must be positive");
  if (time_embed_dim == 0 || time_embed_dim % 2 != 0) throw ValidationError("time_embed_dim must be positive and even");
  if (max_tokens == 0) throw ValidationError("max_tokens must be positive");
  if (t_train == 0) throw ValidationError("t_train must be positive");
}

std::string config_json(const DenoiserConfig& config) { return to_json(config).dump(2); }

DenoiserConfig parse_denoiser_config(const std::string& json_text) {
  DenoiserConfig c;
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& ex) {
    throw ValidationError(std::string("model config is not valid JSON: ") + ex.what());
  }
  if (!j.is_object()) throw ValidationError("model config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "image_side") c.image_side = v.get<std::size_t>();
      else if (key == "q_levels") c.q_levels = v.get<std::vector<std::size_t>>();
      else if (key == "model_width") c.model_width = v.get<std::size_t>();
      else if (key == "head_dim") c.head_dim = v.get<std::size_t>();
      else if (key == "n_self_layers") c.n_self_layers = v.get<std::size_t>();
      else if (key == "n_cross_layers") c.n_cross_layers = v.get<std::size_t>();
      else if (key == "embed_dim") c.embed_dim = v.get<std::size_t>();
      else if (key == "time_embed_dim") c.time_embed_dim = v.get<std::size_t>();
      else if (key == "ff_mult") c.ff_mult = v.get<std::size_t>();
      else if (key == "max_tokens") c.max_tokens = v.get<std::size_t>();
      else if (key == "t_train") c.t_train = v.get<std::size_t>();
      else throw ValidationError("unknown model config key '" + key + "'");
    }
  } catch (const json::exception& ex) {
    throw ValidationError(std::string("bad model config value: ") + ex.what());
  }
  c.validate();
  return c;
}

DenoiserModel DenoiserModel::init(const DenoiserConfig& config, std::uint64_t seed, DType dtype) {
  config.validate();
  DenoiserModel m;
  m.config = config;
  std::uint64_t index = 0;
  for (const auto& [name, spec] : parameter_layout(config)) {
    Rng rng(mix_seed(seed, index++));
    const auto& [shape, std_dev] = spec;
    std::vector<double> v(shape_numel(shape), 0.0);
    if (std_dev > 0)
      for (auto& x : v) x = std_dev * rng.normal();
    m.params[name] = Tensor::from_values(shape, v, dtype);
  }
  return m;
}

const Tensor& DenoiserModel::param(const std::string& name) const {
  const auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("no parameter '" + name + "'");
  return it->second;
}

DType DenoiserModel::dtype() const { return params.empty() ? DType::f32 : params.begin()->second.dtype(); }

DenoiserModel DenoiserModel::cast(DType dtype) const {
  DenoiserModel m;
  m.config = config;
  for (const auto& [name, t] : params) m.params[name] = t.detached().cast(dtype);
  return m;
}

std::size_t DenoiserModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params) n += t.numel();
  return n;
}

void DenoiserModel::validate() const {
  config.validate();
  const auto layout = parameter_layout(config);
  if (layout.size() != params.size()) throw ValidationError("checkpoint parameter set does not match its config");
  const DType dt = dtype();
  for (const auto& [name, spec] : layout) {
    const auto it = params.find(name);
    if (it == params.end()) throw ValidationError("checkpoint is missing parameter '" + name + "'");
    if (it->second.shape() != spec.first)
      throw ValidationError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                            shape_str(spec.first));
    if (it->second.dtype() != dt) throw ValidationError("parameters have mixed dtypes");
    if (!all_finite(it->second)) throw ValidationError("parameter '" + name + "' is not finite");
  }
}

void DenoiserModel::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  for (const auto& [name, t] : params) write_tnsr(dir / (name + ".tnsr"), t);
  write_text(dir / "config.json", config_json(config) + "\n");
}

DenoiserModel DenoiserModel::load(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "config.json"))
    throw ValidationError("no checkpoint at " + dir.string() + " (missing config.json)");
  DenoiserModel m;
  m.config = parse_denoiser_config(read_text(dir / "config.json"));
  for (const auto& [name, _] : parameter_layout(m.config)) {
    const auto path = dir / (name + ".tnsr");
    if (!std::filesystem::exists(path)) throw ValidationError("checkpoint is missing " + path.string());
    m.params[name] = read_tnsr(path);
  }
  m.validate();
  return m;
}

ConditionEmbedding embed_condition(const Prompt& prompt, const DenoiserModel& model) {
  if (prompt.token_ids.empty()) throw ValidationError("prompt has no tokens");
  prompt.validate(model.config.max_tokens);
  const Tensor rows = gather_rows(model.param("embed.token"), prompt.token_ids);
  std::vector<std::size_t> positions(prompt.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  return {add(rows, gather_rows(model.param("embed.pos"), positions))};
}

ForwardResult denoiser_forward(const DenoiserModel& model, const Tensor& z_t, std::size_t t,
                               const ConditionEmbedding& cond, AttentionHooks* hooks) {
  const auto& c = model.config;
  if (z_t.shape() != Shape{c.image_side, c.image_side})
    throw DimensionError("denoiser input must be " + shape_str({c.image_side, c.image_side}) + ", got " +
                         shape_str(z_t.shape()));
  if (t >= c.t_train) throw ValidationError("timestep " + std::to_string(t) + " out of range");
  if (z_t.dtype() != model.dtype()) throw DimensionError("latent dtype does not match the model");
  if (cond.matrix.ndim() != 2 || cond.matrix.dim(1) != c.embed_dim)
    throw DimensionError("condition embedding has shape " + shape_str(cond.matrix.shape()));
  Forward f(model, cond, hooks);
  Tensor eps = f.run(z_t, t);
  return {std::move(eps), std::move(f.records)};
}

std::size_t records_per_forward(const DenoiserConfig& config) {
  const auto blocks = 2 * config.q_levels.size() - 1;
  return blocks * (config.n_self_layers + config.n_cross_layers);
}

}  // namespace attnreg
