#include "attnreg/regulation.hpp"

#include <algorithm>
#include <cmath>

#include "attnreg/autodiff.hpp"
#include "attnreg/errors.hpp"
#include "attnreg/ops.hpp"

namespace attnreg {

namespace {

constexpr double kRowFloor = 1e-8;

// Row-wise out[i,j] = a[i,j]·w[i,j] / Σ_j a[i,j]·w[i,j]. A row is passed
// through bit-exactly when no nonzero entry has a weight other than 1, and
// kept unchanged when its weighted mass falls below the floor.
Tensor weighted_renorm(const Tensor& a, std::vector<double> w, const char* what) {
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<char> renormed(rows, 0);
  std::vector<double> mass(rows, 1.0);
  Tensor out = a.detached();
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = a.data<T>();
    std::span<T> dst;
    for (std::size_t i = 0; i < rows; ++i) {
      bool changed = false;
      double g = 0;
      for (std::size_t j = 0; j < cols; ++j) {
        const double v = static_cast<double>(src[i * cols + j]);
        if (v != 0 && w[i * cols + j] != 1.0) changed = true;
        g += v * w[i * cols + j];
      }
      if (!changed || g < kRowFloor) continue;
      if (dst.empty()) dst = out.mutable_data<T>();
      renormed[i] = 1;
      mass[i] = g;
      for (std::size_t j = 0; j < cols; ++j)
        dst[i * cols + j] = static_cast<T>(static_cast<double>(src[i * cols + j]) * w[i * cols + j] / g);
    }
  });
  require_finite(out, what);
  if (!a.on_tape()) return out;
  const Tensor y = out.detached();
  return record_op(std::move(out), {&a},
                   [y, w = std::move(w), renormed, mass, rows, cols](const Tensor& g, const std::vector<bool>&) {
                     Tensor da = g.detached();
                     dispatch(g.dtype(), [&](auto tag) {
                       using T = decltype(tag);
                       auto gd = g.data<T>();
                       auto yd = y.data<T>();
                       auto d = da.mutable_data<T>();
                       for (std::size_t i = 0; i < rows; ++i) {
                         if (!renormed[i]) continue;
                         double dot = 0;
                         for (std::size_t j = 0; j < cols; ++j)
                           dot += static_cast<double>(gd[i * cols + j]) * static_cast<double>(yd[i * cols + j]);
                         for (std::size_t j = 0; j < cols; ++j)
                           d[i * cols + j] = static_cast<T>(w[i * cols + j] / mass[i] *
                                                            (static_cast<double>(gd[i * cols + j]) - dot));
                       }
                     });
                     return std::vector<Tensor>{da};
                   });
}

void require_matrix(const Tensor& a, const char* what) {
  if (a.ndim() != 2) throw DimensionError(std::string(what) + " expects a 2-d map, got " + shape_str(a.shape()));
}

// Multiplies columns `cols` of each row i by row_mult[i], then renormalizes.
Tensor scale_columns(const Tensor& a, std::span<const std::size_t> columns, const std::vector<double>& row_mult,
                     const char* what) {
  require_matrix(a, what);
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (row_mult.size() != rows)
    throw DimensionError(std::string(what) + ": map has " + std::to_string(rows) + " rows, multiplier has " +
                         std::to_string(row_mult.size()));
  std::vector<double> w(rows * cols, 1.0);
  for (auto k : columns) {
    if (k >= cols) throw ValidationError(std::string(what) + ": token index " + std::to_string(k) + " out of range");
    for (std::size_t i = 0; i < rows; ++i) w[i * cols + k] = row_mult[i];
  }
  return weighted_renorm(a, std::move(w), what);
}

bool contains(const std::vector<std::size_t>& v, std::size_t x) { return std::find(v.begin(), v.end(), x) != v.end(); }

}  // namespace

const char* to_string(GateOrientation g) {
  switch (g) {
    case GateOrientation::key: return "key";
    case GateOrientation::query: return "query";
    case GateOrientation::both: return "both";
  }
  return "?";
}

const char* to_string(WindowMode w) { return w == WindowMode::early ? "early" : "late"; }

GateOrientation parse_gate_orientation(const std::string& s) {
  if (s == "key") return GateOrientation::key;
  if (s == "query") return GateOrientation::query;
  if (s == "both") return GateOrientation::both;
  throw ValidationError("unknown gate orientation '" + s + "'");
}

WindowMode parse_window_mode(const std::string& s) {
  if (s == "early") return WindowMode::early;
  if (s == "late") return WindowMode::late;
  throw ValidationError("unknown window mode '" + s + "'");
}

void RegulationConfig::validate() const {
  if (!(eta >= 0) || !std::isfinite(eta)) throw ValidationError("eta must be >= 0");
  if (!(mu >= 0 && mu <= 1)) throw ValidationError("mu must lie in [0, 1]");
  if (!(alpha_max >= 0) || !std::isfinite(alpha_max)) throw ValidationError("alpha_max must be >= 0");
  if (!(blur_sigma >= 0) || !std::isfinite(blur_sigma)) throw ValidationError("blur_sigma must be >= 0");
  if (q_levels.empty()) throw ValidationError("regulation q_levels must not be empty");
}

Tensor downsample_mask(const Tensor& mask, std::size_t q) {
  require_matrix(mask, "downsample_mask");
  if (q == 0 || mask.dim(0) % q != 0 || mask.dim(1) % q != 0 || mask.dim(0) != mask.dim(1))
    throw ValidationError("resolution " + std::to_string(q) + " does not divide mask " + shape_str(mask.shape()));
  return avg_pool2d(mask, mask.dim(0) / q);
}

Tensor dilate(const Tensor& map, std::size_t cells) {
  require_matrix(map, "dilate");
  const std::size_t h = map.dim(0), w = map.dim(1);
  std::vector<double> cur = map.to_doubles();
  for (std::size_t it = 0; it < cells; ++it) {
    std::vector<double> next(cur.size());
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        double m = cur[r * w + c];
        for (std::size_t rr = r ? r - 1 : 0; rr <= std::min(h - 1, r + 1); ++rr)
          for (std::size_t cc = c ? c - 1 : 0; cc <= std::min(w - 1, c + 1); ++cc) m = std::max(m, cur[rr * w + cc]);
        next[r * w + c] = m;
      }
    cur = std::move(next);
  }
  return Tensor::from_values(map.shape(), cur, map.dtype());
}

Tensor gate_self_attention(const Tensor& s, const Tensor& m, GateOrientation orientation) {
  require_matrix(s, "gate_self_attention");
  const std::size_t n = s.dim(0);
  if (s.dim(1) != n || m.numel() != n)
    throw DimensionError("gate_self_attention: map " + shape_str(s.shape()) + " with mask of " +
                         std::to_string(m.numel()) + " cells");
  const auto mv = m.to_doubles();
  std::vector<double> w(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      switch (orientation) {
        case GateOrientation::key: w[i * n + j] = mv[j]; break;
        case GateOrientation::query: w[i * n + j] = mv[i]; break;
        case GateOrientation::both: w[i * n + j] = mv[i] * mv[j]; break;
      }
    }
  return weighted_renorm(s, std::move(w), "gate_self_attention");
}

ROISelection select_roi(const OrganMaskSet& masks, const Prompt& prompt) {
  if (!prompt.laterality) throw ValidationError("prompt has no laterality cue to select an ROI");
  ROISelection roi;
  roi.laterality = *prompt.laterality;
  roi.region = prompt.region.value_or(Region::whole);
  if (roi.laterality == Laterality::both) {
    roi.mask = add(region_of(masks.left_lung, roi.region), region_of(masks.right_lung, roi.region));
  } else {
    roi.mask = region_of(masks.lung(roi.laterality), roi.region);
  }
  bool any = false;
  for (double v : roi.mask.to_doubles()) any = any || v > 0;
  if (!any) throw ValidationError("selected ROI is empty");
  return roi;
}

Tensor build_prior(const Tensor& roi_mask, std::size_t q, double sigma) {
  const Tensor pooled = downsample_mask(roi_mask, q).cast(DType::f64);
  const Tensor blurred = gaussian_blur2d(pooled, sigma);
  auto v = blurred.to_doubles();
  const double peak = *std::max_element(v.begin(), v.end());
  if (peak <= 0) return Tensor::zeros({q, q}, roi_mask.dtype());
  for (auto& x : v) x /= peak;
  return Tensor::from_values({q, q}, v, roi_mask.dtype());
}

Tensor reweight_cross_attention(const Tensor& a, std::span<const std::size_t> k_path, const Tensor& omega,
                                double eta, bool active) {
  require_matrix(a, "reweight_cross_attention");
  for (auto k : k_path)
    if (k >= a.dim(1)) throw ValidationError("pathology token index " + std::to_string(k) + " out of range");
  if (omega.numel() != a.dim(0))
    throw DimensionError("reweight_cross_attention: prior has " + std::to_string(omega.numel()) + " cells, map has " +
                         std::to_string(a.dim(0)) + " rows");
  if (!active) return a;
  std::vector<double> mult = omega.to_doubles();
  for (auto& v : mult) v = 1.0 + eta * v;
  return scale_columns(a, k_path, mult, "reweight_cross_attention");
}

Tensor attention_column(const Tensor& a, std::size_t k) {
  require_matrix(a, "attention_column");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (k >= cols) throw ValidationError("column " + std::to_string(k) + " out of range");
  Tensor out = dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = a.data<T>();
    std::vector<T> v(rows);
    for (std::size_t i = 0; i < rows; ++i) v[i] = src[i * cols + k];
    return Tensor::from_vector({rows}, std::move(v));
  });
  if (!a.on_tape()) return out;
  const Shape shape = a.shape();
  return record_op(std::move(out), {&a}, [shape, k, rows, cols](const Tensor& g, const std::vector<bool>&) {
    Tensor da = Tensor::zeros(shape, g.dtype());
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto gd = g.data<T>();
      auto d = da.mutable_data<T>();
      for (std::size_t i = 0; i < rows; ++i) d[i * cols + k] = gd[i];
    });
    return std::vector<Tensor>{da};
  });
}

Tensor concentration_score(const Tensor& column, const Tensor& omega) {
  if (column.numel() != omega.numel())
    throw DimensionError("concentration_score: column of " + std::to_string(column.numel()) + " vs prior of " +
                         std::to_string(omega.numel()));
  const auto a = column.to_doubles();
  const auto o = omega.to_doubles();
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] < 0) throw ValidationError("attention column has a negative entry");
    num += a[i] * o[i];
    den += a[i];
  }
  if (!(den > 0)) throw ValidationError("concentration score is undefined for an all-zero attention column");
  const double score = num / den;
  Tensor out = Tensor::scalar(score, column.dtype());
  if (!column.on_tape()) return out;
  const Shape shape = column.shape();
  return record_op(std::move(out), {&column}, [o, score, den, shape](const Tensor& g, const std::vector<bool>&) {
    const double gv = g.item();
    std::vector<double> d(o.size());
    for (std::size_t i = 0; i < o.size(); ++i) d[i] = gv * (o[i] - score) / den;
    return std::vector<Tensor>{Tensor::from_values(shape, d, g.dtype())};
  });
}

const Tensor& SpatialPrior::at(std::size_t q) const {
  const auto it = omega.find(q);
  if (it == omega.end()) throw ValidationError("no spatial prior at resolution " + std::to_string(q));
  return it->second;
}

SpatialPrior build_spatial_prior(const Tensor& roi_mask, const std::vector<std::size_t>& q_levels, double sigma,
                                 DType dtype) {
  SpatialPrior p;
  for (auto q : q_levels) p.omega[q] = build_prior(roi_mask, q, sigma).cast(dtype).with_shape({q * q});
  return p;
}

Tensor pathology_energy(const std::vector<AttentionRecord>& records, const SpatialPrior& prior,
                        std::span<const std::size_t> k_path) {
  if (k_path.empty()) throw ValidationError("pathology energy needs at least one pathology token");
  Tensor total;
  std::size_t count = 0;
  for (const auto& r : records) {
    if (r.kind != AttentionKind::cross || !prior.omega.count(r.q)) continue;
    for (auto k : k_path) {
      Tensor s = concentration_score(attention_column(r.map, k), prior.at(r.q));
      total = count == 0 ? s : add(total, s);
      ++count;
    }
  }
  if (count == 0) throw ValidationError("pathology energy needs at least one cross-attention record");
  return add_scalar(scale(total, -1.0 / static_cast<double>(count)), 1.0);
}

double mean_concentration(const std::vector<AttentionRecord>& records, const SpatialPrior& prior,
                          std::span<const std::size_t> k_path) {
  std::vector<AttentionRecord> plain;
  for (const auto& r : records) plain.push_back({r.layer_id, r.kind, r.q, r.map.detached(), r.raw.detached()});
  return 1.0 - pathology_energy(plain, prior, k_path).item();
}

double alpha_schedule(std::size_t step_in_window, std::size_t window_len, double alpha_max) {
  if (step_in_window >= window_len)
    throw ValidationError("step " + std::to_string(step_in_window) + " is outside a window of " +
                          std::to_string(window_len));
  return alpha_max * (1.0 - static_cast<double>(step_in_window) / static_cast<double>(window_len));
}

Tensor latent_correction(const Tensor& z, const Tensor& grad, double alpha) {
  if (z.shape() != grad.shape() || z.dtype() != grad.dtype())
    throw DimensionError("latent_correction: gradient " + shape_str(grad.shape()) + " vs latent " +
                         shape_str(z.shape()));
  require_finite(grad, "latent correction gradient");
  Tensor out = z.detached();
  dispatch(z.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto o = out.mutable_data<T>();
    auto g = grad.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i)
      o[i] = static_cast<T>(static_cast<double>(o[i]) - alpha * static_cast<double>(g[i]));
  });
  require_finite(out, "latent correction");
  return out;
}

std::size_t window_length(std::size_t steps, double mu, WindowMode mode) {
  std::size_t n = 0;
  for (std::size_t j = 0; j < steps; ++j) n += in_window(j, steps, mu, mode);
  return n;
}

bool in_window(std::size_t step_index, std::size_t steps, double mu, WindowMode mode) {
  const double bound = mu * static_cast<double>(steps);
  if (mode == WindowMode::early) {
    // ⌈μT⌉, robust to products like 0.4·50 landing a hair above an integer.
    const auto len = static_cast<std::size_t>(std::ceil(bound - 1e-9));
    return step_index < len;
  }
  const double t = static_cast<double>(steps - step_index);
  return t < bound - 1e-9;
}

std::size_t window_position(std::size_t step_index, std::size_t steps, double mu, WindowMode mode) {
  if (!in_window(step_index, steps, mu, mode)) throw ValidationError("step is outside the window");
  std::size_t first = 0;
  while (!in_window(first, steps, mu, mode)) ++first;
  return step_index - first;
}

RegulationContext make_regulation_context(const OrganMaskSet& masks, const Prompt& prompt,
                                          const RegulationConfig& config, DType dtype) {
  config.validate();
  RegulationContext ctx;
  ctx.roi = select_roi(masks, prompt);
  ctx.prior = build_spatial_prior(ctx.roi.mask, config.q_levels, config.blur_sigma, dtype);
  const Tensor anatomy = add(add(masks.left_lung, masks.right_lung), masks.heart);
  for (auto q : config.q_levels) {
    auto v = dilate(downsample_mask(anatomy, q), config.anat_dilation).to_doubles();
    for (auto& x : v) x = std::min(x, 1.0);
    ctx.anatomy[q] = Tensor::from_values({q * q}, v, dtype);
  }
  ctx.k_path = prompt.k_path;
  for (std::size_t i = 0; i < prompt.token_ids.size(); ++i) {
    const auto id = static_cast<Token>(prompt.token_ids[i]);
    if (id == Token::left || id == Token::right || id == Token::both || id == Token::upper || id == Token::lower ||
        id == Token::whole)
      ctx.anatomy_tokens.push_back(i);
  }
  return ctx;
}

RegulationHooks::RegulationHooks(const RegulationContext& context, const RegulationConfig& config, bool conditional,
                                 bool window_active)
    : ctx_(context), cfg_(config), conditional_(conditional), window_active_(window_active) {}

bool RegulationHooks::regulated(std::size_t q) const { return contains(cfg_.q_levels, q); }

Tensor RegulationHooks::on_self(const Tensor& s, std::size_t, std::size_t q) {
  if (!cfg_.enable_anat_gate || !regulated(q)) return s;
  return gate_self_attention(s, ctx_.anatomy.at(q), cfg_.gate_orientation);
}

Tensor RegulationHooks::on_cross(const Tensor& a, std::size_t, std::size_t q) {
  if (!conditional_ || !regulated(q)) return a;
  Tensor out = a;
  if (cfg_.enable_anat_gate && cfg_.gate_anatomy_tokens && !ctx_.anatomy_tokens.empty())
    out = scale_columns(out, ctx_.anatomy_tokens, ctx_.anatomy.at(q).to_doubles(), "anatomy token gate");
  if (cfg_.enable_path_reweight && window_active_)
    out = reweight_cross_attention(out, ctx_.k_path, ctx_.prior.at(q), cfg_.eta, true);
  return out;
}

}  // namespace attnreg
