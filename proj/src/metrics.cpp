#include "attnreg/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "attnreg/errors.hpp"
#include "attnreg/ops.hpp"

namespace attnreg {

namespace {

void require_same_image(const Tensor& a, const Tensor& b, const char* what) {
  if (a.ndim() != 2 || a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": image shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

// Separable filtering of an [h,w] field with symmetric reflection.
std::vector<double> filter(const std::vector<double>& x, std::size_t h, std::size_t w, const std::vector<double>& taps) {
  const long r = static_cast<long>(taps.size() / 2);
  std::vector<double> tmp(x.size()), out(x.size());
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      double s = 0;
      for (long k = -r; k <= r; ++k) s += taps[k + r] * x[i * w + reflect_index(static_cast<long>(j) + k, w)];
      tmp[i * w + j] = s;
    }
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      double s = 0;
      for (long k = -r; k <= r; ++k) s += taps[k + r] * tmp[reflect_index(static_cast<long>(i) + k, h) * w + j];
      out[i * w + j] = s;
    }
  return out;
}

std::vector<double> window_taps(const SsimOptions& o) {
  if (o.window == 0 || o.window % 2 == 0) throw ValidationError("SSIM window must be odd");
  if (!(o.sigma > 0)) throw ValidationError("SSIM sigma must be positive");
  const long r = static_cast<long>(o.window / 2);
  std::vector<double> taps;
  double total = 0;
  for (long k = -r; k <= r; ++k) {
    taps.push_back(std::exp(-0.5 * static_cast<double>(k * k) / (o.sigma * o.sigma)));
    total += taps.back();
  }
  for (auto& t : taps) t /= total;
  return taps;
}

struct MaskCounts {
  std::size_t inside = 0;
  std::size_t outside = 0;
};

MaskCounts count_mask(const std::vector<double>& m) {
  MaskCounts c;
  for (double v : m) (v > 0 ? c.inside : c.outside)++;
  return c;
}

}  // namespace

Tensor ssim_map(const Tensor& a, const Tensor& b, const SsimOptions& opts) {
  require_same_image(a, b, "ssim");
  const auto taps = window_taps(opts);
  const std::size_t h = a.dim(0), w = a.dim(1);
  const auto x = a.to_doubles(), y = b.to_doubles();
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter(x, h, w, taps), my = filter(y, h, w, taps);
  const auto sxx = filter(xx, h, w, taps), syy = filter(yy, h, w, taps), sxy = filter(xy, h, w, taps);
  const double c1 = std::pow(opts.k1 * opts.dynamic_range, 2), c2 = std::pow(opts.k2 * opts.dynamic_range, 2);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
    out[i] = ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return Tensor::from_values({h, w}, out, DType::f64);
}

double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opts) {
  const auto m = ssim_map(a, b, opts).to_doubles();
  double s = 0;
  for (double v : m) s += v;
  return s / static_cast<double>(m.size());
}

double ssim_outside(const Tensor& a, const Tensor& b, const Tensor& mask, const SsimOptions& opts) {
  require_same_image(a, mask, "ssim_outside");
  const auto m = ssim_map(a, b, opts).to_doubles();
  const auto k = mask.to_doubles();
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (k[i] <= 0) {
      s += m[i];
      ++n;
    }
  if (n == 0) throw ValidationError("mask covers the whole image");
  return s / static_cast<double>(n);
}

RegionChange region_change(const Tensor& x, const Tensor& x_edit, const Tensor& mask) {
  require_same_image(x, x_edit, "region_change");
  require_same_image(x, mask, "region_change");
  const auto a = x.to_doubles(), b = x_edit.to_doubles(), m = mask.to_doubles();
  const auto counts = count_mask(m);
  if (counts.inside == 0) throw ValidationError("region mask is empty");
  if (counts.outside == 0) throw ValidationError("region mask covers the whole image");
  RegionChange rc;
  for (std::size_t i = 0; i < a.size(); ++i) (m[i] > 0 ? rc.in_mean : rc.out_mean) += std::abs(b[i] - a[i]);
  rc.in_mean /= static_cast<double>(counts.inside);
  rc.out_mean /= static_cast<double>(counts.outside);
  return rc;
}

namespace {

double signed_inside(const Tensor& x, const Tensor& x_edit, const Tensor& mask) {
  const auto a = x.to_doubles(), b = x_edit.to_doubles(), m = mask.to_doubles();
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (m[i] > 0) {
      s += b[i] - a[i];
      ++n;
    }
  return s / static_cast<double>(n);
}

bool success_from(double signed_in, double out_mean, const EditThresholds& th, EditKind kind) {
  const double directed = kind == EditKind::add_lesion ? signed_in : -signed_in;
  return directed >= th.tau_in && out_mean <= th.tau_out;
}

}  // namespace

bool edit_success(const Tensor& x, const Tensor& x_edit, const Tensor& roi, const EditThresholds& th, EditKind kind) {
  const auto rc = region_change(x, x_edit, roi);
  return success_from(signed_inside(x, x_edit, roi), rc.out_mean, th, kind);
}

EditReport evaluate_edit(const Tensor& x, const Tensor& x_edit, const Tensor& roi, const std::vector<StepTrace>& trace,
                         const EditThresholds& th, EditKind kind) {
  EditReport r;
  const auto rc = region_change(x, x_edit, roi);
  r.ssim_global = ssim(x, x_edit);
  r.ssim_out_of_roi = ssim_outside(x, x_edit, roi);
  r.in_roi_change = rc.in_mean;
  r.out_roi_change = rc.out_mean;
  r.change_ratio = rc.in_mean / std::max(rc.out_mean, 1e-6);
  r.in_roi_signed = signed_inside(x, x_edit, roi);
  r.edit_success = success_from(r.in_roi_signed, rc.out_mean, th, kind);
  double l = 0, c = 0;
  std::size_t nl = 0, nc = 0;
  for (const auto& s : trace) {
    if (!s.in_window) continue;
    if (s.l_path) {
      l += *s.l_path;
      ++nl;
    }
    if (s.concentration) {
      c += *s.concentration;
      ++nc;
    }
  }
  if (nl) r.mean_l_path = l / static_cast<double>(nl);
  if (nc) r.mean_concentration = c / static_cast<double>(nc);
  return r;
}

}  // namespace attnreg
