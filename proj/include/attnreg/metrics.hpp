#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "attnreg/sampler.hpp"
#include "attnreg/tensor.hpp"

namespace attnreg {

struct SsimOptions {
  std::size_t window = 11;  // odd
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

// Per-pixel SSIM with a Gaussian window; borders use symmetric reflection so
// the map has the image's shape.
Tensor ssim_map(const Tensor& a, const Tensor& b, const SsimOptions& opts = {});
double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opts = {});
// Mean of the SSIM map over pixels where mask == 0.
double ssim_outside(const Tensor& a, const Tensor& b, const Tensor& mask, const SsimOptions& opts = {});

struct RegionChange {
  double in_mean = 0;   // mean |x' - x| inside the mask
  double out_mean = 0;  // and outside
};

RegionChange region_change(const Tensor& x, const Tensor& x_edit, const Tensor& mask);

enum class EditKind { add_lesion, remove_lesion };

struct EditThresholds {
  double tau_in = 0.05;
  double tau_out = 0.02;
};

// Add: mean signed change inside the ROI ≥ tau_in (brightening) and mean
// absolute change outside ≤ tau_out. Remove: the inside test is flipped.
bool edit_success(const Tensor& x, const Tensor& x_edit, const Tensor& roi, const EditThresholds& th = {},
                  EditKind kind = EditKind::add_lesion);

struct EditReport {
  double ssim_global = 0;
  double ssim_out_of_roi = 0;
  double in_roi_change = 0;
  double out_roi_change = 0;
  double change_ratio = 0;
  double in_roi_signed = 0;
  bool edit_success = false;
  // Window-step means from the trace; absent when no window steps ran.
  std::optional<double> mean_l_path;
  std::optional<double> mean_concentration;
};

EditReport evaluate_edit(const Tensor& x, const Tensor& x_edit, const Tensor& roi,
                         const std::vector<StepTrace>& trace, const EditThresholds& th = {},
                         EditKind kind = EditKind::add_lesion);

}  // namespace attnreg
