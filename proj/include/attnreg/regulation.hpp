#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "attnreg/denoiser.hpp"
#include "attnreg/phantom.hpp"
#include "attnreg/prompt.hpp"
#include "attnreg/tensor.hpp"

namespace attnreg {

// Which side of a self-attention map the anatomy mask multiplies.
enum class GateOrientation { key, query, both };
// early: the first ⌈μT⌉ iterations. late: iterations whose countdown index
// t = T - j satisfies t < μT.
enum class WindowMode { early, late };

const char* to_string(GateOrientation g);
const char* to_string(WindowMode w);
GateOrientation parse_gate_orientation(const std::string& s);
WindowMode parse_window_mode(const std::string& s);

struct RegulationConfig {
  double eta = 1.5;
  double mu = 0.4;
  double alpha_max = 0.05;
  std::vector<std::size_t> q_levels{16, 8};
  double blur_sigma = 1.0;
  bool enable_anat_gate = true;
  bool enable_path_reweight = true;
  bool enable_latent_correct = true;
  GateOrientation gate_orientation = GateOrientation::key;
  WindowMode window_mode = WindowMode::early;
  std::size_t anat_dilation = 1;  // cells, at attention resolution
  // Also gate cross-attention columns of laterality/region tokens by the
  // anatomy mask. Off by default.
  bool gate_anatomy_tokens = false;

  void validate() const;
  bool any_enabled() const { return enable_anat_gate || enable_path_reweight || enable_latent_correct; }
};

// Average-pool a binary [H,W] mask to q×q occupancy fractions.
Tensor downsample_mask(const Tensor& mask, std::size_t q);

// 3×3 (per step) grey-level dilation of a [q,q] map, repeated `cells` times.
Tensor dilate(const Tensor& map, std::size_t cells);

// Gates S (rows = queries, columns = keys) by the flattened mask m and
// renormalizes each row. Rows whose gated mass falls below 1e-8 are kept as
// they were; rows the mask does not change are passed through bit-exactly.
// Differentiable with respect to S.
Tensor gate_self_attention(const Tensor& s, const Tensor& m, GateOrientation orientation = GateOrientation::key);

struct ROISelection {
  Tensor mask;  // binary [H,W]
  Laterality laterality = Laterality::both;
  Region region = Region::whole;
};

// Throws ValidationError when the prompt carries no laterality or the
// selection is empty. A missing region means whole.
ROISelection select_roi(const OrganMaskSet& masks, const Prompt& prompt);

// maxnorm(blur(avg_pool(M_ROI), sigma)) as a [q,q] map; all zeros for an empty ROI.
Tensor build_prior(const Tensor& roi_mask, std::size_t q, double sigma);

// Multiplies columns k∈K_path by (1+η·Ω) and renormalizes the rows that
// changed. Inactive or neutral settings return A unchanged. Differentiable.
Tensor reweight_cross_attention(const Tensor& a, std::span<const std::size_t> k_path, const Tensor& omega,
                                double eta, bool active);

// Column k of a map as a [rows] vector. Differentiable.
Tensor attention_column(const Tensor& a, std::size_t k);

// ⟨a, Ω⟩ / ⟨a, 1⟩ for a spatial column a. Differentiable w.r.t. a.
Tensor concentration_score(const Tensor& column, const Tensor& omega);

// Per-q priors Ω_q (flattened [q²]) for one sample.
struct SpatialPrior {
  std::map<std::size_t, Tensor> omega;
  const Tensor& at(std::size_t q) const;
};

SpatialPrior build_spatial_prior(const Tensor& roi_mask, const std::vector<std::size_t>& q_levels, double sigma,
                                 DType dtype = DType::f32);

// 1 - mean concentration over pathology tokens × cross records at the prior's
// resolutions. Records at other resolutions are ignored.
Tensor pathology_energy(const std::vector<AttentionRecord>& records, const SpatialPrior& prior,
                        std::span<const std::size_t> k_path);

// Mean concentration, without building a graph.
double mean_concentration(const std::vector<AttentionRecord>& records, const SpatialPrior& prior,
                          std::span<const std::size_t> k_path);

double alpha_schedule(std::size_t step_in_window, std::size_t window_len, double alpha_max);

// z - α·grad.
Tensor latent_correction(const Tensor& z, const Tensor& grad, double alpha);

// Number of window steps and membership for a T-step ladder.
std::size_t window_length(std::size_t steps, double mu, WindowMode mode);
bool in_window(std::size_t step_index, std::size_t steps, double mu, WindowMode mode);
// Position of a window step within the window (0 at its first step).
std::size_t window_position(std::size_t step_index, std::size_t steps, double mu, WindowMode mode);

// Everything regulation needs for one sample, at the model dtype.
struct RegulationContext {
  ROISelection roi;
  SpatialPrior prior;                     // Ω_q, flattened
  std::map<std::size_t, Tensor> anatomy;  // gating masks m_q, flattened
  std::vector<std::size_t> k_path;
  std::vector<std::size_t> anatomy_tokens;  // laterality/region token positions
};

RegulationContext make_regulation_context(const OrganMaskSet& masks, const Prompt& prompt,
                                          const RegulationConfig& config, DType dtype = DType::f32);

// Hook bundle handed to the denoiser. `conditional` selects the branch:
// reweighting only touches the conditional branch, gating touches both.
class RegulationHooks : public AttentionHooks {
 public:
  RegulationHooks(const RegulationContext& context, const RegulationConfig& config, bool conditional,
                  bool window_active);

  Tensor on_self(const Tensor& s, std::size_t layer_id, std::size_t q) override;
  Tensor on_cross(const Tensor& a, std::size_t layer_id, std::size_t q) override;

 private:
  bool regulated(std::size_t q) const;

  const RegulationContext& ctx_;
  const RegulationConfig& cfg_;
  bool conditional_;
  bool window_active_;
};

}  // namespace attnreg
