#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "attnreg/prompt.hpp"
#include "attnreg/tensor.hpp"

namespace attnreg {

struct DenoiserConfig {
  std::size_t image_side = 64;
  // Attention resolutions from finest to coarsest. The image is embedded as
  // (side/q0)² patches at the first level; each following q must divide the
  // previous one.
  std::vector<std::size_t> q_levels{16, 8};
  std::size_t model_width = 32;
  std::size_t head_dim = 32;
  std::size_t n_self_layers = 1;
  std::size_t n_cross_layers = 1;
  std::size_t embed_dim = 32;
  std::size_t time_embed_dim = 32;
  std::size_t ff_mult = 2;
  std::size_t max_tokens = kDefaultMaxTokens;
  std::size_t t_train = 1000;

  void validate() const;
  std::size_t patch() const { return image_side / q_levels.front(); }
};

using ParamMap = std::map<std::string, Tensor>;

struct DenoiserModel {
  DenoiserConfig config;
  ParamMap params;

  // Random initialization from `seed` in the requested precision.
  static DenoiserModel init(const DenoiserConfig& config, std::uint64_t seed, DType dtype = DType::f32);

  const Tensor& param(const std::string& name) const;
  DType dtype() const;
  DenoiserModel cast(DType dtype) const;
  std::size_t parameter_count() const;
  void validate() const;

  // Checkpoint: one TNSR file per parameter plus config.json.
  void save(const std::filesystem::path& dir) const;
  static DenoiserModel load(const std::filesystem::path& dir);
};

std::string config_json(const DenoiserConfig& config);
DenoiserConfig parse_denoiser_config(const std::string& json_text);

struct ConditionEmbedding {
  Tensor matrix;  // [n_tokens, embed_dim]
};

ConditionEmbedding embed_condition(const Prompt& prompt, const DenoiserModel& model);

enum class AttentionKind { self, cross };

struct AttentionRecord {
  std::size_t layer_id = 0;
  AttentionKind kind = AttentionKind::self;
  std::size_t q = 0;
  Tensor map;  // map used by the layer (after any hook); tape-linked when the pass is taped
  Tensor raw;  // softmax output before the hook
};

// Interception points for attention maps. Returning the input unchanged must
// leave the forward pass bit-identical to an unhooked one.
class AttentionHooks {
 public:
  virtual ~AttentionHooks() = default;
  virtual Tensor on_self(const Tensor& s, std::size_t layer_id, std::size_t q) = 0;
  virtual Tensor on_cross(const Tensor& a, std::size_t layer_id, std::size_t q) = 0;
};

struct ForwardResult {
  Tensor eps;
  std::vector<AttentionRecord> records;
};

// z_t is [side, side] in the model's dtype; hooks may be null.
ForwardResult denoiser_forward(const DenoiserModel& model, const Tensor& z_t, std::size_t t,
                               const ConditionEmbedding& cond, AttentionHooks* hooks = nullptr);

// Records emitted by one forward pass: self and cross per block.
std::size_t records_per_forward(const DenoiserConfig& config);

// Encode/decode between images and the sampling latent. The default codec is
// the identity, so the latent is the image itself.
class LatentCodec {
 public:
  virtual ~LatentCodec() = default;
  virtual Tensor encode(const Tensor& image) const { return image; }
  virtual Tensor decode(const Tensor& latent) const { return latent; }
};

}  // namespace attnreg
