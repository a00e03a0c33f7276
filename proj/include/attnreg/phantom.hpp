#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "attnreg/tensor.hpp"

namespace attnreg {

enum class Laterality { left, right, both };
enum class Region { upper, lower, whole };

const char* to_string(Laterality l);
const char* to_string(Region r);
Laterality parse_laterality(const std::string& s);
Region parse_region(const std::string& s);

// Binary [H,W] f32 maps with values in {0,1}. Left/right follow the
// radiological convention: the patient's left lung is on the image right.
struct OrganMaskSet {
  Tensor left_lung;
  Tensor right_lung;
  Tensor heart;

  std::size_t side() const { return left_lung.dim(0); }
  const Tensor& lung(Laterality l) const;
};

struct LesionSpec {
  double row = 0;  // disk center, continuous pixel coordinates
  double col = 0;
  double radius = 0;
  double amplitude = 0;
  Laterality laterality = Laterality::left;
  Region region = Region::whole;
};

struct PhantomConfig {
  std::size_t side = 64;
  // Every value must divide `side` (one per attention resolution).
  std::vector<std::size_t> pooling_factors{4, 8};
  // Bounds on each lung's pixel count as a fraction of the image area.
  double lung_area_min = 0.06;
  double lung_area_max = 0.17;
  // Lesion radius range as a fraction of `side`, amplitude range absolute.
  double lesion_radius_min = 0.07;
  double lesion_radius_max = 0.10;
  double lesion_amplitude_min = 0.2;
  double lesion_amplitude_max = 0.4;
  double rib_amplitude = 0.05;

  void validate() const;
};

struct Phantom {
  Tensor image;  // [H,W] f32 in [0,1], lesion-free
  OrganMaskSet masks;
  std::optional<LesionSpec> lesion;
  std::uint64_t seed = 0;
};

struct LesionRequest {
  Laterality laterality = Laterality::left;
  Region region = Region::whole;
};

Phantom generate_phantom(std::uint64_t seed, const PhantomConfig& config,
                         std::optional<LesionRequest> lesion = std::nullopt);

// Pixels of `lung` in the upper or lower half of its bounding box (split at
// the vertical midpoint), or all of it for Region::whole.
Tensor region_of(const Tensor& lung, Region region);

// Pixels whose centers lie within the lesion disk.
Tensor lesion_disk(const LesionSpec& spec, std::size_t height, std::size_t width);

// Adds a Gaussian-feathered bright disk, clamped to [0,1]. Pixels farther
// than 2·radius from the center are untouched. Throws if the disk is not
// contained in the lung named by spec.laterality.
Tensor apply_lesion(const Tensor& image, const LesionSpec& spec, const OrganMaskSet& masks);

struct ManifestEntry {
  std::string id;
  std::uint64_t seed = 0;
  std::string image;
  std::string lesioned_image;
  std::string mask_left;
  std::string mask_right;
  std::string mask_heart;
  LesionSpec lesion;
};

struct Manifest {
  std::filesystem::path root;  // directory holding manifest.json
  std::vector<ManifestEntry> entries;
};

// Writes n (clean, lesioned) phantom pairs with masks plus manifest.json.
// Laterality alternates so the left/right split is balanced.
Manifest build_dataset(std::size_t n, std::uint64_t seed, const std::filesystem::path& out_dir,
                       const PhantomConfig& config = {});
Manifest load_manifest(const std::filesystem::path& dir);
std::string manifest_json(const Manifest& manifest);

// Reads the three masks of an entry.
OrganMaskSet load_masks(const Manifest& manifest, const ManifestEntry& entry);

}  // namespace attnreg
