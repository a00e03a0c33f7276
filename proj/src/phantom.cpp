#include "attnreg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <json.hpp>
#include <numbers>

#include "attnreg/errors.hpp"
#include "attnreg/io.hpp"
#include "attnreg/rng.hpp"

namespace attnreg {
namespace {

using json = nlohmann::json;

struct Ellipse {
  double cx, cy, a, b;  // fractions of side

  bool contains(double x, double y) const {
    const double dx = (x - cx) / a, dy = (y - cy) / b;
    return dx * dx + dy * dy <= 1.0;
  }
};

// Largest 4-connected component of a binary grid.
std::vector<std::uint8_t> largest_component(const std::vector<std::uint8_t>& mask, std::size_t side) {
  std::vector<int> label(mask.size(), -1);
  std::vector<std::size_t> sizes;
  std::deque<std::size_t> queue;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || label[start] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    sizes.push_back(0);
    label[start] = id;
    queue.push_back(start);
    while (!queue.empty()) {
      const auto p = queue.front();
      queue.pop_front();
      ++sizes[static_cast<std::size_t>(id)];
      const auto r = p / side, c = p % side;
      const std::size_t nbrs[4] = {r > 0 ? p - side : p, r + 1 < side ? p + side : p,
                                   c > 0 ? p - 1 : p, c + 1 < side ? p + 1 : p};
      for (auto q : nbrs)
        if (q != p && mask[q] && label[q] < 0) {
          label[q] = id;
          queue.push_back(q);
        }
    }
  }
  std::vector<std::uint8_t> out(mask.size(), 0);
  if (sizes.empty()) return out;
  const int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = label[i] == best;
  return out;
}

Tensor to_mask_tensor(const std::vector<std::uint8_t>& m, std::size_t side) {
  std::vector<float> v(m.begin(), m.end());
  return Tensor::from_vector({side, side}, std::move(v));
}

double mask_fraction(const std::vector<std::uint8_t>& m) {
  return static_cast<double>(std::count(m.begin(), m.end(), 1)) / static_cast<double>(m.size());
}

bool disk_inside(const LesionSpec& spec, const Tensor& allowed) {
  const Tensor disk = lesion_disk(spec, allowed.dim(0), allowed.dim(1));
  auto d = disk.data<float>();
  auto a = allowed.data<float>();
  bool any = false;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] > 0) {
      any = true;
      if (a[i] <= 0) return false;
    }
  }
  return any;
}

LesionSpec sample_lesion(Rng& rng, const OrganMaskSet& masks, const PhantomConfig& cfg,
                         const LesionRequest& req) {
  const double side = static_cast<double>(cfg.side);
  const Tensor allowed = region_of(masks.lung(req.laterality), req.region);
  // Candidate centers are pixels of the allowed region.
  std::vector<std::size_t> cells;
  auto a = allowed.data<float>();
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] > 0) cells.push_back(i);
  if (cells.empty()) throw std::runtime_error("phantom lung region is empty");
  for (int attempt = 0; attempt < 500; ++attempt) {
    LesionSpec spec;
    spec.laterality = req.laterality;
    spec.region = req.region;
    // Shrink toward the minimum radius if large disks keep failing.
    const double shrink = attempt < 250 ? 1.0 : 0.0;
    spec.radius = side * (cfg.lesion_radius_min +
                          shrink * rng.uniform() * (cfg.lesion_radius_max - cfg.lesion_radius_min));
    spec.amplitude = rng.uniform(cfg.lesion_amplitude_min, cfg.lesion_amplitude_max);
    const auto cell = cells[rng.below(cells.size())];
    spec.row = static_cast<double>(cell / cfg.side) + rng.uniform();
    spec.col = static_cast<double>(cell % cfg.side) + rng.uniform();
    if (disk_inside(spec, allowed)) return spec;
  }
  // Narrow regions: scan every pixel center with a shrinking radius.
  for (double radius = side * cfg.lesion_radius_min; radius >= 1.5; radius *= 0.9) {
    std::vector<LesionSpec> fits;
    for (auto cell : cells) {
      LesionSpec spec{static_cast<double>(cell / cfg.side) + 0.5, static_cast<double>(cell % cfg.side) + 0.5, radius,
                      0.0, req.laterality, req.region};
      if (disk_inside(spec, allowed)) fits.push_back(spec);
    }
    if (!fits.empty()) {
      LesionSpec spec = fits[rng.below(fits.size())];
      spec.amplitude = rng.uniform(cfg.lesion_amplitude_min, cfg.lesion_amplitude_max);
      return spec;
    }
  }
  throw std::runtime_error("could not place a lesion inside the requested lung region");
}

json lesion_json(const LesionSpec& l) {
  return json{{"center", {l.row, l.col}},
              {"radius", l.radius},
              {"amplitude", l.amplitude},
              {"laterality", to_string(l.laterality)},
              {"region", to_string(l.region)}};
}

LesionSpec lesion_from_json(const json& j) {
  LesionSpec l;
  l.row = j.at("center").at(0).get<double>();
  l.col = j.at("center").at(1).get<double>();
  l.radius = j.at("radius").get<double>();
  l.amplitude = j.at("amplitude").get<double>();
  l.laterality = parse_laterality(j.at("laterality").get<std::string>());
  l.region = parse_region(j.at("region").get<std::string>());
  return l;
}

}  // namespace

const char* to_string(Laterality l) {
  switch (l) {
    case Laterality::left: return "left";
    case Laterality::right: return "right";
    case Laterality::both: return "both";
  }
  return "?";
}

const char* to_string(Region r) {
  switch (r) {
    case Region::upper: return "upper";
    case Region::lower: return "lower";
    case Region::whole: return "whole";
  }
  return "?";
}

Laterality parse_laterality(const std::string& s) {
  if (s == "left") return Laterality::left;
  if (s == "right") return Laterality::right;
  if (s == "both") return Laterality::both;
  throw ValidationError("unknown laterality '" + s + "'");
}

Region parse_region(const std::string& s) {
  if (s == "upper") return Region::upper;
  if (s == "lower") return Region::lower;
  if (s == "whole") return Region::whole;
  throw ValidationError("unknown region '" + s + "'");
}

const Tensor& OrganMaskSet::lung(Laterality l) const {
  if (l == Laterality::left) return left_lung;
  if (l == Laterality::right) return right_lung;
  throw ValidationError("a single lung needs laterality left or right");
}

void PhantomConfig::validate() const {
  if (side < 32) throw ValidationError("phantom side must be at least 32");
  for (auto f : pooling_factors)
    if (f == 0 || side % f != 0)
      throw ValidationError("phantom side " + std::to_string(side) + " is not divisible by pooling factor " +
                            std::to_string(f));
  if (!(lung_area_min > 0 && lung_area_min < lung_area_max && lung_area_max < 0.5))
    throw ValidationError("invalid lung area bounds");
  if (!(lesion_radius_min > 0 && lesion_radius_min <= lesion_radius_max))
    throw ValidationError("invalid lesion radius range");
  if (!(lesion_amplitude_min >= 0 && lesion_amplitude_min <= lesion_amplitude_max && lesion_amplitude_max <= 1))
    throw ValidationError("invalid lesion amplitude range");
}

Phantom generate_phantom(std::uint64_t seed, const PhantomConfig& cfg, std::optional<LesionRequest> lesion) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t n = cfg.side;
  const double inv = 1.0 / static_cast<double>(n);

  std::vector<std::uint8_t> left(n * n), right(n * n), heart(n * n);
  Ellipse el{}, er{}, eh{};
  bool ok = false;
  for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
    er = {0.5 - rng.uniform(0.19, 0.23), rng.uniform(0.45, 0.52), rng.uniform(0.12, 0.155), rng.uniform(0.25, 0.31)};
    el = {0.5 + rng.uniform(0.19, 0.23), rng.uniform(0.45, 0.52), rng.uniform(0.12, 0.155), rng.uniform(0.25, 0.31)};
    eh = {0.5 + rng.uniform(0.03, 0.07), rng.uniform(0.64, 0.70), rng.uniform(0.12, 0.15), rng.uniform(0.09, 0.12)};
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        const double x = (static_cast<double>(c) + 0.5) * inv, y = (static_cast<double>(r) + 0.5) * inv;
        const auto i = r * n + c;
        heart[i] = eh.contains(x, y);
        left[i] = el.contains(x, y) && !heart[i];
        right[i] = er.contains(x, y) && !heart[i];
      }
    left = largest_component(left, n);
    right = largest_component(right, n);
    const double fl = mask_fraction(left), fr = mask_fraction(right);
    ok = fl >= cfg.lung_area_min && fl <= cfg.lung_area_max && fr >= cfg.lung_area_min && fr <= cfg.lung_area_max;
  }
  if (!ok) throw std::runtime_error("phantom lung areas outside configured bounds");

  const double base = rng.uniform(0.50, 0.60);
  const double gx = rng.uniform(-0.08, 0.08), gy = rng.uniform(-0.08, 0.08);
  const double lung_level = rng.uniform(0.15, 0.22);
  const double heart_level = rng.uniform(0.60, 0.70);
  const double rib_period = rng.uniform(0.085, 0.11);
  const double rib_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  std::vector<float> img(n * n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const double x = (static_cast<double>(c) + 0.5) * inv, y = (static_cast<double>(r) + 0.5) * inv;
      const auto i = r * n + c;
      double v = base + gx * (x - 0.5) + gy * (y - 0.5);
      if (heart[i]) {
        v = heart_level + 0.5 * gy * (y - 0.5);
      } else if (left[i] || right[i]) {
        const double rib = 0.5 * (1.0 + std::sin(2.0 * std::numbers::pi * y / rib_period + rib_phase));
        v = lung_level + 0.04 * (y - 0.5) + cfg.rib_amplitude * rib;
      }
      img[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }

  Phantom p;
  p.seed = seed;
  p.image = Tensor::from_vector({n, n}, std::move(img));
  p.masks = {to_mask_tensor(left, n), to_mask_tensor(right, n), to_mask_tensor(heart, n)};
  if (lesion) {
    if (lesion->laterality == Laterality::both) throw ValidationError("a lesion needs laterality left or right");
    p.lesion = sample_lesion(rng, p.masks, cfg, *lesion);
  }
  return p;
}

Tensor region_of(const Tensor& lung, Region region) {
  if (region == Region::whole) return lung;
  const auto h = lung.dim(0), w = lung.dim(1);
  auto m = lung.data<float>();
  std::size_t top = h, bottom = 0;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      if (m[r * w + c] > 0) {
        top = std::min(top, r);
        bottom = std::max(bottom, r);
      }
  std::vector<float> out(m.size(), 0.0f);
  if (top > bottom) return Tensor::from_vector({h, w}, std::move(out));
  // Midpoint of the bounding box in continuous coordinates; a row belongs to
  // the upper half when its center lies strictly above it.
  const double mid = static_cast<double>(top + bottom + 1) / 2.0;
  for (std::size_t r = 0; r < h; ++r) {
    const bool upper = static_cast<double>(r) + 0.5 < mid;
    if (upper != (region == Region::upper)) continue;
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = m[r * w + c];
  }
  return Tensor::from_vector({h, w}, std::move(out));
}

Tensor lesion_disk(const LesionSpec& spec, std::size_t height, std::size_t width) {
  std::vector<float> out(height * width, 0.0f);
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      const double dy = static_cast<double>(r) + 0.5 - spec.row;
      const double dx = static_cast<double>(c) + 0.5 - spec.col;
      if (dx * dx + dy * dy <= spec.radius * spec.radius) out[r * width + c] = 1.0f;
    }
  return Tensor::from_vector({height, width}, std::move(out));
}

Tensor apply_lesion(const Tensor& image, const LesionSpec& spec, const OrganMaskSet& masks) {
  if (image.ndim() != 2 || image.shape() != masks.left_lung.shape())
    throw DimensionError("apply_lesion: image and masks differ in shape");
  if (spec.amplitude < 0) throw ValidationError("lesion amplitude must be non-negative");
  if (!(spec.radius > 0)) throw ValidationError("lesion radius must be positive");
  if (!disk_inside(spec, masks.lung(spec.laterality)))
    throw ValidationError("lesion disk escapes the " + std::string(to_string(spec.laterality)) + " lung mask");
  const auto h = image.dim(0), w = image.dim(1);
  const Tensor src = image.cast(DType::f32);
  auto in = src.data<float>();
  std::vector<float> out(in.begin(), in.end());
  const double r2 = spec.radius * spec.radius;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double dy = static_cast<double>(r) + 0.5 - spec.row;
      const double dx = static_cast<double>(c) + 0.5 - spec.col;
      const double d2 = dx * dx + dy * dy;
      if (d2 > 4.0 * r2) continue;
      const double weight = std::exp(-std::log(2.0) * d2 / r2);
      out[r * w + c] = static_cast<float>(std::clamp(in[r * w + c] + spec.amplitude * weight, 0.0, 1.0));
    }
  return Tensor::from_vector({h, w}, std::move(out));
}

std::string manifest_json(const Manifest& manifest) {
  json arr = json::array();
  for (const auto& e : manifest.entries) {
    arr.push_back(json{{"id", e.id},
                       {"seed", e.seed},
                       {"image", e.image},
                       {"lesioned_image", e.lesioned_image},
                       {"mask_left", e.mask_left},
                       {"mask_right", e.mask_right},
                       {"mask_heart", e.mask_heart},
                       {"lesion", lesion_json(e.lesion)}});
  }
  return arr.dump(2) + "\n";
}

Manifest build_dataset(std::size_t n, std::uint64_t seed, const std::filesystem::path& out_dir,
                       const PhantomConfig& config) {
  config.validate();
  std::filesystem::create_directories(out_dir);
  Manifest manifest;
  manifest.root = out_dir;
  for (std::size_t i = 0; i < n; ++i) {
    ManifestEntry e;
    char id[32];
    std::snprintf(id, sizeof(id), "p%05zu", i);
    e.id = id;
    e.seed = mix_seed(seed, i);
    Rng pick(mix_seed(seed ^ 0x5EEDULL, i));
    LesionRequest req{i % 2 == 0 ? Laterality::left : Laterality::right,
                      static_cast<Region>(pick.below(3))};
    const Phantom p = generate_phantom(e.seed, config, req);
    e.lesion = *p.lesion;
    e.image = e.id + "_clean.pgm";
    e.lesioned_image = e.id + "_lesion.pgm";
    e.mask_left = e.id + "_mask_left.pgm";
    e.mask_right = e.id + "_mask_right.pgm";
    e.mask_heart = e.id + "_mask_heart.pgm";
    write_pgm(out_dir / e.image, p.image);
    write_pgm(out_dir / e.lesioned_image, apply_lesion(p.image, e.lesion, p.masks));
    write_pgm(out_dir / e.mask_left, p.masks.left_lung);
    write_pgm(out_dir / e.mask_right, p.masks.right_lung);
    write_pgm(out_dir / e.mask_heart, p.masks.heart);
    manifest.entries.push_back(std::move(e));
  }
  write_text(out_dir / "manifest.json", manifest_json(manifest));
  return manifest;
}

Manifest load_manifest(const std::filesystem::path& dir) {
  const auto path = std::filesystem::is_directory(dir) ? dir / "manifest.json" : dir;
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& ex) {
    throw FormatError("manifest " + path.string() + ": " + ex.what());
  }
  if (!j.is_array()) throw FormatError("manifest must be a JSON array");
  Manifest m;
  m.root = path.parent_path();
  try {
    for (const auto& item : j) {
      ManifestEntry e;
      e.id = item.at("id").get<std::string>();
      e.seed = item.at("seed").get<std::uint64_t>();
      e.image = item.at("image").get<std::string>();
      e.lesioned_image = item.at("lesioned_image").get<std::string>();
      e.mask_left = item.at("mask_left").get<std::string>();
      e.mask_right = item.at("mask_right").get<std::string>();
      e.mask_heart = item.at("mask_heart").get<std::string>();
      e.lesion = lesion_from_json(item.at("lesion"));
      m.entries.push_back(std::move(e));
    }
  } catch (const json::exception& ex) {
    throw FormatError("manifest " + path.string() + ": " + ex.what());
  }
  return m;
}

OrganMaskSet load_masks(const Manifest& manifest, const ManifestEntry& entry) {
  return {read_pgm(manifest.root / entry.mask_left), read_pgm(manifest.root / entry.mask_right),
          read_pgm(manifest.root / entry.mask_heart)};
}

}  // namespace attnreg
