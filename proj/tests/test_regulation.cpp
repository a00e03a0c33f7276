#include <doctest.h>

#include <cmath>

#include "attnreg/errors.hpp"
#include "attnreg/regulation.hpp"
#include "test_util.hpp"

using namespace attnreg;
using testutil::random_tensor;

namespace {

// Random row-stochastic [rows, cols] map.
Tensor random_stochastic(Rng& rng, std::size_t rows, std::size_t cols, DType dtype = DType::f64) {
  std::vector<double> v(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < cols; ++j) s += v[i * cols + j] = std::exp(3 * rng.uniform(-1, 1));
    for (std::size_t j = 0; j < cols; ++j) v[i * cols + j] /= s;
  }
  return Tensor::from_values({rows, cols}, v, dtype);
}

double row_sum(const Tensor& m, std::size_t row) {
  double s = 0;
  for (std::size_t j = 0; j < m.dim(1); ++j) s += m.at(row * m.dim(1) + j);
  return s;
}

Tensor block_mask(std::size_t side, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  std::vector<double> v(side * side, 0.0);
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = c0; c < c1; ++c) v[r * side + c] = 1;
  return Tensor::from_values({side, side}, v, DType::f32);
}

// Plain-sum concentration oracle.
double concentration_oracle(const Tensor& a, std::size_t k, const Tensor& omega) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    num += a.at(i * a.dim(1) + k) * omega.at(i);
    den += a.at(i * a.dim(1) + k);
  }
  return num / den;
}

OrganMaskSet toy_masks() {
  // Patient right lung on the image left.
  return {block_mask(16, 3, 13, 9, 14), block_mask(16, 3, 13, 2, 7), block_mask(16, 9, 14, 7, 9)};
}

}  // namespace

TEST_CASE("downsample_mask") {
  CHECK(downsample_mask(Tensor::full({64, 64}, 1.0), 16).bit_equal(Tensor::full({16, 16}, 1.0)));
  CHECK(downsample_mask(Tensor::zeros({64, 64}), 8).bit_equal(Tensor::zeros({8, 8})));
  // Half of the first 4×4 block covered.
  const Tensor m = block_mask(64, 0, 2, 0, 4);
  const Tensor d = downsample_mask(m, 16);
  CHECK(d.at(0) == 0.5);
  CHECK(d.at(1) == 0.0);
  CHECK_THROWS_AS(downsample_mask(m, 6), ValidationError);
}

TEST_CASE("dilate") {
  std::vector<double> v(25, 0.0);
  v[12] = 0.5;
  const Tensor d = dilate(Tensor::from_values({5, 5}, v, DType::f32), 1);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 5; ++c) {
      const bool near = r >= 1 && r <= 3 && c >= 1 && c <= 3;
      CHECK(d.at(r * 5 + c) == (near ? 0.5 : 0.0));
    }
  CHECK(dilate(Tensor::from_values({5, 5}, v, DType::f32), 0).at(11) == 0.0);
}

TEST_CASE("gate_self_attention") {
  Rng rng(1);
  const std::size_t n = 16;
  const Tensor s = random_stochastic(rng, n, n);

  SUBCASE("full mask is a no-op") { CHECK(gate_self_attention(s, Tensor::full({4, 4}, 1.0, DType::f64)).bit_equal(s)); }

  SUBCASE("binary mask against a brute-force gate") {
    std::vector<double> mv(n, 1.0);
    mv[3] = mv[7] = mv[8] = 0.0;
    const Tensor m = Tensor::from_values({n}, mv, DType::f64);
    const Tensor g = gate_self_attention(s, m);
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0;
      for (std::size_t j = 0; j < n; ++j) total += s.at(i * n + j) * mv[j];
      for (std::size_t j = 0; j < n; ++j) CHECK(g.at(i * n + j) == doctest::Approx(s.at(i * n + j) * mv[j] / total).epsilon(1e-12));
      CHECK(g.at(i * n + 3) == 0.0);
      CHECK(std::abs(row_sum(g, i) - 1.0) <= 1e-12);
    }
    // Idempotent for binary masks.
    const Tensor twice = gate_self_attention(g, m);
    for (std::size_t i = 0; i < n * n; ++i) CHECK(twice.at(i) == doctest::Approx(g.at(i)).epsilon(1e-14));
  }

  SUBCASE("rows without support are kept") {
    std::vector<double> sv(4 * 4, 0.0);
    sv[0] = 1.0;                                   // row 0 attends only to key 0
    for (std::size_t j = 0; j < 4; ++j) sv[4 + j] = 0.25;
    sv[8] = sv[9] = 0.5;
    sv[12 + 3] = 1.0;
    const Tensor s4 = Tensor::from_values({4, 4}, sv, DType::f64);
    const Tensor m = Tensor::from_values({4}, {0.0, 1.0, 1.0, 1.0}, DType::f64);
    const Tensor g = gate_self_attention(s4, m);
    CHECK(g.at(0) == 1.0);  // kept as it was
    CHECK(g.at(4) == 0.0);
    CHECK(g.at(5) == doctest::Approx(1.0 / 3));
    CHECK(g.at(9) == 1.0);
    CHECK(g.at(15) == 1.0);
  }

  SUBCASE("orientations") {
    std::vector<double> mv(n, 1.0);
    mv[0] = 0.0;
    mv[5] = 0.5;
    const Tensor m = Tensor::from_values({n}, mv, DType::f64);
    const Tensor q = gate_self_attention(s, m, GateOrientation::query);
    // A row scaled as a whole renormalizes back to itself; zeroed rows are kept.
    for (std::size_t i = 0; i < n * n; ++i) CHECK(q.at(i) == doctest::Approx(s.at(i)).epsilon(1e-12));
    const Tensor b = gate_self_attention(s, m, GateOrientation::both);
    const Tensor k = gate_self_attention(s, m, GateOrientation::key);
    for (std::size_t i = 1; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) CHECK(b.at(i * n + j) == doctest::Approx(k.at(i * n + j)).epsilon(1e-12));
  }

  SUBCASE("gradient") {
    std::vector<double> mv(n);
    for (auto& x : mv) x = rng.uniform(0, 1);
    mv[2] = 1.0;
    const Tensor m = Tensor::from_values({n}, mv, DType::f64);
    const Tensor w = random_tensor(rng, {n, n});
    auto f = [&](const std::vector<Tensor>& in) { return sum(mul(gate_self_attention(in[0], m), w)); };
    CHECK(testutil::gradcheck_error(f, {s}, 1e-6) <= 1e-6);
  }

  CHECK_THROWS_AS(gate_self_attention(s, Tensor::full({3}, 1.0, DType::f64)), DimensionError);
}

TEST_CASE("select_roi") {
  const auto masks = toy_masks();
  const auto left = select_roi(masks, Prompt::make(Pathology::lesion, Laterality::left, Region::whole));
  CHECK(left.mask.bit_equal(masks.left_lung));
  CHECK(left.laterality == Laterality::left);

  const auto up = select_roi(masks, Prompt::make(Pathology::lesion, Laterality::right, Region::upper));
  // Right lung rows 3..12, midpoint (3 + 12 + 1) / 2 = 8.
  for (std::size_t i = 0; i < 256; ++i)
    if (up.mask.at(i) > 0) {
      CHECK(masks.right_lung.at(i) > 0);
      CHECK(i / 16 < 8);
    }

  const auto both = select_roi(masks, Prompt::make(Pathology::lesion, Laterality::both, Region::whole));
  for (std::size_t i = 0; i < 256; ++i)
    CHECK(both.mask.at(i) == std::max(masks.left_lung.at(i), masks.right_lung.at(i)));

  // A missing region means the whole lung.
  CHECK(select_roi(masks, Prompt::make(Pathology::lesion, Laterality::left)).mask.bit_equal(masks.left_lung));
  CHECK_THROWS_AS(select_roi(masks, Prompt::make(Pathology::lesion)), ValidationError);
  OrganMaskSet empty{Tensor::zeros({16, 16}), masks.right_lung, masks.heart};
  CHECK_THROWS_AS(select_roi(empty, Prompt::make(Pathology::lesion, Laterality::left, Region::whole)), ValidationError);
}

TEST_CASE("build_prior") {
  for (double sigma : {0.0, 0.7, 1.0, 2.5}) {
    const Tensor o = build_prior(Tensor::full({64, 64}, 1.0), 16, sigma);
    for (std::size_t i = 0; i < o.numel(); ++i) CHECK(o.at(i) == 1.0);
  }
  const Tensor roi = block_mask(64, 8, 40, 4, 28);
  const Tensor pooled = downsample_mask(roi, 16);
  CHECK(build_prior(roi, 16, 0.0).bit_equal(pooled));
  CHECK(build_prior(Tensor::zeros({64, 64}), 8, 1.0).bit_equal(Tensor::zeros({8, 8})));

  // Impulse: one fully covered cell at (6, 9).
  const Tensor impulse = block_mask(64, 24, 28, 36, 40);
  const Tensor o = build_prior(impulse, 16, 1.0);
  CHECK(o.at(6 * 16 + 9) == 1.0);
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) {
      const double d2 = std::pow(static_cast<double>(r) - 6, 2) + std::pow(static_cast<double>(c) - 9, 2);
      // Separable taps reach 3 cells per axis.
      const bool in_support = std::abs(static_cast<double>(r) - 6) <= 3 && std::abs(static_cast<double>(c) - 9) <= 3;
      if (in_support)
        CHECK(o.at(r * 16 + c) == doctest::Approx(std::exp(-0.5 * d2)).epsilon(1e-6));
      else
        CHECK(o.at(r * 16 + c) == 0.0);
    }
  // Radially decreasing along a row.
  for (std::size_t c = 9; c < 12; ++c) CHECK(o.at(6 * 16 + c + 1) < o.at(6 * 16 + c));
}

TEST_CASE("reweight_cross_attention") {
  SUBCASE("hand example") {
    // [0.5, 0.5] with column 1 scaled by 1 + 1.5: [0.5, 1.25] / 1.75.
    const Tensor a = Tensor::from_values({1, 2}, {0.5, 0.5}, DType::f64);
    const std::size_t k[] = {1};
    const Tensor r = reweight_cross_attention(a, k, Tensor::full({1}, 1.0, DType::f64), 1.5, true);
    CHECK(r.at(0) == doctest::Approx(0.5 / 1.75).epsilon(1e-15));
    CHECK(r.at(1) == doctest::Approx(1.25 / 1.75).epsilon(1e-15));
    // η = 3 gives [0.5, 2.0] / 2.5.
    const Tensor r3 = reweight_cross_attention(a, k, Tensor::full({1}, 1.0, DType::f64), 3.0, true);
    CHECK(r3.at(0) == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(r3.at(1) == doctest::Approx(0.8).epsilon(1e-15));
  }
  Rng rng(9);
  const Tensor a = random_stochastic(rng, 64, 8);
  const std::size_t k[] = {0, 3};
  const Tensor omega = random_tensor(rng, {64}, DType::f64, 0.0, 1.0);
  SUBCASE("neutral settings") {
    CHECK(reweight_cross_attention(a, k, omega, 0.0, true).bit_equal(a));
    CHECK(reweight_cross_attention(a, k, Tensor::zeros({64}, DType::f64), 1.5, true).bit_equal(a));
    CHECK(reweight_cross_attention(a, k, omega, 1.5, false).bit_equal(a));
  }
  SUBCASE("rows stay stochastic") {
    const Tensor r = reweight_cross_attention(a, k, omega, 1.5, true);
    for (std::size_t i = 0; i < 64; ++i) CHECK(std::abs(row_sum(r, i) - 1.0) <= 1e-12);
  }
  SUBCASE("gradient") {
    const Tensor w = random_tensor(rng, {64, 8});
    auto f = [&](const std::vector<Tensor>& in) { return sum(mul(reweight_cross_attention(in[0], k, omega, 1.5, true), w)); };
    CHECK(testutil::gradcheck_error(f, {a}, 1e-6) <= 1e-6);
  }
  const std::size_t bad[] = {8};
  CHECK_THROWS_AS(reweight_cross_attention(a, bad, omega, 1.5, true), ValidationError);
  CHECK_THROWS_AS(reweight_cross_attention(a, k, Tensor::zeros({10}, DType::f64), 1.5, true), DimensionError);
}

// Holds for binary Ω: inside cells gain a factor ≥ 1, outside cells keep
// theirs. With soft Ω a low-Ω cell holding little mass can out-gain a high-Ω
// cell holding much, so the guarantee is stated for binary support only.
TEST_CASE("reweighting never lowers concentration (1000 random maps)") {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = 4 + rng.below(60), cols = 2 + rng.below(7);
    const Tensor a = random_stochastic(rng, rows, cols);
    // Binary Ω on a random subset of cells.
    std::vector<double> o(rows, 0.0);
    for (auto& x : o)
      if (rng.uniform() < 0.4) x = 1.0;
    const Tensor omega = Tensor::from_values({rows}, o, DType::f64);
    const std::size_t k = rng.below(cols);
    const std::size_t ks[] = {k};
    const double eta = rng.uniform(0.0, 4.0);
    const Tensor r = reweight_cross_attention(a, ks, omega, eta, true);
    CHECK(concentration_oracle(r, k, omega) >= concentration_oracle(a, k, omega) - 1e-12);
  }
}

TEST_CASE("concentration_score") {
  Rng rng(5);
  const Tensor col = random_tensor(rng, {16}, DType::f64, 0.0, 1.0);
  CHECK(concentration_score(col, Tensor::full({16}, 1.0, DType::f64)).item() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(concentration_score(col, Tensor::zeros({16}, DType::f64)).item() == 0.0);

  // Ω covers cells holding 30% of the mass.
  const Tensor c = Tensor::from_values({4}, {0.1, 0.2, 0.3, 0.4}, DType::f64);
  const Tensor o = Tensor::from_values({4}, {1, 1, 0, 0}, DType::f64);
  CHECK(concentration_score(c, o).item() == doctest::Approx(0.3).epsilon(1e-14));

  const Tensor omega = random_tensor(rng, {16}, DType::f64, 0.0, 1.0);
  const double s = concentration_score(col, omega).item();
  CHECK(s >= 0.0);
  CHECK(s <= 1.0);
  auto f = [&](const std::vector<Tensor>& in) { return concentration_score(in[0], omega); };
  CHECK(testutil::gradcheck_error(f, {col}, 1e-6) <= 1e-6);

  CHECK_THROWS_AS(concentration_score(Tensor::zeros({16}, DType::f64), omega), ValidationError);
  CHECK_THROWS_AS(concentration_score(col, Tensor::zeros({4}, DType::f64)), DimensionError);
}

TEST_CASE("pathology_energy") {
  // Two cross records at q=2 with Ω covering cells {0,1}.
  SpatialPrior prior;
  prior.omega[2] = Tensor::from_values({4}, {1, 1, 0, 0}, DType::f64);
  auto record = [](std::size_t id, std::vector<double> col0) {
    std::vector<double> v;
    for (double x : col0) {
      v.push_back(x);
      v.push_back(1 - x);
    }
    const Tensor m = Tensor::from_values({4, 2}, v, DType::f64);
    return AttentionRecord{id, AttentionKind::cross, 2, m, m};
  };
  const std::size_t k[] = {0};
  // Column masses: 20% and 60% inside Ω.
  const std::vector<AttentionRecord> recs{record(1, {0.1, 0.1, 0.4, 0.4}), record(3, {0.3, 0.3, 0.2, 0.2})};
  CHECK(pathology_energy(recs, prior, k).item() == doctest::Approx(0.6).epsilon(1e-14));
  CHECK(mean_concentration(recs, prior, k) == doctest::Approx(0.4).epsilon(1e-14));

  SpatialPrior ones, zeros;
  ones.omega[2] = Tensor::full({4}, 1.0, DType::f64);
  zeros.omega[2] = Tensor::zeros({4}, DType::f64);
  CHECK(pathology_energy(recs, ones, k).item() == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(pathology_energy(recs, zeros, k).item() == 1.0);

  // Self records and unregulated resolutions are ignored.
  std::vector<AttentionRecord> mixed = recs;
  const Tensor s = Tensor::full({4, 4}, 0.25, DType::f64);
  mixed.push_back({0, AttentionKind::self, 2, s, s});
  AttentionRecord other = record(5, {1, 0, 0, 0});
  other.q = 4;
  mixed.push_back(other);
  CHECK(pathology_energy(mixed, prior, k).item() == doctest::Approx(0.6).epsilon(1e-14));

  CHECK_THROWS_AS(pathology_energy({}, prior, k), ValidationError);
  CHECK_THROWS_AS(pathology_energy(recs, prior, {}), ValidationError);
}

TEST_CASE("alpha schedule, latent correction and windows") {
  CHECK(alpha_schedule(0, 20, 0.05) == 0.05);
  CHECK(alpha_schedule(10, 20, 0.05) == doctest::Approx(0.025).epsilon(1e-15));
  for (std::size_t i = 0; i < 20; ++i) CHECK(alpha_schedule(i, 20, 0.05) > 0);
  CHECK_THROWS_AS(alpha_schedule(20, 20, 0.05), ValidationError);

  Rng rng(3);
  const Tensor z = random_tensor(rng, {8, 8}, DType::f32);
  const Tensor g = random_tensor(rng, {8, 8}, DType::f32);
  CHECK(latent_correction(z, Tensor::zeros({8, 8}), 0.05).bit_equal(z));
  CHECK(latent_correction(z, g, 0.0).bit_equal(z));
  const Tensor moved = latent_correction(z, g, 0.5);
  for (std::size_t i = 0; i < 64; ++i) CHECK(moved.at(i) == doctest::Approx(z.at(i) - 0.5 * g.at(i)).epsilon(1e-6));
  CHECK_THROWS_AS(latent_correction(z, Tensor::full({8, 8}, NAN), 0.05), NumericError);
  CHECK_THROWS_AS(latent_correction(z, Tensor::zeros({4, 4}), 0.05), DimensionError);

  CHECK(window_length(50, 0.4, WindowMode::early) == 20);
  for (std::size_t j = 0; j < 50; ++j) CHECK(in_window(j, 50, 0.4, WindowMode::early) == (j < 20));
  // Countdown index t = 50 - j below 20 selects the last 19 iterations.
  CHECK(window_length(50, 0.4, WindowMode::late) == 19);
  CHECK(in_window(31, 50, 0.4, WindowMode::late));
  CHECK_FALSE(in_window(30, 50, 0.4, WindowMode::late));
  CHECK(window_position(31, 50, 0.4, WindowMode::late) == 0);
  CHECK(window_length(50, 0.0, WindowMode::early) == 0);
  CHECK(window_length(50, 1.0, WindowMode::early) == 50);
  CHECK(window_length(7, 0.3, WindowMode::early) == 3);
}

TEST_CASE("regulation context and hooks") {
  const auto masks = toy_masks();
  RegulationConfig rc;
  rc.q_levels = {4};
  const auto prompt = Prompt::make(Pathology::lesion, Laterality::left, Region::upper);
  const auto ctx = make_regulation_context(masks, prompt, rc, DType::f64);
  CHECK(ctx.k_path == std::vector<std::size_t>{0});
  CHECK(ctx.anatomy_tokens == std::vector<std::size_t>{1, 2});
  CHECK(ctx.prior.at(4).numel() == 16);
  CHECK(ctx.anatomy.at(4).numel() == 16);
  double peak = 0;
  for (double v : ctx.prior.at(4).to_doubles()) peak = std::max(peak, v);
  CHECK(peak == 1.0);
  for (double v : ctx.anatomy.at(4).to_doubles()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  Rng rng(4);
  const Tensor s = random_stochastic(rng, 16, 16);
  const Tensor a = random_stochastic(rng, 16, 8);
  RegulationConfig off = rc;
  off.enable_anat_gate = off.enable_path_reweight = off.enable_latent_correct = false;
  RegulationHooks none(ctx, off, true, true);
  CHECK(none.on_self(s, 0, 4).bit_equal(s));
  CHECK(none.on_cross(a, 1, 4).bit_equal(a));

  RegulationHooks cond(ctx, rc, true, true), uncond(ctx, rc, false, true), late(ctx, rc, true, false);
  CHECK_FALSE(cond.on_self(s, 0, 4).bit_equal(s));
  CHECK_FALSE(uncond.on_self(s, 0, 4).bit_equal(s));
  CHECK_FALSE(cond.on_cross(a, 1, 4).bit_equal(a));
  CHECK(uncond.on_cross(a, 1, 4).bit_equal(a));
  CHECK(late.on_cross(a, 1, 4).bit_equal(a));
  // Unregulated resolutions pass through.
  const Tensor s2 = random_stochastic(rng, 4, 4);
  CHECK(cond.on_self(s2, 0, 2).bit_equal(s2));

  RegulationConfig tokens = rc;
  tokens.gate_anatomy_tokens = true;
  tokens.enable_path_reweight = false;
  RegulationHooks tok(ctx, tokens, true, true);
  const Tensor t = tok.on_cross(a, 1, 4);
  for (std::size_t i = 0; i < 16; ++i) CHECK(std::abs(row_sum(t, i) - 1.0) <= 1e-12);

  RegulationConfig bad = rc;
  bad.mu = 1.5;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = rc;
  bad.eta = -1;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}
