#include <gtest/gtest.h>

#include <cmath>

#include "oracle.hpp"

using namespace flip;

namespace {

Image random_image(Rng& rng, int w, int h) {
  Image img(w, h);
  for (auto& v : img.rgb) v = static_cast<float>(uniform01(rng));
  return img;
}

GaussianPrompt random_prompt(Rng& rng, double extent) {
  return GaussianPrompt::from_frame(uniform(rng, 0, extent), uniform(rng, 0, extent), uniform(rng, 0.1, 200),
                                    uniform(rng, 0.1, 200), uniform(rng, -3.2, 3.2));
}

}  // namespace

TEST(Budget, WorkedExample) {
  SamplerConfig cfg;
  const auto p = GaussianPrompt::from_covariance(100, 100, Cov2{32.0 * 32.0, 0, 32.0 * 32.0});
  const auto b = allocate_budget(p, cfg);
  EXPECT_NEAR(gaussian_inner_area(p), 12868, 1);
  EXPECT_EQ(b.counts, (std::vector<int>{0, 0, 261, 201, 50}));
}

TEST(Budget, AlwaysSumsToN) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    SamplerConfig cfg;
    cfg.coverage = uniform(rng, 0.1, 2);
    cfg.token_count = static_cast<int>(uniform_int(rng, 5, 1024));
    const auto b = allocate_budget(random_prompt(rng, 1000), cfg);
    int sum = 0;
    for (int c : b.counts) {
      EXPECT_GE(c, 0);
      sum += c;
    }
    EXPECT_EQ(sum, cfg.token_count);
  }
}

TEST(Budget, DegeneratePromptFallsToFinest) {
  SamplerConfig cfg;
  cfg.coverage = 0.1;
  const auto b = allocate_budget(GaussianPrompt{}, cfg);
  EXPECT_EQ(b.counts.front(), cfg.token_count);
  for (double t : b.targets) EXPECT_EQ(t, 0.0);
}

TEST(Budget, MonotoneInCoverage) {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const auto p = random_prompt(rng, 500);
    SamplerConfig lo, hi;
    lo.coverage = uniform(rng, 0.1, 1.9);
    hi.coverage = uniform(rng, lo.coverage, 2.0);
    const auto a = allocate_budget(p, lo), b = allocate_budget(p, hi);
    for (std::size_t k = 0; k < a.targets.size(); ++k) EXPECT_LE(a.targets[k], b.targets[k]);
  }
}

TEST(HashGrid, EmptyProbeIsZero) {
  SpatialHashGrid g(1);
  EXPECT_EQ(grid_probe(g, PatchSpec{10.3, 4.7, 16, 4}), 0.0);
}

TEST(HashGrid, IdenticalPatchScoresOne) {
  SpatialHashGrid g(1);
  const PatchSpec s{40.0, 40.0, 16, 4};
  g.insert(s);
  EXPECT_DOUBLE_EQ(grid_probe(g, s), 1.0);
  EXPECT_EQ(g.touched_cells(), 256u);
}

TEST(HashGrid, HalfOverlap) {
  SpatialHashGrid g(1);
  g.insert(PatchSpec{8.0, 8.0, 16, 4});
  EXPECT_DOUBLE_EQ(grid_probe(g, PatchSpec{16.0, 8.0, 16, 4}), 0.5);
}

TEST(HashGrid, CountsGrowAndSurviveRehash) {
  SpatialHashGrid g(2);
  for (int i = 0; i < 300; ++i) g.insert(PatchSpec{i * 4.0 + 2, 2.0, 4, 2});
  g.insert(PatchSpec{2.0, 2.0, 4, 2});
  EXPECT_EQ(g.count(0, 0), 2u);
  EXPECT_EQ(g.count(1, 1), 2u);
  EXPECT_EQ(g.count(2, 0), 1u);
  EXPECT_EQ(g.count(-5, 0), 0u);
  EXPECT_EQ(g.touched_cells(), 1200u);
}

TEST(Sampling, ReplayRespectsThresholds) {
  Rng rng(8);
  for (int run = 0; run < 200; ++run) {
    SamplerConfig cfg;
    cfg.tau_overlap = uniform(rng, 0, 4);
    cfg.max_attempts_per_patch = static_cast<int>(uniform_int(rng, 1, 64));
    const auto p = random_prompt(rng, 256);
    const auto b = allocate_budget(p, cfg);
    SamplingTrace trace;
    const auto specs = sample_patch_specs(256, 256, p, b, cfg, rng, &trace);
    ASSERT_EQ(specs.size(), static_cast<std::size_t>(cfg.token_count));
    SpatialHashGrid g(cfg.effective_grid_cell());
    for (std::size_t i = 0; i < specs.size(); ++i) {
      EXPECT_LE(grid_probe(g, specs[i]), trace.thresholds[i]);
      g.insert(specs[i]);
    }
  }
}

TEST(Sampling, CompletesForTinySigma) {
  SamplerConfig cfg;
  cfg.tau_overlap = 4;
  Rng rng(3);
  const auto p = GaussianPrompt::from_covariance(30, 30, Cov2{0.01, 0, 0.01});
  const auto specs = sample_patch_specs(64, 64, p, allocate_budget(p, cfg), cfg, rng);
  EXPECT_EQ(specs.size(), 512u);
  cfg.tau_overlap = 0;
  const auto strict = sample_patch_specs(64, 64, p, allocate_budget(p, cfg), cfg, rng);
  EXPECT_EQ(strict.size(), 512u);
}

TEST(Sampling, CentersFollowPrompt) {
  SamplerConfig cfg;
  cfg.sizes = {1};
  cfg.token_count = 10000;
  cfg.tau_overlap = 4;
  const auto p = GaussianPrompt::from_frame(1000.3, 999.6, 40, 15, 0.6);
  Rng rng(12);
  const auto specs = sample_patch_specs(2000, 2000, p, allocate_budget(p, cfg), cfg, rng);
  double sx = 0, sy = 0;
  for (const auto& s : specs) {
    sx += s.center_x;
    sy += s.center_y;
  }
  const double n = static_cast<double>(specs.size());
  EXPECT_LT(std::abs(sx / n - p.mu_x), 3 * p.sigma_x() / std::sqrt(n));
  EXPECT_LT(std::abs(sy / n - p.mu_y), 3 * p.sigma_y() / std::sqrt(n));
}

TEST(Sampling, DeterministicForSeed) {
  SamplerConfig cfg;
  const auto p = GaussianPrompt::from_frame(100, 80, 20, 9, 0.2);
  Rng a(99), b(99);
  EXPECT_EQ(sample_patch_specs(300, 300, p, allocate_budget(p, cfg), cfg, a),
            sample_patch_specs(300, 300, p, allocate_budget(p, cfg), cfg, b));
}

TEST(Sampling, FootprintsStayInsideImage) {
  SamplerConfig cfg;
  Rng rng(6);
  const auto p = GaussianPrompt::from_frame(2, 3, 40, 30, 0.0);
  for (const auto& s : sample_patch_specs(100, 80, p, allocate_budget(p, cfg), cfg, rng)) {
    EXPECT_GE(s.center_x - 0.5 * s.size, 0.0);
    EXPECT_LE(s.center_x + 0.5 * s.size, 100.0);
    EXPECT_GE(s.center_y - 0.5 * s.size, 0.0);
    EXPECT_LE(s.center_y + 0.5 * s.size, 80.0);
  }
}

TEST(Extraction, IntegerAlignedCopiesPixels) {
  Rng rng(2);
  const Image img = random_image(rng, 40, 30);
  for (int size : {1, 2, 4, 8, 16}) {
    // Block starting at (5, 7): its center sits at 5 + size/2.
    const PatchSpec s{5 + 0.5 * size, 7 + 0.5 * size, size, 0};
    const Patch p = extract_patch(img, s);
    for (int v = 0; v < size; ++v)
      for (int u = 0; u < size; ++u)
        for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(p.pixels[(v * size + u) * 3 + ch], img.at(5 + u, 7 + v)[ch]);
  }
}

TEST(Extraction, ConstantImage) {
  Image img(20, 20);
  std::fill(img.rgb.begin(), img.rgb.end(), 0.3f);
  const Patch p = extract_patch(img, PatchSpec{9.37, 4.21, 8, 3});
  for (float v : p.pixels) EXPECT_FLOAT_EQ(v, 0.3f);
}

TEST(Extraction, MatchesBilinearOracle) {
  Rng rng(10);
  const Image img = random_image(rng, 97, 61);
  for (int i = 0; i < 100; ++i) {
    const int size = 1 << uniform_int(rng, 0, 4);
    const PatchSpec s{clamp_center(uniform(rng, -5, 105), size, 97), clamp_center(uniform(rng, -5, 70), size, 61), size, 0};
    const Patch p = extract_patch(img, s);
    const double off = 0.5 * (size - 1);
    for (int v = 0; v < size; ++v)
      for (int u = 0; u < size; ++u)
        for (int ch = 0; ch < 3; ++ch)
          EXPECT_NEAR(p.pixels[(v * size + u) * 3 + ch], oracle::bilinear(img, s.center_x + u - off, s.center_y + v - off, ch), 1e-6);
  }
}

TEST(Overlay, RecordsAndColors) {
  Rng rng(1);
  Image img(64, 64);
  const auto p = GaussianPrompt::from_frame(32, 32, 8, 5, 0.3);
  SamplerConfig cfg;
  cfg.token_count = 40;
  const auto specs = sample_patch_specs(64, 64, p, allocate_budget(p, cfg), cfg, rng);
  std::ostringstream os;
  write_patch_records(os, specs);
  std::istringstream is(os.str());
  std::string header;
  std::getline(is, header);
  int idx, size, lines = 0;
  double cx, cy;
  while (is >> idx >> size >> cx >> cy) {
    EXPECT_EQ(specs[lines].size, size);
    EXPECT_NEAR(specs[lines].center_x, cx, 1e-6);
    ++lines;
  }
  EXPECT_EQ(lines, 40);
  const Image ov = render_patch_overlay(img, specs);
  EXPECT_EQ(ov.width, 64);
  EXPECT_EQ(patch_color(16)[2], 0.8f);  // purple for the coarsest patches
}
