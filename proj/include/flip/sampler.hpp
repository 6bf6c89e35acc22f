#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <span>
#include <vector>

#include "flip/error.hpp"
#include "flip/geometry.hpp"
#include "flip/image.hpp"
#include "flip/rng.hpp"

namespace flip {

inline std::vector<int> default_patch_sizes() { return {1, 2, 4, 8, 16}; }

struct SamplerConfig {
  double coverage = 1.0;      // c
  double tau_overlap = 1.0;   // mean pre-existing coverage tolerated per candidate
  int token_count = 512;      // N
  int max_attempts_per_patch = 64;
  int grid_cell = 0;          // 0 selects the finest patch size
  std::vector<int> sizes = default_patch_sizes();

  void validate() const {
    if (!(coverage >= 0.1 && coverage <= 2.0)) throw Error("bad-config", "coverage must lie in [0.1, 2]");
    if (!(tau_overlap >= 0.0 && tau_overlap <= 4.0)) throw Error("bad-config", "tau_overlap must lie in [0, 4]");
    if (sizes.empty()) throw Error("bad-config", "at least one patch size is required");
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (sizes[i] < 1) throw Error("bad-config", "patch sizes must be positive");
      if (i > 0 && sizes[i] <= sizes[i - 1]) throw Error("bad-config", "patch sizes must be strictly ascending");
    }
    if (token_count < static_cast<int>(sizes.size()))
      throw Error("bad-config", "token_count must be at least the number of patch sizes");
    if (max_attempts_per_patch < 1) throw Error("bad-config", "max_attempts_per_patch must be >= 1");
    if (grid_cell < 0) throw Error("bad-config", "grid_cell must be >= 0");
  }

  int effective_grid_cell() const { return grid_cell > 0 ? grid_cell : sizes.front(); }
};

/// Per-resolution patch counts; sizes ascending, counts aligned with sizes.
struct PatchBudget {
  std::vector<int> sizes;
  std::vector<int> counts;
  std::vector<double> targets;  // unclipped N-hat per size
  int total = 0;
};

/// Area of the 2-sigma ellipse, standing in for the Gaussian's inner area.
inline double gaussian_inner_area(const GaussianPrompt& p) {
  return std::numbers::pi * (2.0 * p.sigma_a) * (2.0 * p.sigma_b);
}

inline PatchBudget allocate_budget(const GaussianPrompt& prompt, const SamplerConfig& config) {
  const auto& sizes = config.sizes;
  const int k = static_cast<int>(sizes.size());
  PatchBudget b;
  b.sizes = sizes;
  b.counts.assign(k, 0);
  b.targets.assign(k, 0.0);
  b.total = config.token_count;
  const double area = gaussian_inner_area(prompt);
  int remaining = config.token_count;
  for (int i = k - 1; i >= 0; --i) {
    const double p = sizes[i];
    b.targets[i] = std::round(config.coverage * area / (p * p));
    const double clipped = std::min(b.targets[i], static_cast<double>(remaining));
    b.counts[i] = static_cast<int>(clipped);
    remaining -= b.counts[i];
  }
  b.counts[0] += remaining;
  return b;
}

struct PatchSpec {
  double center_x = 0.0;
  double center_y = 0.0;
  int size = 1;
  int resolution_index = 0;

  bool operator==(const PatchSpec&) const = default;
};

/// Sparse coverage counter over square cells of side `cell`. Open
/// addressing with linear probing; only touched cells are stored.
class SpatialHashGrid {
 public:
  explicit SpatialHashGrid(int cell = 1) : cell_(cell) {
    if (cell < 1) throw Error("bad-config", "grid cell must be >= 1");
    slots_.resize(64);
  }

  int cell() const { return cell_; }
  std::size_t touched_cells() const { return used_; }

  struct CellRange {
    std::int64_t x0, y0, n;
  };

  /// Cells covered by a patch footprint: the footprint edges are snapped to
  /// the grid, so a patch of size p always covers ceil(p / cell)^2 cells.
  CellRange footprint(const PatchSpec& s) const {
    const double g = cell_;
    const std::int64_t n = std::max<std::int64_t>(1, (s.size + cell_ - 1) / cell_);
    const double half = 0.5 * s.size;
    return {static_cast<std::int64_t>(std::floor((s.center_x - half) / g + 0.5)),
            static_cast<std::int64_t>(std::floor((s.center_y - half) / g + 0.5)), n};
  }

  std::uint32_t count(std::int64_t cx, std::int64_t cy) const {
    const std::uint64_t key = pack(cx, cy);
    for (std::size_t i = hash(key) & (slots_.size() - 1);; i = (i + 1) & (slots_.size() - 1)) {
      const Slot& s = slots_[i];
      if (s.count == 0) return 0;
      if (s.key == key) return s.count;
    }
  }

  /// Mean existing coverage over the cells the patch footprint touches.
  double probe(const PatchSpec& spec) const {
    const CellRange r = footprint(spec);
    std::uint64_t sum = 0;
    if (used_ == 0) return 0.0;
    for (std::int64_t y = r.y0; y < r.y0 + r.n; ++y)
      for (std::int64_t x = r.x0; x < r.x0 + r.n; ++x) sum += count(x, y);
    return static_cast<double>(sum) / static_cast<double>(r.n * r.n);
  }

  void insert(const PatchSpec& spec) {
    const CellRange r = footprint(spec);
    for (std::int64_t y = r.y0; y < r.y0 + r.n; ++y)
      for (std::int64_t x = r.x0; x < r.x0 + r.n; ++x) increment(x, y);
  }

  void clear() {
    std::fill(slots_.begin(), slots_.end(), Slot{});
    used_ = 0;
  }

 private:
  struct Slot {
    std::uint64_t key = 0;
    std::uint32_t count = 0;  // 0 marks an empty slot
  };

  static std::uint64_t pack(std::int64_t x, std::int64_t y) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(x)) << 32) |
           static_cast<std::uint32_t>(y);
  }
  static std::size_t hash(std::uint64_t key) {
    key ^= key >> 33;
    key *= 0xff51afd7ed558ccdull;
    key ^= key >> 33;
    return static_cast<std::size_t>(key);
  }

  void increment(std::int64_t cx, std::int64_t cy) {
    if ((used_ + 1) * 2 > slots_.size()) grow();
    const std::uint64_t key = pack(cx, cy);
    for (std::size_t i = hash(key) & (slots_.size() - 1);; i = (i + 1) & (slots_.size() - 1)) {
      Slot& s = slots_[i];
      if (s.count == 0) {
        s.key = key;
        s.count = 1;
        ++used_;
        return;
      }
      if (s.key == key) {
        ++s.count;
        return;
      }
    }
  }

  void grow() {
    std::vector<Slot> old(slots_.size() * 2);
    old.swap(slots_);
    for (const Slot& s : old) {
      if (s.count == 0) continue;
      for (std::size_t i = hash(s.key) & (slots_.size() - 1);; i = (i + 1) & (slots_.size() - 1)) {
        if (slots_[i].count == 0) {
          slots_[i] = s;
          break;
        }
      }
    }
  }

  int cell_;
  std::vector<Slot> slots_;
  std::size_t used_ = 0;
};

inline double grid_probe(const SpatialHashGrid& grid, const PatchSpec& spec) { return grid.probe(spec); }

/// Keeps the footprint [c - p/2, c + p/2] inside [0, extent].
inline double clamp_center(double c, int size, int extent) {
  const double half = 0.5 * size;
  if (extent <= size) return 0.5 * extent;
  return std::clamp(c, half, extent - half);
}

/// Threshold that was in force when each spec was accepted.
struct SamplingTrace {
  std::vector<double> thresholds;
  std::size_t attempts = 0;
  std::size_t relaxations = 0;
};

/// Draws patch centers from N(mu, Sigma), coarse to fine, rejecting any
/// candidate whose mean pre-existing coverage exceeds the overlap threshold.
/// After max_attempts_per_patch consecutive rejections the threshold doubles
/// (0 relaxes to 1) and stays relaxed for the rest of that resolution.
inline std::vector<PatchSpec> sample_patch_specs(int image_width, int image_height, const GaussianPrompt& prompt,
                                                 const PatchBudget& budget, const SamplerConfig& config, Rng& rng,
                                                 SamplingTrace* trace = nullptr) {
  SpatialHashGrid grid(config.effective_grid_cell());
  std::vector<PatchSpec> out;
  out.reserve(budget.total);
  if (trace) trace->thresholds.reserve(budget.total);
  const double ca = prompt.theta_a, sa = prompt.theta_b;
  for (int i = static_cast<int>(budget.sizes.size()) - 1; i >= 0; --i) {
    const int size = budget.sizes[i];
    double threshold = config.tau_overlap;
    for (int n = 0; n < budget.counts[i]; ++n) {
      int failures = 0;
      for (;;) {
        const NormalPair z = box_muller(rng);
        const double a = z.z0 * prompt.sigma_a;
        const double b = z.z1 * prompt.sigma_b;
        PatchSpec spec{clamp_center(prompt.mu_x + ca * a - sa * b, size, image_width),
                       clamp_center(prompt.mu_y + sa * a + ca * b, size, image_height), size, i};
        if (trace) ++trace->attempts;
        if (grid.probe(spec) <= threshold) {
          grid.insert(spec);
          out.push_back(spec);
          if (trace) trace->thresholds.push_back(threshold);
          break;
        }
        if (++failures >= config.max_attempts_per_patch) {
          threshold = threshold > 0.0 ? 2.0 * threshold : 1.0;
          failures = 0;
          if (trace) ++trace->relaxations;
        }
      }
    }
  }
  return out;
}

/// Patch content: size x size x 3 floats, row-major (v, u, channel).
struct Patch {
  PatchSpec spec;
  std::vector<float> pixels;
};

namespace detail {

struct Tap {
  int i0, i1;
  float w;  // weight of i1
};

// Edge-clamped bilinear tap for continuous coordinate `c` (pixel centers at +0.5).
inline Tap bilinear_tap(double c, int extent) {
  double f = std::clamp(c - 0.5, 0.0, static_cast<double>(extent - 1));
  const int i0 = static_cast<int>(std::floor(f));
  const int i1 = std::min(i0 + 1, extent - 1);
  return {i0, i1, static_cast<float>(f - i0)};
}

}  // namespace detail

/// Writes the bilinear samples of `spec` into `out` (size*size*3 floats).
/// Patch pixel (u, v) samples the image at
/// (center_x + u - (size-1)/2, center_y + v - (size-1)/2).
inline void extract_patch_into(const Image& image, const PatchSpec& spec, std::span<float> out) {
  const int p = spec.size;
  const double off = 0.5 * (p - 1);
  thread_local std::vector<detail::Tap> xtaps;
  xtaps.resize(p);
  for (int u = 0; u < p; ++u) xtaps[u] = detail::bilinear_tap(spec.center_x + u - off, image.width);
  float* dst = out.data();
  for (int v = 0; v < p; ++v) {
    const detail::Tap ty = detail::bilinear_tap(spec.center_y + v - off, image.height);
    const float* row0 = image.rgb.data() + static_cast<std::size_t>(ty.i0) * image.width * 3;
    const float* row1 = image.rgb.data() + static_cast<std::size_t>(ty.i1) * image.width * 3;
    for (int u = 0; u < p; ++u) {
      const detail::Tap tx = xtaps[u];
      const float* a = row0 + tx.i0 * 3;
      const float* b = row0 + tx.i1 * 3;
      const float* c = row1 + tx.i0 * 3;
      const float* d = row1 + tx.i1 * 3;
      for (int ch = 0; ch < 3; ++ch) {
        const float top = a[ch] + tx.w * (b[ch] - a[ch]);
        const float bot = c[ch] + tx.w * (d[ch] - c[ch]);
        *dst++ = top + ty.w * (bot - top);
      }
    }
  }
}

inline Patch extract_patch(const Image& image, const PatchSpec& spec) {
  Patch patch{spec, std::vector<float>(static_cast<std::size_t>(spec.size) * spec.size * 3)};
  extract_patch_into(image, spec, patch.pixels);
  return patch;
}

inline std::vector<Patch> extract_patches(const Image& image, std::span<const PatchSpec> specs) {
  std::vector<Patch> out;
  out.reserve(specs.size());
  for (const auto& s : specs) out.push_back(extract_patch(image, s));
  return out;
}

/// One-call convenience: budget, layout, extraction.
inline std::vector<Patch> sample_patches(const Image& image, const GaussianPrompt& prompt, const SamplerConfig& config,
                                         Rng& rng) {
  const PatchBudget budget = allocate_budget(prompt, config);
  const auto specs = sample_patch_specs(image.width, image.height, prompt, budget, config, rng);
  return extract_patches(image, specs);
}

// Overlay colors by patch size: 16 purple, 8 yellow, 4 green, 2 blue, 1 red.
inline std::array<float, 3> patch_color(int size) {
  switch (size) {
    case 16: return {0.6f, 0.1f, 0.8f};
    case 8: return {1.0f, 0.9f, 0.1f};
    case 4: return {0.1f, 0.8f, 0.2f};
    case 2: return {0.1f, 0.3f, 1.0f};
    case 1: return {1.0f, 0.1f, 0.1f};
    default: return {0.9f, 0.9f, 0.9f};
  }
}

/// Darkened copy of the image with each patch footprint tinted by size,
/// coarse patches first so fine ones stay visible.
inline Image render_patch_overlay(const Image& image, std::span<const PatchSpec> specs) {
  Image out = image;
  for (auto& v : out.rgb) v *= 0.35f;
  std::vector<PatchSpec> order(specs.begin(), specs.end());
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.size > b.size; });
  for (const auto& s : order) {
    const auto color = patch_color(s.size);
    const int x0 = static_cast<int>(std::floor(s.center_x - 0.5 * s.size + 0.5));
    const int y0 = static_cast<int>(std::floor(s.center_y - 0.5 * s.size + 0.5));
    for (int y = std::max(0, y0); y < std::min(image.height, y0 + s.size); ++y)
      for (int x = std::max(0, x0); x < std::min(image.width, x0 + s.size); ++x) {
        float* px = out.at(x, y);
        for (int ch = 0; ch < 3; ++ch) px[ch] = 0.4f * px[ch] + 0.6f * color[ch];
      }
  }
  return out;
}

/// Plain-text layout record: "resolution_index size center_x center_y".
inline void write_patch_records(std::ostream& os, std::span<const PatchSpec> specs) {
  os << "# resolution_index size center_x center_y\n";
  char buf[128];
  for (const auto& s : specs) {
    std::snprintf(buf, sizeof buf, "%d %d %.6f %.6f\n", s.resolution_index, s.size, s.center_x, s.center_y);
    os << buf;
  }
}

}  // namespace flip
