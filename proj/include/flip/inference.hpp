#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "flip/error.hpp"
#include "flip/geometry.hpp"
#include "flip/image.hpp"
#include "flip/model.hpp"
#include "flip/sampler.hpp"

namespace flip {

struct InferenceConfig {
  double tau_uncertain = 0.01;
  int alpha_upsample = 4;
  int k_init = 16;
  double sigma_multiplier = 5.0;

  void validate() const {
    if (!(tau_uncertain > 0.0 && tau_uncertain < 0.5)) throw Error("bad-config", "tau_uncertain must lie in (0, 0.5)");
    if (alpha_upsample < 2) throw Error("bad-config", "alpha_upsample must be >= 2");
    if (k_init < 4) throw Error("bad-config", "k_init must be >= 4");
    if (!(sigma_multiplier > 0.0)) throw Error("bad-config", "sigma_multiplier must be positive");
  }
};

/// Integer pixel rectangle [x, x+width) x [y, y+height).
struct Rect {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;

  std::int64_t area() const { return static_cast<std::int64_t>(width) * height; }
  bool operator==(const Rect&) const = default;
};

/// Pixels whose centers fall in [mu -+ m * sigma_iso] on both axes, clipped to
/// the image; sigma_iso = max(sigma_x, sigma_y). Never empty.
inline Rect five_sigma_box(const GaussianPrompt& p, int image_width, int image_height, const InferenceConfig& cfg = {}) {
  const double s = cfg.sigma_multiplier * std::max(p.sigma_x(), p.sigma_y());
  auto span = [&](double mu, int extent, int& lo, int& hi) {
    lo = static_cast<int>(std::ceil(mu - s - 0.5));
    hi = static_cast<int>(std::floor(mu + s - 0.5)) + 1;
    lo = std::max(lo, 0);
    hi = std::min(hi, extent);
    if (hi <= lo) {
      lo = std::clamp(static_cast<int>(std::floor(mu)), 0, extent - 1);
      hi = lo + 1;
    }
  };
  int x0, x1, y0, y1;
  span(p.mu_x, image_width, x0, x1);
  span(p.mu_y, image_height, y0, y1);
  return {x0, y0, x1 - x0, y1 - y0};
}

struct MaskResult {
  Rect box;
  std::vector<float> probability;  // box.width x box.height, row-major
  BinaryMask binary;               // image resolution; zero outside the box
  std::int64_t queries = 0;
  int rounds = 0;                           // refinement rounds after the coarse pass
  std::vector<std::int64_t> round_queries;  // coarse pass first
  std::vector<std::uint8_t> queried;        // per box pixel: 1 when its value came from a model query

  float prob(int bx, int by) const { return probability[static_cast<std::size_t>(by) * box.width + bx]; }
};

inline double logit_to_probability(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

/// One foveal encoding of (image, prompt): shared by every query and round.
template <class T>
class Encoding {
 public:
  Encoding(const Parameters<T>& params, const ModelConfig& mcfg, const SamplerConfig& scfg, const Image& image,
           const GaussianPrompt& prompt, std::uint64_t seed = 0)
      : prompt_(prompt), width_(image.width), height_(image.height), kernel_(params, encode(params, mcfg, scfg, image, prompt, seed)) {}

  const GaussianPrompt& prompt() const { return prompt_; }
  int image_width() const { return width_; }
  int image_height() const { return height_; }
  int tokens() const { return kernel_.tokens(); }

  /// Logit at a continuous image position.
  T logit_at(double x, double y) const {
    const Point2 r = to_relative(prompt_, x, y);
    return kernel_.logit(r.x, r.y);
  }

 private:
  static PredictorKeys<T> encode(const Parameters<T>& params, const ModelConfig& mcfg, const SamplerConfig& scfg,
                                 const Image& image, const GaussianPrompt& prompt, std::uint64_t seed) {
    Rng rng(seed);
    const auto patches = sample_patches(image, prompt, scfg, rng);
    const TokenInput<T> in = make_token_input<T>(patches, prompt, mcfg);
    const Mat<T> tokens = embed_patches(params, in);
    const Mat<T> encoded = encoder_forward(params, mcfg, tokens, in.coords);
    return predictor_keys(params, encoded, in.coords);
  }

  GaussianPrompt prompt_;
  int width_;
  int height_;
  QueryKernel<T> kernel_;
};

namespace detail {

// Center of cell (i, j) of a gw x gh grid laid over the box.
inline Point2 cell_center(const Rect& box, int gw, int gh, int i, int j) {
  if (gw == box.width && gh == box.height) return {box.x + (i + 0.5), box.y + (j + 0.5)};
  return {box.x + (i + 0.5) * box.width / gw, box.y + (j + 0.5) * box.height / gh};
}

inline void binarize_into(MaskResult& r, int image_width, int image_height) {
  r.binary = BinaryMask(image_width, image_height);
  for (int by = 0; by < r.box.height; ++by)
    for (int bx = 0; bx < r.box.width; ++bx) r.binary.set(r.box.x + bx, r.box.y + by, r.prob(bx, by) >= 0.5f);
}

// Bilinear resize of a gw x gh grid to nw x nh (cell-center aligned, edge-clamped).
inline std::vector<float> upsample(const std::vector<float>& g, int gw, int gh, int nw, int nh) {
  std::vector<float> out(static_cast<std::size_t>(nw) * nh);
  for (int j = 0; j < nh; ++j) {
    const double fy = std::clamp((j + 0.5) * gh / nh - 0.5, 0.0, gh - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, gh - 1);
    const double wy = fy - y0;
    for (int i = 0; i < nw; ++i) {
      const double fx = std::clamp((i + 0.5) * gw / nw - 0.5, 0.0, gw - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, gw - 1);
      const double wx = fx - x0;
      const double top = g[y0 * gw + x0] + wx * (g[y0 * gw + x1] - g[y0 * gw + x0]);
      const double bot = g[y1 * gw + x0] + wx * (g[y1 * gw + x1] - g[y1 * gw + x0]);
      out[static_cast<std::size_t>(j) * nw + i] = static_cast<float>(top + wy * (bot - top));
    }
  }
  return out;
}

}  // namespace detail

/// Probabilities for every pixel center in the box.
template <class T>
MaskResult predict_dense(const Encoding<T>& enc, const Rect& box) {
  MaskResult r;
  r.box = box;
  r.probability.resize(static_cast<std::size_t>(box.area()));
  for (int by = 0; by < box.height; ++by)
    for (int bx = 0; bx < box.width; ++bx) {
      const Point2 c = detail::cell_center(box, box.width, box.height, bx, by);
      r.probability[static_cast<std::size_t>(by) * box.width + bx] =
          static_cast<float>(logit_to_probability(static_cast<double>(enc.logit_at(c.x, c.y))));
    }
  r.queries = box.area();
  r.round_queries = {r.queries};
  r.queried.assign(r.probability.size(), 1);
  detail::binarize_into(r, enc.image_width(), enc.image_height());
  return r;
}

/// Number of upsampling rounds: floor(log_alpha(k_target / k_init)).
inline int refinement_rounds(int k_target, int k_init, int alpha) {
  int n = 0;
  for (std::int64_t r = static_cast<std::int64_t>(k_init) * alpha; r <= k_target; r *= alpha) ++n;
  return n;
}

/// Coarse-to-fine prediction: a k_init grid is queried in full, then each
/// round upsamples by alpha and re-queries only cells whose interpolated
/// probability lies in [tau, 1 - tau]. A final partial step reaches the exact
/// box resolution when it is not a power-of-alpha multiple of k_init.
template <class T>
MaskResult hierarchical_refine(const Encoding<T>& enc, const Rect& box, const InferenceConfig& cfg = {}) {
  cfg.validate();
  const int k_target = std::max(box.width, box.height);
  MaskResult r;
  r.box = box;
  std::vector<std::pair<int, int>> levels;
  if (k_target <= cfg.k_init) {
    levels.emplace_back(box.width, box.height);
  } else {
    const int n = refinement_rounds(k_target, cfg.k_init, cfg.alpha_upsample);
    std::int64_t res = cfg.k_init;
    for (int j = 0; j <= n; ++j, res *= cfg.alpha_upsample) {
      auto dim = [&](int extent) {
        return std::clamp(static_cast<int>(std::lround(static_cast<double>(extent) * res / k_target)), 1, extent);
      };
      levels.emplace_back(dim(box.width), dim(box.height));
    }
    if (levels.back() != std::make_pair(box.width, box.height)) levels.emplace_back(box.width, box.height);
  }

  auto query = [&](int gw, int gh, int i, int j) {
    const Point2 c = detail::cell_center(box, gw, gh, i, j);
    return static_cast<float>(logit_to_probability(static_cast<double>(enc.logit_at(c.x, c.y))));
  };

  auto [gw, gh] = levels.front();
  std::vector<float> grid(static_cast<std::size_t>(gw) * gh);
  for (int j = 0; j < gh; ++j)
    for (int i = 0; i < gw; ++i) grid[static_cast<std::size_t>(j) * gw + i] = query(gw, gh, i, j);
  r.round_queries.push_back(static_cast<std::int64_t>(gw) * gh);
  std::vector<std::uint8_t> queried(grid.size(), 1);

  const float lo = static_cast<float>(cfg.tau_uncertain), hi = static_cast<float>(1.0 - cfg.tau_uncertain);
  for (std::size_t l = 1; l < levels.size(); ++l) {
    const auto [nw, nh] = levels[l];
    std::vector<float> next = detail::upsample(grid, gw, gh, nw, nh);
    queried.assign(next.size(), 0);
    std::int64_t count = 0;
    for (int j = 0; j < nh; ++j)
      for (int i = 0; i < nw; ++i) {
        float& v = next[static_cast<std::size_t>(j) * nw + i];
        if (v >= lo && v <= hi) {
          v = query(nw, nh, i, j);
          queried[static_cast<std::size_t>(j) * nw + i] = 1;
          ++count;
        }
      }
    r.round_queries.push_back(count);
    grid = std::move(next);
    gw = nw;
    gh = nh;
  }
  r.rounds = static_cast<int>(levels.size()) - 1;
  r.probability = std::move(grid);
  r.queried = std::move(queried);
  for (auto q : r.round_queries) r.queries += q;
  detail::binarize_into(r, enc.image_width(), enc.image_height());
  return r;
}

/// |a & b| / |a | b|; two empty masks score 1.
inline double iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.width != b.width || a.height != b.height) throw Error("dimension-mismatch", "masks differ in size");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const bool x = a.values[i] != 0, y = b.values[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Bundles a trained parameter set with the configs needed to segment.
template <class T>
struct Segmenter {
  const Parameters<T>& params;
  ModelConfig model;
  SamplerConfig sampler;
  InferenceConfig inference;
  bool hierarchical = false;
  std::uint64_t seed = 0;

  MaskResult segment(const Image& image, const GaussianPrompt& prompt) const {
    const Encoding<T> enc(params, model, sampler, image, prompt, seed);
    const Rect box = five_sigma_box(prompt, image.width, image.height, inference);
    return hierarchical ? hierarchical_refine(enc, box, inference) : predict_dense(enc, box);
  }
};

}  // namespace flip
