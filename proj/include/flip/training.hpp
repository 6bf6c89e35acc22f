#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <functional>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "flip/error.hpp"
#include "flip/geometry.hpp"
#include "flip/image.hpp"
#include "flip/model.hpp"
#include "flip/rng.hpp"
#include "flip/sampler.hpp"

namespace flip {

inline constexpr int kDistanceGroups = 7;
inline constexpr std::int32_t kNoBoundary = std::numeric_limits<std::int32_t>::max();

/// Bracket index for an L1 boundary distance:
/// [0,2) [2,4) [4,8) [8,16) [16,32) [32,64) [64,inf).
inline int distance_group(std::int32_t d) {
  if (d < 2) return 0;
  int g = 0;
  while (g < kDistanceGroups - 1 && d >= (2 << g)) ++g;
  return g;
}

struct DistanceGroupMap {
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> distance;  // kNoBoundary when the mask is one-sided
  std::vector<std::uint8_t> group;

  std::int32_t at(int x, int y) const { return distance[static_cast<std::size_t>(y) * width + x]; }
};

namespace detail {

// Two-pass city-block transform: distance from each pixel to the nearest seed.
inline void city_block_transform(std::vector<std::int32_t>& d, int w, int h) {
  auto relax = [](std::int32_t& a, std::int32_t b) {
    if (b != kNoBoundary && b + 1 < a) a = b + 1;
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      std::int32_t& v = d[static_cast<std::size_t>(y) * w + x];
      if (x > 0) relax(v, d[static_cast<std::size_t>(y) * w + x - 1]);
      if (y > 0) relax(v, d[static_cast<std::size_t>(y - 1) * w + x]);
    }
  for (int y = h - 1; y >= 0; --y)
    for (int x = w - 1; x >= 0; --x) {
      std::int32_t& v = d[static_cast<std::size_t>(y) * w + x];
      if (x + 1 < w) relax(v, d[static_cast<std::size_t>(y) * w + x + 1]);
      if (y + 1 < h) relax(v, d[static_cast<std::size_t>(y + 1) * w + x]);
    }
}

}  // namespace detail

/// L1 distance of every pixel to the mask boundary. Boundary pixels (any
/// 4-neighbor of opposite value) have distance 0, so the distance equals the
/// city-block distance to the nearest opposite pixel minus one.
inline DistanceGroupMap distance_group_map(const BinaryMask& mask) {
  const int w = mask.width, h = mask.height;
  const std::size_t n = static_cast<std::size_t>(w) * h;
  std::vector<std::int32_t> to_outside(n), to_inside(n);
  for (std::size_t i = 0; i < n; ++i) {
    to_outside[i] = mask.values[i] ? kNoBoundary : 0;
    to_inside[i] = mask.values[i] ? 0 : kNoBoundary;
  }
  detail::city_block_transform(to_outside, w, h);
  detail::city_block_transform(to_inside, w, h);
  DistanceGroupMap m{w, h, std::vector<std::int32_t>(n), std::vector<std::uint8_t>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t d = mask.values[i] ? to_outside[i] : to_inside[i];
    m.distance[i] = d == kNoBoundary ? kNoBoundary : d - 1;
    m.group[i] = static_cast<std::uint8_t>(d == kNoBoundary ? kDistanceGroups - 1 : distance_group(d - 1));
  }
  return m;
}

/// Pixel indices per (side, group).
struct GroupIndex {
  int width = 0;
  int height = 0;
  std::array<std::vector<std::int32_t>, kDistanceGroups> inside;
  std::array<std::vector<std::int32_t>, kDistanceGroups> outside;
};

inline GroupIndex index_groups(const DistanceGroupMap& map, const BinaryMask& mask) {
  GroupIndex gi;
  gi.width = map.width;
  gi.height = map.height;
  for (std::size_t i = 0; i < map.group.size(); ++i)
    (mask.values[i] ? gi.inside : gi.outside)[map.group[i]].push_back(static_cast<std::int32_t>(i));
  return gi;
}

struct SparsePixelBatch {
  std::vector<int> x;
  std::vector<int> y;
  std::vector<std::uint8_t> target;  // 1 inside, 0 outside
  std::vector<std::uint8_t> group;

  std::size_t size() const { return x.size(); }
  std::size_t inside_count() const { return static_cast<std::size_t>(std::count(target.begin(), target.end(), 1)); }
};

/// Running per-group IoU and the sampling proportions derived from it.
struct GroupStats {
  std::array<double, kDistanceGroups> iou;
  std::array<double, kDistanceGroups> proportion;

  static GroupStats uniform() {
    GroupStats s;
    s.iou.fill(0.5);
    s.proportion.fill(1.0 / kDistanceGroups);
    return s;
  }
};

struct GroupStatsConfig {
  double momentum = 0.9;
  double floor = 0.02;
  double epsilon = 0.05;
};

/// Splits `total` across groups by largest remainder; ties go to the lower group.
inline std::array<int, kDistanceGroups> apportion(const std::array<double, kDistanceGroups>& proportion, int total) {
  std::array<int, kDistanceGroups> q{};
  std::array<double, kDistanceGroups> frac{};
  const double psum = std::accumulate(proportion.begin(), proportion.end(), 0.0);
  int assigned = 0;
  for (int g = 0; g < kDistanceGroups; ++g) {
    const double raw = total * proportion[g] / psum;
    q[g] = static_cast<int>(std::floor(raw));
    frac[g] = raw - q[g];
    assigned += q[g];
  }
  std::array<int, kDistanceGroups> order;
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
  for (int i = 0; assigned < total; ++i, ++assigned) ++q[order[i % kDistanceGroups]];
  return q;
}

/// Moves each empty group's quota to the nearest non-empty group (ties go
/// to the group closer to the boundary).
inline std::array<int, kDistanceGroups> donate_empty(std::array<int, kDistanceGroups> quota,
                                                     const std::array<std::size_t, kDistanceGroups>& sizes) {
  for (int g = 0; g < kDistanceGroups; ++g) {
    if (sizes[g] > 0 || quota[g] == 0) continue;
    for (int off = 1; off < kDistanceGroups; ++off) {
      int target = -1;
      if (g - off >= 0 && sizes[g - off] > 0) target = g - off;
      else if (g + off < kDistanceGroups && sizes[g + off] > 0) target = g + off;
      if (target >= 0) {
        quota[target] += quota[g];
        quota[g] = 0;
        break;
      }
    }
  }
  return quota;
}

namespace detail {

// q draws from [0, n): distinct (Floyd) when q <= n, otherwise every index
// once followed by q - n draws with replacement.
inline void draw_indices(std::size_t n, std::size_t q, Rng& rng, std::vector<std::size_t>& out) {
  out.clear();
  if (q <= n) {
    std::unordered_set<std::size_t> seen;
    seen.reserve(q * 2);
    for (std::size_t j = n - q; j < n; ++j) {
      auto t = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(j)));
      if (!seen.insert(t).second) {
        seen.insert(j);
        t = j;
      }
      out.push_back(t);
    }
    return;
  }
  for (std::size_t i = 0; i < n; ++i) out.push_back(i);
  for (std::size_t i = n; i < q; ++i)
    out.push_back(static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(n) - 1)));
}

}  // namespace detail

/// Picks k pixels: k/2 inside and k - k/2 outside, split across distance
/// groups by the given proportions.
inline SparsePixelBatch select_sparse_pixels(const GroupIndex& gi, const std::array<double, kDistanceGroups>& proportion,
                                             int k, Rng& rng) {
  if (k < 2 * kDistanceGroups) throw Error("bad-config", "k must be at least 14");
  std::array<std::size_t, kDistanceGroups> in_sizes{}, out_sizes{};
  std::size_t n_in = 0, n_out = 0;
  for (int g = 0; g < kDistanceGroups; ++g) {
    in_sizes[g] = gi.inside[g].size();
    out_sizes[g] = gi.outside[g].size();
    n_in += in_sizes[g];
    n_out += out_sizes[g];
  }
  if (n_in == 0 || n_out == 0) throw Error("one-sided-mask", "mask needs both inside and outside pixels");

  SparsePixelBatch b;
  b.x.reserve(k);
  b.y.reserve(k);
  b.target.reserve(k);
  b.group.reserve(k);
  std::vector<std::size_t> picks;
  auto fill_side = [&](const auto& lists, const auto& sizes, int total, std::uint8_t target) {
    const auto quota = donate_empty(apportion(proportion, total), sizes);
    for (int g = 0; g < kDistanceGroups; ++g) {
      if (quota[g] == 0) continue;
      detail::draw_indices(sizes[g], static_cast<std::size_t>(quota[g]), rng, picks);
      for (std::size_t i : picks) {
        const std::int32_t idx = lists[g][i];
        b.x.push_back(idx % gi.width);
        b.y.push_back(idx / gi.width);
        b.target.push_back(target);
        b.group.push_back(static_cast<std::uint8_t>(g));
      }
    }
  };
  fill_side(gi.inside, in_sizes, k / 2, 1);
  fill_side(gi.outside, out_sizes, k - k / 2, 0);
  return b;
}

inline SparsePixelBatch select_sparse_pixels(const DistanceGroupMap& map, const BinaryMask& mask,
                                             const GroupStats& stats, int k, Rng& rng) {
  return select_sparse_pixels(index_groups(map, mask), stats.proportion, k, rng);
}

/// EMA update of per-group IoU (NaN entries leave a group untouched), then
/// proportions proportional to (1 - iou + eps), floored and renormalized.
inline GroupStats update_group_stats(const GroupStats& stats, const std::array<double, kDistanceGroups>& observed,
                                     const GroupStatsConfig& cfg = {}) {
  GroupStats s = stats;
  std::array<double, kDistanceGroups> w{};
  for (int g = 0; g < kDistanceGroups; ++g) {
    if (!std::isnan(observed[g])) s.iou[g] = cfg.momentum * s.iou[g] + (1.0 - cfg.momentum) * observed[g];
    w[g] = 1.0 - s.iou[g] + cfg.epsilon;
  }
  // Water-filling: groups that would fall under the floor are pinned to it,
  // the remaining mass is split proportionally among the rest.
  std::array<bool, kDistanceGroups> pinned{};
  for (;;) {
    double free_w = 0.0;
    int n_pinned = 0;
    for (int g = 0; g < kDistanceGroups; ++g) {
      if (pinned[g]) ++n_pinned;
      else free_w += w[g];
    }
    const double free_mass = 1.0 - n_pinned * cfg.floor;
    bool changed = false;
    for (int g = 0; g < kDistanceGroups; ++g) {
      if (pinned[g]) {
        s.proportion[g] = cfg.floor;
        continue;
      }
      s.proportion[g] = free_mass * w[g] / free_w;
      if (s.proportion[g] < cfg.floor) {
        pinned[g] = true;
        changed = true;
      }
    }
    if (!changed) break;
  }
  return s;
}

/// Mean binary cross-entropy over logits, stable in logit space.
inline double sparse_bce(std::span<const double> logits, std::span<const std::uint8_t> targets) {
  if (logits.size() != targets.size()) throw Error("size-mismatch", "logits and targets differ in length");
  if (logits.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    sum += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return sum / static_cast<double>(logits.size());
}

// ------------------------------------------------------------------ optimizer

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  Parameters<T> m;
  Parameters<T> v;
  std::int64_t t = 0;

  explicit AdamState(const Parameters<T>& p) : m(zeros_like(p)), v(zeros_like(p)) {}
};

template <class T>
void adam_step(Parameters<T>& params, const Parameters<T>& grads, AdamState<T>& state, const AdamConfig& cfg) {
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  std::vector<Mat<T>*> ps, ms, vs;
  std::vector<const Mat<T>*> gs;
  for_each_tensor(params, [&](const std::string&, Mat<T>& x) { ps.push_back(&x); });
  for_each_tensor(grads, [&](const std::string&, const Mat<T>& x) { gs.push_back(&x); });
  for_each_tensor(state.m, [&](const std::string&, Mat<T>& x) { ms.push_back(&x); });
  for_each_tensor(state.v, [&](const std::string&, Mat<T>& x) { vs.push_back(&x); });
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.eps);
  const T ic1 = static_cast<T>(1.0 / c1), ic2 = static_cast<T>(1.0 / c2);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    T* p = ps[i]->data();
    const T* g = gs[i]->data();
    T* m = ms[i]->data();
    T* v = vs[i]->data();
    for (Eigen::Index j = 0; j < ps[i]->size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      p[j] -= lr * (m[j] * ic1) / (std::sqrt(v[j] * ic2) + eps);
    }
  }
}

// ------------------------------------------------------------------ training loop

struct TrainConfig {
  int batch_size = 16;
  double learning_rate = 1e-4;
  int total_steps = 1000;
  int pixels = 2048;  // k
  double token_jitter = 0.25;
  bool dynamic_sampling = true;
  AugmentationSpec augmentation;
  GroupStatsConfig group_stats;
  int workers = 1;

  void validate() const {
    if (batch_size < 1 || learning_rate < 0 || total_steps < 0 || workers < 1)
      throw Error("bad-config", "training values must be positive");
    if (pixels < 2 * kDistanceGroups) throw Error("bad-config", "pixels must be >= 14");
    if (token_jitter < 0 || token_jitter >= 1) throw Error("bad-config", "token_jitter must lie in [0, 1)");
    augmentation.validate();
  }
};

struct Scene {
  Image image;
  BinaryMask mask;
};

/// Token count for one sample: uniform integer in [(1-j)N, (1+j)N].
inline int jitter_token_count(int n, double jitter, int min_tokens, Rng& rng) {
  if (jitter <= 0) return n;
  const auto lo = static_cast<std::int64_t>(std::lround((1.0 - jitter) * n));
  const auto hi = static_cast<std::int64_t>(std::lround((1.0 + jitter) * n));
  return std::max(min_tokens, static_cast<int>(uniform_int(rng, lo, hi)));
}

/// Per-group confusion counts over sampled pixels (logit > 0 is inside).
struct GroupConfusion {
  std::array<std::int64_t, kDistanceGroups> tp{}, fp{}, fn{}, n{};

  void add(const GroupConfusion& o) {
    for (int g = 0; g < kDistanceGroups; ++g) {
      tp[g] += o.tp[g];
      fp[g] += o.fp[g];
      fn[g] += o.fn[g];
      n[g] += o.n[g];
    }
  }

  /// NaN for groups without samples; 1 for groups with an empty union.
  std::array<double, kDistanceGroups> iou() const {
    std::array<double, kDistanceGroups> r{};
    for (int g = 0; g < kDistanceGroups; ++g) {
      const auto u = tp[g] + fp[g] + fn[g];
      r[g] = n[g] == 0 ? std::numeric_limits<double>::quiet_NaN() : u == 0 ? 1.0 : static_cast<double>(tp[g]) / u;
    }
    return r;
  }
};

/// Result of one sample's forward/backward pass.
struct SampleResult {
  bool skipped = false;
  double loss = 0.0;
  std::size_t queries = 0;
  GroupConfusion confusion;
};

/// Prompt, perturbation, patch sampling, sparse pixels, forward, loss and
/// backward for one scene. The gradient of the batch-mean loss is added to
/// `grads` (scaled by 1/batch).
template <class T>
SampleResult train_sample(const Parameters<T>& params, const ModelConfig& mcfg, const SamplerConfig& scfg,
                          const TrainConfig& tcfg, const Scene& scene, const GroupStats& stats, Rng& rng,
                          Parameters<T>& grads) {
  SampleResult r;
  const GaussianPrompt truth = mask_moments(scene.mask);
  const GaussianPrompt prompt = perturb_prompt(truth, tcfg.augmentation, rng);
  SamplerConfig sc = scfg;
  sc.token_count = jitter_token_count(scfg.token_count, tcfg.token_jitter, static_cast<int>(scfg.sizes.size()), rng);
  const auto patches = sample_patches(scene.image, prompt, sc, rng);

  const auto map = distance_group_map(scene.mask);
  const GroupIndex gi = index_groups(map, scene.mask);
  std::array<double, kDistanceGroups> proportion;
  if (tcfg.dynamic_sampling) proportion = stats.proportion;
  else proportion.fill(1.0 / kDistanceGroups);
  SparsePixelBatch px;
  try {
    px = select_sparse_pixels(gi, proportion, tcfg.pixels, rng);
  } catch (const Error& e) {
    if (e.code() != "one-sided-mask") throw;
    r.skipped = true;
    return r;
  }

  const TokenInput<T> in = make_token_input<T>(patches, prompt, mcfg);
  std::vector<Point2> pts(px.size());
  for (std::size_t i = 0; i < px.size(); ++i) pts[i] = {px.x[i] + 0.5, px.y[i] + 0.5};
  const Mat<T> queries = relative_coords<T>(prompt, pts);
  Tape<T> tape;
  const Mat<T> logits = model_forward(params, mcfg, in, queries, &tape);

  const auto k = static_cast<double>(px.size());
  Mat<T> dlogits(logits.rows(), 1);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double z = static_cast<double>(logits(i, 0));
    const int t = px.target[i];
    loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    dlogits(i, 0) = static_cast<T>((s - t) / (k * tcfg.batch_size));
    const int g = px.group[i];
    const bool pred = z > 0;
    ++r.confusion.n[g];
    if (pred && t) ++r.confusion.tp[g];
    else if (pred) ++r.confusion.fp[g];
    else if (t) ++r.confusion.fn[g];
  }
  r.loss = loss / k;
  r.queries = px.size();
  model_backward(params, mcfg, tape, dlogits, grads);
  return r;
}

struct StepResult {
  double loss = 0.0;  // mean over non-skipped samples
  int samples = 0;
  int skipped = 0;
  std::array<double, kDistanceGroups> group_iou{};
  std::size_t queries = 0;
};

/// Owns a parameter set, its optimizer state and the sampling statistics.
template <class T>
class Trainer {
 public:
  Trainer(ModelConfig mcfg, SamplerConfig scfg, TrainConfig tcfg, Parameters<T> params)
      : mcfg_(std::move(mcfg)), scfg_(std::move(scfg)), tcfg_(std::move(tcfg)), params_(std::move(params)),
        adam_(params_), stats_(GroupStats::uniform()) {
    mcfg_.validate();
    scfg_.validate();
    tcfg_.validate();
  }

  const Parameters<T>& params() const { return params_; }
  Parameters<T>& params() { return params_; }
  const GroupStats& stats() const { return stats_; }
  std::int64_t steps_done() const { return step_; }
  const TrainConfig& train_config() const { return tcfg_; }

  /// One optimizer update over a batch. Each sample gets its own rng stream
  /// derived from (seed, step, slot) and its own gradient buffer; buffers
  /// are reduced in slot order, so results do not depend on worker count.
  StepResult step(std::span<const Scene* const> batch, std::uint64_t seed) {
    const std::size_t b = batch.size();
    std::vector<SampleResult> results(b);
    if (slot_grads_.size() < b) slot_grads_.resize(b, zeros_like(params_));
    auto run = [&](std::size_t i) {
      Rng rng(mix_seed(seed, static_cast<std::uint64_t>(step_), i));
      Parameters<T>& g = slot_grads_[i];
      for_each_tensor(g, [](const std::string&, Mat<T>& m) { m.setZero(); });
      results[i] = train_sample(params_, mcfg_, scfg_, tcfg_, *batch[i], stats_, rng, g);
    };
    const int workers = std::min<int>(tcfg_.workers, static_cast<int>(b));
    if (workers <= 1) {
      for (std::size_t i = 0; i < b; ++i) run(i);
    } else {
      std::vector<std::thread> pool;
      std::exception_ptr failure;
      std::mutex mu;
      for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          try {
            for (std::size_t i = w; i < b; i += workers) run(i);
          } catch (...) {
            std::lock_guard lock(mu);
            failure = std::current_exception();
          }
        });
      for (auto& t : pool) t.join();
      if (failure) std::rethrow_exception(failure);
    }

    Parameters<T> total = zeros_like(params_);
    std::vector<Mat<T>*> dst;
    for_each_tensor(total, [&](const std::string&, Mat<T>& m) { dst.push_back(&m); });
    StepResult sr;
    GroupConfusion conf;
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      if (results[i].skipped) {
        ++sr.skipped;
        continue;
      }
      std::size_t j = 0;
      for_each_tensor(slot_grads_[i], [&](const std::string&, const Mat<T>& m) { *dst[j++] += m; });
      loss += results[i].loss;
      sr.queries += results[i].queries;
      conf.add(results[i].confusion);
      ++sr.samples;
    }
    sr.loss = sr.samples > 0 ? loss / sr.samples : 0.0;
    sr.group_iou = conf.iou();
    if (sr.samples > 0) {
      AdamConfig ac;
      ac.lr = tcfg_.learning_rate;
      adam_step(params_, total, adam_, ac);
      if (tcfg_.dynamic_sampling) stats_ = update_group_stats(stats_, sr.group_iou, tcfg_.group_stats);
    }
    ++step_;
    return sr;
  }

  void set_learning_rate(double lr) { tcfg_.learning_rate = lr; }

 private:
  ModelConfig mcfg_;
  SamplerConfig scfg_;
  TrainConfig tcfg_;
  Parameters<T> params_;
  AdamState<T> adam_;
  GroupStats stats_;
  std::int64_t step_ = 0;
  std::vector<Parameters<T>> slot_grads_;
};

/// Comma-separated log line: step, loss, mean group IoU, proportions.
inline std::string format_train_log(std::int64_t step, const StepResult& r, const GroupStats& stats) {
  double sum = 0.0;
  int n = 0;
  for (double v : r.group_iou)
    if (!std::isnan(v)) {
      sum += v;
      ++n;
    }
  std::string line = std::to_string(step);
  char buf[64];
  std::snprintf(buf, sizeof buf, ",%.6f,%.6f", r.loss, n ? sum / n : 0.0);
  line += buf;
  for (double p : stats.proportion) {
    std::snprintf(buf, sizeof buf, ",%.6f", p);
    line += buf;
  }
  return line;
}

}  // namespace flip
