#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "flip/error.hpp"
#include "flip/geometry.hpp"
#include "flip/image.hpp"
#include "flip/inference.hpp"
#include "flip/rng.hpp"

namespace flip {

enum class ShapeFamily { kEllipse, kRectangle, kConvex, kStar };

inline const char* shape_name(ShapeFamily s) {
  switch (s) {
    case ShapeFamily::kEllipse: return "ellipse";
    case ShapeFamily::kRectangle: return "rectangle";
    case ShapeFamily::kConvex: return "convex";
    case ShapeFamily::kStar: return "star";
  }
  return "?";
}

inline ShapeFamily parse_shape(const std::string& s) {
  if (s == "ellipse") return ShapeFamily::kEllipse;
  if (s == "rectangle") return ShapeFamily::kRectangle;
  if (s == "convex") return ShapeFamily::kConvex;
  if (s == "star") return ShapeFamily::kStar;
  throw Error("bad-config", "unknown shape family '" + s + "'");
}

struct SceneConfig {
  int res_min = 512;
  int res_max = 2048;
  double footprint_min = 4;
  double footprint_max = 256;
  std::vector<ShapeFamily> shapes = {ShapeFamily::kEllipse, ShapeFamily::kRectangle, ShapeFamily::kConvex,
                                     ShapeFamily::kStar};
  int supersample = 4;

  void validate() const {
    if (res_min < 8 || res_min > res_max) throw Error("bad-config", "resolution range must satisfy 8 <= min <= max");
    if (footprint_min < 1 || footprint_min > footprint_max)
      throw Error("bad-config", "footprint range must satisfy 1 <= min <= max");
    if (footprint_max > res_min) throw Error("bad-config", "footprint max must not exceed resolution min");
    if (shapes.empty()) throw Error("bad-config", "at least one shape family is required");
    if (supersample < 1) throw Error("bad-config", "supersample must be >= 1");
  }
};

/// Object outline in its own unit frame (max half-extent about 1 before scaling).
struct ShapeSpec {
  ShapeFamily family = ShapeFamily::kEllipse;
  double aspect = 1.0;             // minor/major for ellipse and rectangle
  std::vector<Point2> polygon;     // convex and star outlines
};

struct Placement {
  double cx = 0.0;
  double cy = 0.0;
  double scale = 1.0;  // unit frame -> pixels
  double angle = 0.0;
};

struct SceneRecord {
  std::string image_path;
  std::string mask_path;
  std::optional<GaussianPrompt> prompt;
  std::string shape;
  double footprint = 0.0;      // object extent in pixels
  double relative_area = 0.0;  // mask pixels / image pixels

  bool operator==(const SceneRecord&) const = default;
};

struct GeneratedScene {
  Image image;
  BinaryMask mask;
  SceneRecord record;
  ShapeSpec shape;
  Placement placement;
};

namespace detail {

inline double log_uniform(Rng& rng, double lo, double hi) {
  return lo == hi ? lo : std::exp(uniform(rng, std::log(lo), std::log(hi)));
}

inline bool point_in_polygon(const std::vector<Point2>& poly, double x, double y) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point2& a = poly[i];
    const Point2& b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) inside = !inside;
  }
  return inside;
}

inline bool shape_contains(const ShapeSpec& s, double u, double v) {
  switch (s.family) {
    case ShapeFamily::kEllipse: return u * u + (v / s.aspect) * (v / s.aspect) <= 1.0;
    case ShapeFamily::kRectangle: return std::abs(u) <= 1.0 && std::abs(v) <= s.aspect;
    default: return point_in_polygon(s.polygon, u, v);
  }
}

inline double shape_area(const ShapeSpec& s) {
  switch (s.family) {
    case ShapeFamily::kEllipse: return std::numbers::pi * s.aspect;
    case ShapeFamily::kRectangle: return 4.0 * s.aspect;
    default: {
      double a = 0.0;
      for (std::size_t i = 0, j = s.polygon.size() - 1; i < s.polygon.size(); j = i++)
        a += s.polygon[j].x * s.polygon[i].y - s.polygon[i].x * s.polygon[j].y;
      return std::abs(a) * 0.5;
    }
  }
}

// Half-extents of the rotated shape along x and y (unit frame).
inline Point2 rotated_half_extent(const ShapeSpec& s, double angle) {
  const double c = std::cos(angle), sn = std::sin(angle);
  switch (s.family) {
    case ShapeFamily::kEllipse:
      return {std::hypot(c, s.aspect * sn), std::hypot(sn, s.aspect * c)};
    case ShapeFamily::kRectangle:
      return {std::abs(c) + s.aspect * std::abs(sn), std::abs(sn) + s.aspect * std::abs(c)};
    default: {
      Point2 e{0, 0};
      for (const auto& p : s.polygon) {
        e.x = std::max(e.x, std::abs(c * p.x - sn * p.y));
        e.y = std::max(e.y, std::abs(sn * p.x + c * p.y));
      }
      return e;
    }
  }
}

inline ShapeSpec random_shape(ShapeFamily family, Rng& rng) {
  ShapeSpec s;
  s.family = family;
  switch (family) {
    case ShapeFamily::kEllipse:
    case ShapeFamily::kRectangle:
      s.aspect = uniform(rng, 0.45, 1.0);
      break;
    case ShapeFamily::kConvex: {
      const int n = static_cast<int>(uniform_int(rng, 3, 8));
      const double squash = uniform(rng, 0.55, 1.0);
      const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      for (int i = 0; i < n; ++i) {
        const double t = phase + 2.0 * std::numbers::pi * (i + uniform(rng, -0.3, 0.3)) / n;
        s.polygon.push_back({std::cos(t), squash * std::sin(t)});
      }
      break;
    }
    case ShapeFamily::kStar: {
      const int n = static_cast<int>(uniform_int(rng, 5, 8));
      const double inner = uniform(rng, 0.45, 0.7);
      const double squash = uniform(rng, 0.7, 1.0);
      const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      for (int i = 0; i < 2 * n; ++i) {
        const double t = phase + std::numbers::pi * i / n;
        const double r = (i % 2 == 0) ? 1.0 : inner;
        s.polygon.push_back({r * std::cos(t), squash * r * std::sin(t)});
      }
      break;
    }
  }
  return s;
}

// Smooth value noise on an absolute-pixel lattice; values in [-1, 1].
class ValueNoise {
 public:
  ValueNoise(std::uint64_t seed, double spacing) : seed_(seed), inv_(1.0 / spacing) {}

  double operator()(double x, double y, int channel) const {
    const double fx = x * inv_, fy = y * inv_;
    const auto ix = static_cast<std::int64_t>(std::floor(fx));
    const auto iy = static_cast<std::int64_t>(std::floor(fy));
    const double tx = smooth(fx - ix), ty = smooth(fy - iy);
    const double a = lattice(ix, iy, channel), b = lattice(ix + 1, iy, channel);
    const double c = lattice(ix, iy + 1, channel), d = lattice(ix + 1, iy + 1, channel);
    const double top = a + tx * (b - a), bot = c + tx * (d - c);
    return top + ty * (bot - top);
  }

 private:
  static double smooth(double t) { return t * t * (3.0 - 2.0 * t); }
  double lattice(std::int64_t x, std::int64_t y, int ch) const {
    const std::uint64_t h = mix_seed(seed_ ^ static_cast<std::uint64_t>(ch),
                                     static_cast<std::uint64_t>(x), static_cast<std::uint64_t>(y));
    return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;
  }

  std::uint64_t seed_;
  double inv_;
};

struct Background {
  std::array<double, 3> c0, c1;
  double dir_x, dir_y, offset, span;
  ValueNoise coarse, fine;

  std::array<double, 3> at(double x, double y) const {
    const double t = std::clamp((x * dir_x + y * dir_y - offset) / span, 0.0, 1.0);
    std::array<double, 3> v;
    for (int ch = 0; ch < 3; ++ch)
      v[ch] = c0[ch] + t * (c1[ch] - c0[ch]) + 0.06 * coarse(x, y, ch) + 0.03 * fine(x, y, ch);
    return v;
  }
};

inline std::array<double, 3> random_color(Rng& rng, double lo = 0.1, double hi = 0.9) {
  return {uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)};
}

inline double color_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

}  // namespace detail

/// Renders one object onto a procedural background at the given placement.
/// Coverage comes from ss x ss supersampling; the mask is coverage >= 0.5.
inline void render_object(Image& img, BinaryMask& mask, const ShapeSpec& shape, const Placement& pl,
                          const std::array<double, 3>& color, std::uint64_t texture_seed, int ss) {
  const Point2 ext = detail::rotated_half_extent(shape, pl.angle);
  const int x0 = std::max(0, static_cast<int>(std::floor(pl.cx - ext.x * pl.scale)) - 1);
  const int x1 = std::min(img.width, static_cast<int>(std::ceil(pl.cx + ext.x * pl.scale)) + 2);
  const int y0 = std::max(0, static_cast<int>(std::floor(pl.cy - ext.y * pl.scale)) - 1);
  const int y1 = std::min(img.height, static_cast<int>(std::ceil(pl.cy + ext.y * pl.scale)) + 2);
  const double c = std::cos(pl.angle), s = std::sin(pl.angle), inv = 1.0 / pl.scale;
  const detail::ValueNoise texture(texture_seed, 6.0);
  const int total = ss * ss;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const double px = x + (sx + 0.5) / ss - pl.cx;
          const double py = y + (sy + 0.5) / ss - pl.cy;
          hits += detail::shape_contains(shape, (c * px + s * py) * inv, (-s * px + c * py) * inv);
        }
      if (hits == 0) continue;
      const float cov = static_cast<float>(hits) / total;
      float* p = img.at(x, y);
      for (int ch = 0; ch < 3; ++ch) {
        const double obj = std::clamp(color[ch] + 0.04 * texture(x + 0.5, y + 0.5, ch), 0.0, 1.0);
        p[ch] = static_cast<float>((1.0 - cov) * p[ch] + cov * obj);
      }
      mask.set(x, y, 2 * hits >= total);
    }
}

inline Image render_background(int width, int height, const detail::Background& bg) {
  Image img(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const auto v = bg.at(x + 0.5, y + 0.5);
      float* p = img.at(x, y);
      for (int ch = 0; ch < 3; ++ch) p[ch] = static_cast<float>(std::clamp(v[ch], 0.0, 1.0));
    }
  return img;
}

inline detail::Background random_background(int width, int height, Rng& rng) {
  const double dir = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double dx = std::cos(dir), dy = std::sin(dir);
  // Projection of the image corners onto the gradient direction.
  const double p0 = std::min({0.0, width * dx, height * dy, width * dx + height * dy});
  const double p1 = std::max({0.0, width * dx, height * dy, width * dx + height * dy});
  const auto c0 = detail::random_color(rng);
  const auto c1 = detail::random_color(rng);
  return {c0, c1, dx, dy, p0, std::max(p1 - p0, 1.0), detail::ValueNoise(rng(), 32.0), detail::ValueNoise(rng(), 8.0)};
}

/// Object color at least 0.35 away (RGB distance) from the local background.
inline std::array<double, 3> contrasting_color(const std::array<double, 3>& bg, Rng& rng) {
  for (int i = 0; i < 32; ++i) {
    auto c = detail::random_color(rng, 0.0, 1.0);
    if (detail::color_distance(c, bg) >= 0.35) return c;
  }
  return {bg[0] > 0.5 ? 0.05 : 0.95, bg[1] > 0.5 ? 0.05 : 0.95, bg[2] > 0.5 ? 0.05 : 0.95};
}

/// One object on a procedural background. Resolution and footprint are drawn
/// log-uniformly; relative area is capped at 25%.
inline GeneratedScene gen_scene(const SceneConfig& cfg, Rng& rng) {
  cfg.validate();
  const int side = static_cast<int>(std::lround(detail::log_uniform(rng, cfg.res_min, cfg.res_max)));
  const auto bg = random_background(side, side, rng);
  for (int attempt = 0;; ++attempt) {
    GeneratedScene sc;
    const double footprint = detail::log_uniform(rng, cfg.footprint_min, cfg.footprint_max);
    const auto family = cfg.shapes[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(cfg.shapes.size()) - 1))];
    sc.shape = detail::random_shape(family, rng);
    Placement& pl = sc.placement;
    pl.angle = uniform(rng, 0.0, std::numbers::pi);
    const Point2 ext = detail::rotated_half_extent(sc.shape, pl.angle);
    pl.scale = footprint / (2.0 * std::max(ext.x, ext.y));
    const double image_area = static_cast<double>(side) * side;
    const double area = detail::shape_area(sc.shape) * pl.scale * pl.scale;
    if (area > 0.24 * image_area) pl.scale *= std::sqrt(0.24 * image_area / area);
    const double hx = ext.x * pl.scale, hy = ext.y * pl.scale;
    pl.cx = hx + 1.0 < side - hx - 1.0 ? uniform(rng, hx + 1.0, side - hx - 1.0) : 0.5 * side;
    pl.cy = hy + 1.0 < side - hy - 1.0 ? uniform(rng, hy + 1.0, side - hy - 1.0) : 0.5 * side;
    const auto color = contrasting_color(bg.at(pl.cx, pl.cy), rng);
    const std::uint64_t tex_seed = rng();

    sc.image = render_background(side, side, bg);
    sc.mask = BinaryMask(side, side);
    render_object(sc.image, sc.mask, sc.shape, pl, color, tex_seed, cfg.supersample);
    const std::size_t n = sc.mask.count();
    if (n == 0 || static_cast<double>(n) > 0.25 * image_area) {
      if (attempt < 64) continue;
      throw Error("generation-failed", "could not place an object");
    }
    sc.record.shape = shape_name(family);
    sc.record.footprint = 2.0 * std::max(hx, hy);
    sc.record.relative_area = static_cast<double>(n) / image_area;
    return sc;
  }
}

/// Scene `index` of the dataset defined by (cfg, seed).
inline GeneratedScene dataset_scene(const SceneConfig& cfg, std::uint64_t seed, std::uint64_t index) {
  Rng rng(mix_seed(seed, index, 0x5CE7E));
  return gen_scene(cfg, rng);
}

// ------------------------------------------------------------------ manifest

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(s);
  while (std::getline(ss, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, int lineno) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error("bad-manifest", "line " + std::to_string(lineno) + ": bad number '" + s + "'");
  }
}

}  // namespace detail

inline constexpr const char* kManifestHeader = "#image\tmask\tshape\tfootprint\trelative_area\tprompt";

/// Tab-separated, one record per line. The prompt column is "-" or
/// "mu_x,mu_y,cov_xx,cov_xy,cov_yy".
inline void write_manifest(const std::vector<SceneRecord>& records, std::ostream& os) {
  os << kManifestHeader << "\n";
  for (const auto& r : records) {
    os << r.image_path << '\t' << r.mask_path << '\t' << r.shape << '\t' << detail::fmt_double(r.footprint) << '\t'
       << detail::fmt_double(r.relative_area) << '\t';
    if (r.prompt) {
      const auto& p = *r.prompt;
      os << detail::fmt_double(p.mu_x) << ',' << detail::fmt_double(p.mu_y) << ',' << detail::fmt_double(p.cov.xx)
         << ',' << detail::fmt_double(p.cov.xy) << ',' << detail::fmt_double(p.cov.yy);
    } else {
      os << '-';
    }
    os << '\n';
  }
}

inline void write_manifest(const std::vector<SceneRecord>& records, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("io", "cannot write " + path);
  write_manifest(records, os);
}

inline std::vector<SceneRecord> read_manifest(std::istream& is) {
  std::vector<SceneRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto f = detail::split(line, '\t');
    if (f.size() != 6)
      throw Error("bad-manifest", "line " + std::to_string(lineno) + ": expected 6 tab-separated fields");
    SceneRecord r;
    r.image_path = f[0];
    r.mask_path = f[1];
    r.shape = f[2];
    r.footprint = detail::parse_double(f[3], lineno);
    r.relative_area = detail::parse_double(f[4], lineno);
    if (f[5] != "-") {
      const auto p = detail::split(f[5], ',');
      if (p.size() != 5) throw Error("bad-manifest", "line " + std::to_string(lineno) + ": prompt needs 5 values");
      try {
        r.prompt = GaussianPrompt::from_covariance(
            detail::parse_double(p[0], lineno), detail::parse_double(p[1], lineno),
            Cov2{detail::parse_double(p[2], lineno), detail::parse_double(p[3], lineno), detail::parse_double(p[4], lineno)});
      } catch (const Error& e) {
        if (e.code() == "bad-manifest") throw;
        throw Error("bad-manifest", "line " + std::to_string(lineno) + ": " + e.what());
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<SceneRecord> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("io", "cannot open " + path);
  return read_manifest(is);
}

/// Writes `count` scenes as PNG pairs plus manifest.tsv under `dir`.
inline std::vector<SceneRecord> generate_dataset(const SceneConfig& cfg, std::uint64_t seed, int count,
                                                 const std::filesystem::path& dir, int workers = 1) {
  std::filesystem::create_directories(dir);
  std::vector<SceneRecord> records(static_cast<std::size_t>(count));
  auto one = [&](int i) {
    GeneratedScene sc = dataset_scene(cfg, seed, static_cast<std::uint64_t>(i));
    char name[32];
    std::snprintf(name, sizeof name, "scene_%05d", i);
    sc.record.image_path = std::string(name) + ".png";
    sc.record.mask_path = std::string(name) + "_mask.png";
    write_image_png((dir / sc.record.image_path).string(), sc.image);
    write_mask_png((dir / sc.record.mask_path).string(), sc.mask);
    records[static_cast<std::size_t>(i)] = sc.record;
  };
  if (workers <= 1) {
    for (int i = 0; i < count; ++i) one(i);
  } else {
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex mu;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (int i = w; i < count; i += workers) one(i);
        } catch (...) {
          std::lock_guard lock(mu);
          failure = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  write_manifest(records, (dir / "manifest.tsv").string());
  return records;
}

// ------------------------------------------------------------------ evaluation

/// Edges of the (relative area, absolute footprint) histogram.
inline const std::vector<double>& area_bin_edges() {
  static const std::vector<double> e = {0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  return e;
}
inline const std::vector<double>& footprint_bin_edges() {
  static const std::vector<double> e = {0.0, 8, 16, 32, 64, 128, 256, std::numeric_limits<double>::infinity()};
  return e;
}

inline int bin_of(const std::vector<double>& edges, double v) {
  for (std::size_t i = 1; i + 1 < edges.size(); ++i)
    if (v < edges[i]) return static_cast<int>(i) - 1;
  return static_cast<int>(edges.size()) - 2;
}

struct IouSummary {
  std::size_t count = 0;
  double mean = 0.0;
  double stddev = 0.0;
};

inline IouSummary summarize(const std::vector<double>& values) {
  IouSummary s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.count);
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(sq / static_cast<double>(s.count));
  return s;
}

struct EvalReport {
  std::size_t total = 0;
  std::size_t failed = 0;
  IouSummary all;
  IouSummary small;  // relative area < 1%
  std::vector<double> iou;  // per record; NaN for failed records
  std::vector<std::vector<std::size_t>> heat_count;  // [area bin][footprint bin]
  std::vector<std::vector<double>> heat_mean;
};

using MaskPredictorFn = std::function<BinaryMask(const Image&, const GaussianPrompt&, const SceneRecord&)>;

struct EvalOptions {
  bool prompt_jitter = false;
  AugmentationSpec jitter;
  std::uint64_t seed = 0;
  int workers = 1;
};

inline constexpr double kSmallObjectArea = 0.01;

/// Aggregates per-record IoUs (in record order) into an EvalReport.
inline EvalReport aggregate_report(const std::vector<SceneRecord>& records, const std::vector<double>& ious) {
  EvalReport rep;
  rep.total = records.size();
  rep.iou = ious;
  const std::size_t na = area_bin_edges().size() - 1, nf = footprint_bin_edges().size() - 1;
  rep.heat_count.assign(na, std::vector<std::size_t>(nf, 0));
  std::vector<std::vector<double>> sums(na, std::vector<double>(nf, 0.0));
  std::vector<double> all, small;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (std::isnan(ious[i])) {
      ++rep.failed;
      continue;
    }
    all.push_back(ious[i]);
    if (records[i].relative_area < kSmallObjectArea) small.push_back(ious[i]);
    const int a = bin_of(area_bin_edges(), records[i].relative_area);
    const int f = bin_of(footprint_bin_edges(), records[i].footprint);
    ++rep.heat_count[a][f];
    sums[a][f] += ious[i];
  }
  rep.all = summarize(all);
  rep.small = summarize(small);
  rep.heat_mean.assign(na, std::vector<double>(nf, std::numeric_limits<double>::quiet_NaN()));
  for (std::size_t a = 0; a < na; ++a)
    for (std::size_t f = 0; f < nf; ++f)
      if (rep.heat_count[a][f] > 0) rep.heat_mean[a][f] = sums[a][f] / static_cast<double>(rep.heat_count[a][f]);
  return rep;
}

/// Runs the predictor on every record. Unreadable records are counted as
/// failures; they do not abort the evaluation.
inline EvalReport evaluate_dataset(const MaskPredictorFn& predict, const std::vector<SceneRecord>& records,
                                   const std::filesystem::path& base_dir, const EvalOptions& opt = {}) {
  std::vector<double> ious(records.size(), std::numeric_limits<double>::quiet_NaN());
  auto one = [&](std::size_t i) {
    const SceneRecord& r = records[i];
    try {
      const Image image = read_image_png((base_dir / r.image_path).string());
      const BinaryMask truth = read_mask_png((base_dir / r.mask_path).string());
      GaussianPrompt prompt = r.prompt ? *r.prompt : mask_moments(truth);
      if (opt.prompt_jitter) {
        Rng rng(mix_seed(opt.seed, i, 0xE7A1));
        prompt = perturb_prompt(prompt, opt.jitter, rng);
      }
      const BinaryMask pred = predict(image, prompt, r);
      ious[i] = iou(pred, truth);
    } catch (const std::exception&) {
      ious[i] = std::numeric_limits<double>::quiet_NaN();
    }
  };
  if (opt.workers <= 1) {
    for (std::size_t i = 0; i < records.size(); ++i) one(i);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < opt.workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = static_cast<std::size_t>(w); i < records.size(); i += static_cast<std::size_t>(opt.workers)) one(i);
      });
    for (auto& t : pool) t.join();
  }
  return aggregate_report(records, ious);
}

/// Heatmap CSV: two bin-edge header rows, then a mean-IoU grid and a count grid
/// (rows: relative-area bins, columns: footprint bins).
inline void write_heatmap_csv(const EvalReport& rep, std::ostream& os) {
  auto edges_row = [&](const char* label, const std::vector<double>& e) {
    os << label;
    for (double v : e) os << ',' << (std::isinf(v) ? std::string("inf") : detail::fmt_double(v));
    os << '\n';
  };
  edges_row("footprint_edges", footprint_bin_edges());
  edges_row("relative_area_edges", area_bin_edges());
  char buf[32];
  os << "mean_iou\n";
  for (std::size_t a = 0; a < rep.heat_mean.size(); ++a) {
    os << "area_bin_" << a;
    for (double v : rep.heat_mean[a]) {
      if (std::isnan(v)) os << ',';
      else {
        std::snprintf(buf, sizeof buf, ",%.6f", v);
        os << buf;
      }
    }
    os << '\n';
  }
  os << "count\n";
  for (std::size_t a = 0; a < rep.heat_count.size(); ++a) {
    os << "area_bin_" << a;
    for (auto c : rep.heat_count[a]) os << ',' << c;
    os << '\n';
  }
}

inline void write_report_summary(const EvalReport& rep, std::ostream& os) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "records %zu\nfailed %zu\nmean_iou %.6f\nstd_iou %.6f\n", rep.total, rep.failed,
                rep.all.mean, rep.all.stddev);
  os << buf;
  std::snprintf(buf, sizeof buf, "small_count %zu\nsmall_mean_iou %.6f\nsmall_std_iou %.6f\n", rep.small.count,
                rep.small.mean, rep.small.stddev);
  os << buf;
}

}  // namespace flip
