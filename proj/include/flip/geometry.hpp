#pragma once

#include <cmath>
#include <numbers>
#include <utility>

#include "flip/error.hpp"
#include "flip/image.hpp"
#include "flip/rng.hpp"

namespace flip {

/// Smallest standard deviation a prompt may carry along either axis (pixels).
inline constexpr double kSigmaFloor = 0.5;

struct Cov2 {
  double xx = 0.0;
  double xy = 0.0;
  double yy = 0.0;

  bool operator==(const Cov2&) const = default;
};

/// Principal frame of a 2x2 covariance. `cos_major`/`sin_major` give the
/// direction of the major axis; the sign convention keeps cos_major >= 0
/// (and sin_major >= 0 when cos_major == 0).
struct CovFrame {
  double sigma_a = kSigmaFloor;  // major
  double sigma_b = kSigmaFloor;  // minor
  double cos_major = 1.0;
  double sin_major = 0.0;
  bool clamped = false;  // true when either sigma hit the floor
};

inline CovFrame decompose_covariance(const Cov2& cov) {
  const double mean = 0.5 * (cov.xx + cov.yy);
  const double half_diff = 0.5 * (cov.xx - cov.yy);
  const double radius = std::hypot(half_diff, cov.xy);
  double lambda_max = mean + radius;
  double lambda_min = mean - radius;
  if (lambda_min < -1e-6) throw Error("not-psd", "covariance has a negative eigenvalue");
  lambda_min = std::max(lambda_min, 0.0);
  lambda_max = std::max(lambda_max, 0.0);

  double vx, vy;
  if (radius == 0.0) {
    vx = 1.0;
    vy = 0.0;
  } else if (cov.xx >= cov.yy) {
    vx = lambda_max - cov.yy;
    vy = cov.xy;
  } else {
    vx = cov.xy;
    vy = lambda_max - cov.xx;
  }
  const double n = std::hypot(vx, vy);
  vx /= n;
  vy /= n;
  if (vx < 0.0 || (vx == 0.0 && vy < 0.0)) {
    vx = -vx;
    vy = -vy;
  }

  CovFrame f;
  f.sigma_a = std::sqrt(lambda_max);
  f.sigma_b = std::sqrt(lambda_min);
  f.clamped = f.sigma_a < kSigmaFloor || f.sigma_b < kSigmaFloor;
  f.sigma_a = std::max(f.sigma_a, kSigmaFloor);
  f.sigma_b = std::max(f.sigma_b, kSigmaFloor);
  f.cos_major = vx;
  f.sin_major = vy;
  return f;
}

/// Full 2x2 form; rejects matrices that are not symmetric within 1e-9.
inline CovFrame decompose_covariance(double a00, double a01, double a10, double a11) {
  if (std::abs(a01 - a10) > 1e-9 * std::max({1.0, std::abs(a01), std::abs(a10)}))
    throw Error("not-symmetric", "covariance must be symmetric");
  return decompose_covariance(Cov2{a00, 0.5 * (a01 + a10), a11});
}

/// Covariance R diag(sa^2, sb^2) R^T for a major axis at (c, s).
inline Cov2 rebuild_covariance(double sigma_a, double sigma_b, double c, double s) {
  const double la = sigma_a * sigma_a;
  const double lb = sigma_b * sigma_b;
  return {la * c * c + lb * s * s, (la - lb) * c * s, la * s * s + lb * c * c};
}

/// The 2D Gaussian prompt N(mu, Sigma) together with its eigen-frame.
/// `theta_a`/`theta_b` are the cosine and sine of the major-axis angle.
struct GaussianPrompt {
  double mu_x = 0.0;
  double mu_y = 0.0;
  Cov2 cov{kSigmaFloor * kSigmaFloor, 0.0, kSigmaFloor * kSigmaFloor};
  double sigma_a = kSigmaFloor;
  double sigma_b = kSigmaFloor;
  double theta_a = 1.0;
  double theta_b = 0.0;

  /// Builds a prompt and its frame. A covariance with a sub-floor axis is
  /// replaced by the one rebuilt from the floored frame.
  static GaussianPrompt from_covariance(double mu_x, double mu_y, const Cov2& cov) {
    const CovFrame f = decompose_covariance(cov);
    GaussianPrompt p;
    p.mu_x = mu_x;
    p.mu_y = mu_y;
    p.sigma_a = f.sigma_a;
    p.sigma_b = f.sigma_b;
    p.theta_a = f.cos_major;
    p.theta_b = f.sin_major;
    p.cov = f.clamped ? rebuild_covariance(f.sigma_a, f.sigma_b, f.cos_major, f.sin_major) : cov;
    return p;
  }

  static GaussianPrompt from_frame(double mu_x, double mu_y, double sigma_a, double sigma_b,
                                   double angle) {
    return from_covariance(
        mu_x, mu_y, rebuild_covariance(sigma_a, sigma_b, std::cos(angle), std::sin(angle)));
  }

  /// Axis-aligned standard deviations (projections of the ellipse on x/y).
  double sigma_x() const { return std::max(std::sqrt(std::max(cov.xx, 0.0)), kSigmaFloor); }
  double sigma_y() const { return std::max(std::sqrt(std::max(cov.yy, 0.0)), kSigmaFloor); }

  bool operator==(const GaussianPrompt&) const = default;
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Image coordinates -> prompt-relative frame: translate by -mu, undo the
/// major-axis rotation, divide by (sigma_a, sigma_b).
inline Point2 to_relative(const GaussianPrompt& p, double x, double y) {
  const double dx = x - p.mu_x;
  const double dy = y - p.mu_y;
  return {(p.theta_a * dx + p.theta_b * dy) / p.sigma_a,
          (-p.theta_b * dx + p.theta_a * dy) / p.sigma_b};
}

inline Point2 from_relative(const GaussianPrompt& p, double u, double v) {
  const double a = u * p.sigma_a;
  const double b = v * p.sigma_b;
  return {p.mu_x + p.theta_a * a - p.theta_b * b, p.mu_y + p.theta_b * a + p.theta_a * b};
}

/// Raw first and second moments of a mask's set pixels (centers at +0.5).
struct MaskMoments {
  double mu_x = 0.0;
  double mu_y = 0.0;
  Cov2 cov;
  std::size_t count = 0;
};

inline MaskMoments raw_mask_moments(const BinaryMask& mask) {
  // Shifted accumulation around the first set pixel keeps the sums small.
  MaskMoments m;
  double ox = 0.0, oy = 0.0;
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.get(x, y)) continue;
      if (m.count == 0) {
        ox = x;
        oy = y;
      }
      const double dx = x - ox;
      const double dy = y - oy;
      sx += dx;
      sy += dy;
      sxx += dx * dx;
      sxy += dx * dy;
      syy += dy * dy;
      ++m.count;
    }
  }
  if (m.count == 0) throw Error("empty-mask", "mask has no set pixels");
  const double n = static_cast<double>(m.count);
  const double cx = sx / n;
  const double cy = sy / n;
  m.mu_x = ox + cx + 0.5;
  m.mu_y = oy + cy + 0.5;
  m.cov.xx = std::max(sxx / n - cx * cx, 0.0);
  m.cov.xy = sxy / n - cx * cy;
  m.cov.yy = std::max(syy / n - cy * cy, 0.0);
  return m;
}

inline GaussianPrompt mask_moments(const BinaryMask& mask) {
  const MaskMoments m = raw_mask_moments(mask);
  return GaussianPrompt::from_covariance(m.mu_x, m.mu_y, m.cov);
}

/// Magnitudes of the random prompt perturbation applied during training.
struct AugmentationSpec {
  double max_center_shift = 0.1;  // fraction of sigma_a, per axis
  double sigma_scale_min = 0.8;
  double sigma_scale_max = 1.25;
  double max_rotation = 0.1;        // radians
  double token_count_jitter = 0.25;  // fraction of N

  void validate() const {
    if (max_center_shift < 0 || max_rotation < 0 || token_count_jitter < 0 || sigma_scale_min <= 0 ||
        sigma_scale_min > 1.0 || sigma_scale_max < 1.0)
      throw Error("bad-config", "augmentation magnitudes must be >= 0 and the scale range must contain 1");
  }

  bool is_identity() const {
    return max_center_shift == 0.0 && sigma_scale_min == 1.0 && sigma_scale_max == 1.0 &&
           max_rotation == 0.0;
  }

  static AugmentationSpec none() { return {0.0, 1.0, 1.0, 0.0, 0.0}; }
};

inline GaussianPrompt perturb_prompt(const GaussianPrompt& p, const AugmentationSpec& spec, Rng& rng) {
  if (spec.is_identity()) return p;
  const double shift = spec.max_center_shift * p.sigma_a;
  const double mx = p.mu_x + uniform(rng, -shift, shift);
  const double my = p.mu_y + uniform(rng, -shift, shift);
  const double sa = p.sigma_a * uniform(rng, spec.sigma_scale_min, spec.sigma_scale_max);
  const double sb = p.sigma_b * uniform(rng, spec.sigma_scale_min, spec.sigma_scale_max);
  const double angle = std::atan2(p.theta_b, p.theta_a) + uniform(rng, -spec.max_rotation, spec.max_rotation);
  return GaussianPrompt::from_frame(mx, my, sa, sb, angle);
}

}  // namespace flip
