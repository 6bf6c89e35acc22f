#pragma once

// Brute-force reference implementations used only by the tests. They share
// data types with the library but none of its arithmetic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "flip/flip.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Rows = std::vector<Vec>;

// ---------------------------------------------------------------- geometry

struct Moments {
  double mx, my, cxx, cxy, cyy;
};

// Direct double loop over set pixels, two passes.
inline Moments moments(const flip::BinaryMask& m) {
  double n = 0, sx = 0, sy = 0;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.get(x, y)) {
        n += 1;
        sx += x + 0.5;
        sy += y + 0.5;
      }
  const double mx = sx / n, my = sy / n;
  double xx = 0, xy = 0, yy = 0;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.get(x, y)) {
        const double dx = x + 0.5 - mx, dy = y + 0.5 - my;
        xx += dx * dx;
        xy += dx * dy;
        yy += dy * dy;
      }
  return {mx, my, xx / n, xy / n, yy / n};
}

// ---------------------------------------------------------------- sampler

// Image value at continuous position (px, py), pixel centers at k + 0.5,
// clamped at the borders.
inline double bilinear(const flip::Image& img, double px, double py, int ch) {
  const double fx = std::clamp(px - 0.5, 0.0, img.width - 1.0);
  const double fy = std::clamp(py - 0.5, 0.0, img.height - 1.0);
  const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
  const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const double ax = fx - x0, ay = fy - y0;
  auto v = [&](int x, int y) { return static_cast<double>(img.at(x, y)[ch]); };
  return (1 - ax) * (1 - ay) * v(x0, y0) + ax * (1 - ay) * v(x1, y0) + (1 - ax) * ay * v(x0, y1) + ax * ay * v(x1, y1);
}

// ---------------------------------------------------------------- training

// Distance to the nearest opposite-valued pixel (city block) minus one, by
// exhaustive search. kNoBoundary when the mask is one-sided.
inline std::vector<std::int32_t> boundary_distance(const flip::BinaryMask& m) {
  std::vector<std::int32_t> out(static_cast<std::size_t>(m.width) * m.height, flip::kNoBoundary);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      int best = std::numeric_limits<int>::max();
      for (int v = 0; v < m.height; ++v)
        for (int u = 0; u < m.width; ++u)
          if (m.get(u, v) != m.get(x, y)) best = std::min(best, std::abs(u - x) + std::abs(v - y));
      if (best != std::numeric_limits<int>::max()) out[static_cast<std::size_t>(y) * m.width + x] = best - 1;
    }
  return out;
}

inline int group_of(std::int32_t d) {
  const int edges[] = {2, 4, 8, 16, 32, 64};
  for (int g = 0; g < 6; ++g)
    if (d < edges[g]) return g;
  return 6;
}

// ---------------------------------------------------------------- model

template <class M>
Rows to_rows(const M& m) {
  Rows r(static_cast<std::size_t>(m.rows()), Vec(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[i][j] = static_cast<double>(m(i, j));
  return r;
}

template <class T>
Vec affine(const flip::nn::LinearP<T>& l, const Vec& x) {
  Vec y(static_cast<std::size_t>(l.w.cols()));
  for (std::size_t c = 0; c < y.size(); ++c) {
    double s = l.b.size() ? static_cast<double>(l.b(0, c)) : 0.0;
    for (std::size_t r = 0; r < x.size(); ++r) s += x[r] * static_cast<double>(l.w(r, c));
    y[c] = s;
  }
  return y;
}

template <class T>
Vec matvec(const flip::nn::Mat<T>& w, const Vec& x) {
  Vec y(static_cast<std::size_t>(w.cols()), 0.0);
  for (std::size_t c = 0; c < y.size(); ++c)
    for (std::size_t r = 0; r < x.size(); ++r) y[c] += x[r] * static_cast<double>(w(r, c));
  return y;
}

template <class T>
Vec mlp(const flip::nn::Mlp2P<T>& p, const Vec& x) {
  Vec h = affine(p.l1, x);
  for (double& v : h) v = v / (1.0 + std::exp(-v));
  return affine(p.l2, h);
}

template <class T>
Vec layer_norm(const flip::nn::LayerNormP<T>& p, const Vec& x) {
  double mean = 0;
  for (double v : x) mean += v;
  mean /= x.size();
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= x.size();
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * static_cast<double>(p.gain(0, i)) + static_cast<double>(p.bias(0, i));
  return y;
}

inline Vec add(Vec a, const Vec& b, double s = 1.0) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
  return a;
}

// softmax(q k^T / sqrt(dh)) v per head; rows are tokens.
inline Rows attention(const Rows& q, const Rows& k, const Rows& v, int heads) {
  const std::size_t d = q[0].size(), dh = d / heads;
  Rows out(q.size(), Vec(v[0].size(), 0.0));
  for (int h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < q.size(); ++i) {
      Vec s(k.size());
      double mx = -1e300;
      for (std::size_t j = 0; j < k.size(); ++j) {
        double dot = 0;
        for (std::size_t c = c0; c < c0 + dh; ++c) dot += q[i][c] * k[j][c];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < k.size(); ++j)
        for (std::size_t c = c0; c < c0 + dh; ++c) out[i][c] += s[j] / z * v[j][c];
    }
  }
  return out;
}

// Straight-line encoder: one token at a time, written from the block
// equations rather than from the library's matrix code.
template <class T>
Rows encoder(const flip::Parameters<T>& p, const flip::ModelConfig& cfg, Rows x, const Rows& coords) {
  const std::size_t n = x.size();
  if (!p.initial_pe.empty())
    for (std::size_t i = 0; i < n; ++i) x[i] = add(x[i], mlp(p.initial_pe[0], coords[i]));
  for (const auto& blk : p.blocks) {
    Rows q(n), k(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      const bool shared = blk.ln_qkv.size() == 1;
      q[i] = matvec(blk.w_q, layer_norm(blk.ln_qkv[0], x[i]));
      k[i] = matvec(blk.w_k, layer_norm(blk.ln_qkv[shared ? 0 : 1], x[i]));
      v[i] = matvec(blk.w_v, layer_norm(blk.ln_qkv[shared ? 0 : 2], x[i]));
      if (!blk.pe.empty()) {
        q[i] = add(q[i], mlp(blk.pe[0], coords[i]));
        k[i] = add(k[i], mlp(blk.pe[1], coords[i]));
        v[i] = add(v[i], mlp(blk.pe[2], coords[i]));
      }
    }
    const Rows a = attention(q, k, v, cfg.n_heads);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec y = add(x[i], matvec(blk.w_out, a[i]), static_cast<double>(blk.alpha(0, 0)));
      x[i] = add(y, mlp(blk.mlp, layer_norm(blk.ln_mlp, y)), static_cast<double>(blk.beta(0, 0)));
    }
  }
  return x;
}

template <class T>
Vec predictor(const flip::Parameters<T>& p, const Rows& enc, const Rows& coords, const Rows& queries) {
  const auto& pr = p.predictor;
  const std::size_t n = enc.size();
  Rows keys(n), vals(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec xh = add(enc[i], mlp(pr.pre, enc[i]));
    const Vec pe = mlp(pr.pe_token, coords[i]);
    Vec kin = layer_norm(pr.ln_k, xh);
    kin.insert(kin.end(), pe.begin(), pe.end());
    keys[i] = mlp(pr.mlp_k, kin);
    vals[i] = add(matvec(pr.w_v, layer_norm(pr.ln_v, xh)), mlp(pr.mlp_v, pe));
  }
  Rows qs;
  for (const auto& t : queries) qs.push_back(mlp(pr.pe_query, t));
  const Rows feat = attention(qs, keys, vals, 1);
  Vec out;
  for (const auto& f : feat) out.push_back(affine(pr.out, add(f, mlp(pr.post, f)))[0]);
  return out;
}

template <class T>
Rows embed(const flip::Parameters<T>& p, const flip::ModelConfig& cfg, const std::vector<flip::Patch>& patches) {
  Rows out;
  for (const auto& pt : patches) {
    Vec px(pt.pixels.begin(), pt.pixels.end());
    out.push_back(mlp(p.embed[static_cast<std::size_t>(cfg.size_index(pt.spec.size))], px));
  }
  return out;
}

// ---------------------------------------------------------------- params

// Scalar count for the reference configuration, tallied by hand:
//   embeddings (sizes 1, 2; d = 8):  size 1: 3*8+8 + 8*8+8 = 104, size 2: 12*8+8 + 8*8+8 = 176   -> 280
//   block: 3 LN 48, W_q/k/v/out 256, alpha 1, 3 PE (2*8+8 + 8*8+8 = 96) 288, LN 16,
//          MLP 8*32+32 + 32*8+8 = 552, beta 1                                                  -> 1162
//   predictor: pre 144, pe_token 96, pe_query 96, ln_k 16, ln_v 16,
//              mlp_k 16*8+8 + 8*8+8 = 208, w_v 64, mlp_v 144, post 144, out 9                    -> 937
inline constexpr std::int64_t kReferenceParamCount = 280 + 1162 + 937;

}  // namespace oracle
