#pragma once

// Dense building blocks with explicit forward caches and exact reverse-mode
// gradients. Activations are row-major (one token or query per row).

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "flip/rng.hpp"

namespace flip::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
struct LinearP {
  Mat<T> w;  // in x out
  Mat<T> b;  // 1 x out (empty when bias-free)
};

template <class T>
struct Mlp2P {
  LinearP<T> l1;
  LinearP<T> l2;
};

template <class T>
struct LayerNormP {
  Mat<T> gain;  // 1 x d
  Mat<T> bias;  // 1 x d
};

// Uniform with variance 1/fan_in; biases start at zero.
template <class T>
Mat<T> fan_in_uniform(int in, int out, Rng& rng) {
  const double a = std::sqrt(3.0 / in);
  Mat<T> w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(uniform(rng, -a, a));
  return w;
}

template <class T>
LinearP<T> init_linear(int in, int out, Rng& rng, bool bias = true) {
  LinearP<T> p;
  p.w = fan_in_uniform<T>(in, out, rng);
  if (bias) p.b = Mat<T>::Zero(1, out);
  return p;
}

template <class T>
Mlp2P<T> init_mlp2(int in, int hidden, int out, Rng& rng) {
  return {init_linear<T>(in, hidden, rng), init_linear<T>(hidden, out, rng)};
}

template <class T>
LayerNormP<T> init_layer_norm(int d) {
  return {Mat<T>::Ones(1, d), Mat<T>::Zero(1, d)};
}

// ---------------------------------------------------------------- linear

template <class T>
Mat<T> linear_forward(const LinearP<T>& p, const Mat<T>& x) {
  Mat<T> y(x.rows(), p.w.cols());
  y.noalias() = x * p.w;
  if (p.b.size() > 0) y.rowwise() += p.b.row(0);
  return y;
}

// Accumulates parameter gradients into g; returns dL/dx.
template <class T>
Mat<T> linear_backward(const LinearP<T>& p, const Mat<T>& x, const Mat<T>& dy, LinearP<T>& g) {
  g.w.noalias() += x.transpose() * dy;
  if (p.b.size() > 0) g.b += dy.colwise().sum();
  Mat<T> dx(dy.rows(), p.w.rows());
  dx.noalias() = dy * p.w.transpose();
  return dx;
}

// ---------------------------------------------------------------- SiLU MLP

template <class T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
struct Mlp2Cache {
  Mat<T> x;
  Mat<T> pre;
  Mat<T> act;
};

template <class T>
Mat<T> mlp2_forward(const Mlp2P<T>& p, const Mat<T>& x, Mlp2Cache<T>* cache = nullptr) {
  Mat<T> pre = linear_forward(p.l1, x);
  Mat<T> act = pre.unaryExpr([](T v) { return v * sigmoid(v); });
  Mat<T> y = linear_forward(p.l2, act);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

template <class T>
Mat<T> mlp2_backward(const Mlp2P<T>& p, const Mlp2Cache<T>& c, const Mat<T>& dy, Mlp2P<T>& g) {
  Mat<T> dact = linear_backward(p.l2, c.act, dy, g.l2);
  Mat<T> dpre = dact.binaryExpr(c.pre, [](T d, T v) {
    const T s = sigmoid(v);
    return d * s * (T(1) + v * (T(1) - s));
  });
  return linear_backward(p.l1, c.x, dpre, g.l1);
}

// ---------------------------------------------------------------- LayerNorm

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
struct LayerNormCache {
  Mat<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

template <class T>
Mat<T> layer_norm_forward(const LayerNormP<T>& p, const Mat<T>& x, LayerNormCache<T>* cache = nullptr) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat<T> xhat(n, d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    rstd(i) = T(1) / std::sqrt(var + T(kLayerNormEps));
    xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
  }
  Mat<T> y = (xhat.array().rowwise() * p.gain.row(0).array()).rowwise() + p.bias.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <class T>
Mat<T> layer_norm_backward(const LayerNormP<T>& p, const LayerNormCache<T>& c, const Mat<T>& dy,
                           LayerNormP<T>& g) {
  g.gain += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  g.bias += dy.colwise().sum();
  const Eigen::Index n = dy.rows(), d = dy.cols();
  Mat<T> dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto dxhat = (dy.row(i).array() * p.gain.row(0).array()).eval();
    const T m1 = dxhat.mean();
    const T m2 = (dxhat * c.xhat.row(i).array()).mean();
    dx.row(i) = c.rstd(i) * (dxhat - m1 - c.xhat.row(i).array() * m2);
  }
  return dx;
}

// ---------------------------------------------------------------- attention

template <class T>
struct AttentionCache {
  Mat<T> q, k, v;
  std::vector<Mat<T>> probs;  // per head, queries x keys
};

template <class T>
void softmax_rows(Mat<T>& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const T mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp();
    s.row(i) /= s.row(i).sum();
  }
}

// softmax(Q_h K_h^T / sqrt(d_h)) V_h per head, heads concatenated along columns.
template <class T>
Mat<T> attention_forward(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, int heads,
                         AttentionCache<T>* cache = nullptr) {
  const Eigen::Index dh = q.cols() / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Mat<T> out(q.rows(), v.cols());
  if (cache) cache->probs.resize(heads);
  for (int h = 0; h < heads; ++h) {
    Mat<T> s(q.rows(), k.rows());
    s.noalias() = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose();
    s *= scale;
    softmax_rows(s);
    out.middleCols(h * dh, dh).noalias() = s * v.middleCols(h * dh, dh);
    if (cache) cache->probs[h] = std::move(s);
  }
  if (cache) {
    cache->q = q;
    cache->k = k;
    cache->v = v;
  }
  return out;
}

template <class T>
struct AttentionGrads {
  Mat<T> dq, dk, dv;
};

template <class T>
AttentionGrads<T> attention_backward(const AttentionCache<T>& c, const Mat<T>& dout, int heads) {
  const Eigen::Index dh = c.q.cols() / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  AttentionGrads<T> g{Mat<T>(c.q.rows(), c.q.cols()), Mat<T>(c.k.rows(), c.k.cols()),
                      Mat<T>(c.v.rows(), c.v.cols())};
  for (int h = 0; h < heads; ++h) {
    const Mat<T>& p = c.probs[h];
    const auto dO = dout.middleCols(h * dh, dh);
    g.dv.middleCols(h * dh, dh).noalias() = p.transpose() * dO;
    Mat<T> dp(p.rows(), p.cols());
    dp.noalias() = dO * c.v.middleCols(h * dh, dh).transpose();
    const auto row_dot = (dp.array() * p.array()).rowwise().sum().eval();
    Mat<T> ds = (p.array() * (dp.array().colwise() - row_dot)).matrix() * scale;
    g.dq.middleCols(h * dh, dh).noalias() = ds * c.k.middleCols(h * dh, dh);
    g.dk.middleCols(h * dh, dh).noalias() = ds.transpose() * c.q.middleCols(h * dh, dh);
  }
  return g;
}

}  // namespace flip::nn
