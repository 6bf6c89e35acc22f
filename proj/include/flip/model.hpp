#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flip/error.hpp"
#include "flip/geometry.hpp"
#include "flip/nn.hpp"
#include "flip/rng.hpp"
#include "flip/sampler.hpp"

namespace flip {

using nn::Mat;

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_blocks = 3;
  int pe_hidden = 32;
  int mlp_expansion = 4;
  std::vector<int> sizes = default_patch_sizes();
  bool per_layer_pe = true;     // off: positional embedding added once to the input tokens
  bool shared_pe_norm = false;  // on: one LayerNorm feeds the Q/K/V projections

  void validate() const {
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
      throw Error("bad-config", "d_model must be a positive multiple of n_heads");
    if (n_blocks < 1) throw Error("bad-config", "n_blocks must be >= 1");
    if (pe_hidden < 1 || mlp_expansion < 1) throw Error("bad-config", "hidden widths must be >= 1");
    if (sizes.empty()) throw Error("bad-config", "at least one patch size is required");
    for (std::size_t i = 1; i < sizes.size(); ++i)
      if (sizes[i] <= sizes[i - 1]) throw Error("bad-config", "patch sizes must be strictly ascending");
  }

  int size_index(int size) const {
    const auto it = std::find(sizes.begin(), sizes.end(), size);
    return it == sizes.end() ? -1 : static_cast<int>(it - sizes.begin());
  }

  static ModelConfig tiny_desk() { return {}; }
  static ModelConfig small_desk() {
    ModelConfig c;
    c.d_model = 128;
    c.n_blocks = 5;
    return c;
  }
  /// Smallest configuration used for exact checks (param counts, gradients).
  static ModelConfig reference() {
    ModelConfig c;
    c.d_model = 8;
    c.n_heads = 1;
    c.n_blocks = 1;
    c.pe_hidden = 8;
    c.sizes = {1, 2};
    return c;
  }
};

template <class T>
struct BlockParams {
  std::vector<nn::LayerNormP<T>> ln_qkv;  // q, k, v; a single entry when shared
  Mat<T> w_q, w_k, w_v, w_out;
  Mat<T> alpha;                           // 1 x 1
  std::vector<nn::Mlp2P<T>> pe;           // q, k, v; empty without per-layer PE
  nn::LayerNormP<T> ln_mlp;
  nn::Mlp2P<T> mlp;
  Mat<T> beta;                            // 1 x 1
};

template <class T>
struct PredictorParams {
  nn::Mlp2P<T> pre;       // residual
  nn::Mlp2P<T> pe_token;  // PE_i
  nn::Mlp2P<T> pe_query;  // PE_t
  nn::LayerNormP<T> ln_k;
  nn::LayerNormP<T> ln_v;
  nn::Mlp2P<T> mlp_k;     // concat[LN_K(x), PE_i] -> K
  Mat<T> w_v;
  nn::Mlp2P<T> mlp_v;     // PE_i -> value offset
  nn::Mlp2P<T> post;      // residual
  nn::LinearP<T> out;     // d -> 1 logit
};

template <class T>
struct Parameters {
  std::vector<nn::Mlp2P<T>> embed;        // one per patch size
  std::vector<nn::Mlp2P<T>> initial_pe;   // one entry when per-layer PE is off
  std::vector<BlockParams<T>> blocks;
  PredictorParams<T> predictor;
};

/// Calls f(name, tensor) for every tensor in a fixed order. Works on const
/// and mutable parameter sets alike.
template <class P, class F>
void for_each_tensor(P& p, F&& f) {
  auto linear = [&](const std::string& n, auto& l) {
    f(n + ".w", l.w);
    if (l.b.size() > 0) f(n + ".b", l.b);
  };
  auto mlp = [&](const std::string& n, auto& m) {
    linear(n + ".l1", m.l1);
    linear(n + ".l2", m.l2);
  };
  auto ln = [&](const std::string& n, auto& l) {
    f(n + ".gain", l.gain);
    f(n + ".bias", l.bias);
  };
  for (std::size_t i = 0; i < p.embed.size(); ++i) mlp("embed." + std::to_string(i), p.embed[i]);
  for (std::size_t i = 0; i < p.initial_pe.size(); ++i) mlp("initial_pe", p.initial_pe[i]);
  static const char* qkv[] = {"q", "k", "v"};
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    auto& blk = p.blocks[b];
    const std::string n = "blocks." + std::to_string(b);
    for (std::size_t i = 0; i < blk.ln_qkv.size(); ++i)
      ln(n + (blk.ln_qkv.size() == 1 ? std::string(".ln_shared") : ".ln_" + std::string(qkv[i])), blk.ln_qkv[i]);
    f(n + ".w_q", blk.w_q);
    f(n + ".w_k", blk.w_k);
    f(n + ".w_v", blk.w_v);
    f(n + ".w_out", blk.w_out);
    f(n + ".alpha", blk.alpha);
    for (std::size_t i = 0; i < blk.pe.size(); ++i) mlp(n + ".pe_" + qkv[i], blk.pe[i]);
    ln(n + ".ln_mlp", blk.ln_mlp);
    mlp(n + ".mlp", blk.mlp);
    f(n + ".beta", blk.beta);
  }
  auto& pr = p.predictor;
  mlp("predictor.pre", pr.pre);
  mlp("predictor.pe_token", pr.pe_token);
  mlp("predictor.pe_query", pr.pe_query);
  ln("predictor.ln_k", pr.ln_k);
  ln("predictor.ln_v", pr.ln_v);
  mlp("predictor.mlp_k", pr.mlp_k);
  f("predictor.w_v", pr.w_v);
  mlp("predictor.mlp_v", pr.mlp_v);
  mlp("predictor.post", pr.post);
  linear("predictor.out", pr.out);
}

template <class T>
Parameters<T> init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const int d = cfg.d_model, h = cfg.pe_hidden;
  Parameters<T> p;
  for (int s : cfg.sizes) p.embed.push_back(nn::init_mlp2<T>(3 * s * s, d, d, rng));
  if (!cfg.per_layer_pe) p.initial_pe.push_back(nn::init_mlp2<T>(2, h, d, rng));
  for (int b = 0; b < cfg.n_blocks; ++b) {
    BlockParams<T> blk;
    for (int i = 0; i < (cfg.shared_pe_norm ? 1 : 3); ++i) blk.ln_qkv.push_back(nn::init_layer_norm<T>(d));
    blk.w_q = nn::fan_in_uniform<T>(d, d, rng);
    blk.w_k = nn::fan_in_uniform<T>(d, d, rng);
    blk.w_v = nn::fan_in_uniform<T>(d, d, rng);
    blk.w_out = nn::fan_in_uniform<T>(d, d, rng);
    blk.alpha = Mat<T>::Constant(1, 1, T(0.1));
    if (cfg.per_layer_pe)
      for (int i = 0; i < 3; ++i) blk.pe.push_back(nn::init_mlp2<T>(2, h, d, rng));
    blk.ln_mlp = nn::init_layer_norm<T>(d);
    blk.mlp = nn::init_mlp2<T>(d, cfg.mlp_expansion * d, d, rng);
    blk.beta = Mat<T>::Constant(1, 1, T(0.1));
    p.blocks.push_back(std::move(blk));
  }
  auto& pr = p.predictor;
  pr.pre = nn::init_mlp2<T>(d, d, d, rng);
  pr.pe_token = nn::init_mlp2<T>(2, h, d, rng);
  pr.pe_query = nn::init_mlp2<T>(2, h, d, rng);
  pr.ln_k = nn::init_layer_norm<T>(d);
  pr.ln_v = nn::init_layer_norm<T>(d);
  pr.mlp_k = nn::init_mlp2<T>(2 * d, h, d, rng);
  pr.w_v = nn::fan_in_uniform<T>(d, d, rng);
  pr.mlp_v = nn::init_mlp2<T>(d, h, d, rng);
  pr.post = nn::init_mlp2<T>(d, d, d, rng);
  pr.out = nn::init_linear<T>(d, 1, rng);
  return p;
}

/// Closed-form scalar count of init_params(cfg).
inline std::int64_t param_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::int64_t d = cfg.d_model, h = cfg.pe_hidden, e = cfg.mlp_expansion;
  auto mlp = [](std::int64_t in, std::int64_t hid, std::int64_t out) { return in * hid + hid + hid * out + out; };
  std::int64_t n = 0;
  for (std::int64_t s : cfg.sizes) n += mlp(3 * s * s, d, d);
  if (!cfg.per_layer_pe) n += mlp(2, h, d);
  const std::int64_t block = (cfg.shared_pe_norm ? 1 : 3) * 2 * d + 4 * d * d + 1 +
                             (cfg.per_layer_pe ? 3 * mlp(2, h, d) : 0) + 2 * d + mlp(d, e * d, d) + 1;
  n += cfg.n_blocks * block;
  n += mlp(d, d, d) + 2 * mlp(2, h, d) + 4 * d + mlp(2 * d, h, d) + d * d + mlp(d, h, d) + mlp(d, d, d) + d + 1;
  return n;
}

template <class T>
std::int64_t count_scalars(const Parameters<T>& p) {
  std::int64_t n = 0;
  for_each_tensor(p, [&](const std::string&, const Mat<T>& m) { n += m.size(); });
  return n;
}

template <class T>
Parameters<T> zeros_like(const Parameters<T>& p) {
  Parameters<T> z = p;
  for_each_tensor(z, [](const std::string&, Mat<T>& m) { m.setZero(); });
  return z;
}

template <class U, class T>
Parameters<U> cast_params(const Parameters<T>& p, const ModelConfig& cfg) {
  Rng rng(0);
  Parameters<U> out = init_params<U>(cfg, rng);
  std::vector<const Mat<T>*> src;
  for_each_tensor(p, [&](const std::string&, const Mat<T>& m) { src.push_back(&m); });
  std::size_t i = 0;
  for_each_tensor(out, [&](const std::string&, Mat<U>& m) { m = src[i++]->template cast<U>(); });
  return out;
}

// ------------------------------------------------------------------ tokens

/// Patches grouped by resolution, ready for the resolution-specific encoders.
template <class T>
struct TokenInput {
  int n_tokens = 0;
  std::vector<Mat<T>> group_pixels;          // per size: rows are flattened patches
  std::vector<std::vector<int>> group_rows;  // token index of each group row
  Mat<T> coords;                             // n x 2 prompt-relative patch centers
};

template <class T>
TokenInput<T> make_token_input(std::span<const Patch> patches, const GaussianPrompt& prompt,
                               const ModelConfig& cfg) {
  TokenInput<T> in;
  const int k = static_cast<int>(cfg.sizes.size());
  in.n_tokens = static_cast<int>(patches.size());
  in.group_rows.resize(k);
  in.group_pixels.resize(k);
  in.coords.resize(in.n_tokens, 2);
  for (int i = 0; i < in.n_tokens; ++i) {
    const int g = cfg.size_index(patches[i].spec.size);
    if (g < 0) throw Error("no-encoder-for-size", "no encoder for patch size " + std::to_string(patches[i].spec.size));
    in.group_rows[g].push_back(i);
    const Point2 r = to_relative(prompt, patches[i].spec.center_x, patches[i].spec.center_y);
    in.coords(i, 0) = static_cast<T>(r.x);
    in.coords(i, 1) = static_cast<T>(r.y);
  }
  for (int g = 0; g < k; ++g) {
    const int s = cfg.sizes[g];
    in.group_pixels[g].resize(static_cast<Eigen::Index>(in.group_rows[g].size()), 3 * s * s);
    for (std::size_t r = 0; r < in.group_rows[g].size(); ++r) {
      const auto& px = patches[in.group_rows[g][r]].pixels;
      for (int c = 0; c < 3 * s * s; ++c) in.group_pixels[g](static_cast<Eigen::Index>(r), c) = static_cast<T>(px[c]);
    }
  }
  return in;
}

/// Prompt-relative coordinates of arbitrary image points, one row each.
template <class T>
Mat<T> relative_coords(const GaussianPrompt& prompt, std::span<const Point2> points) {
  Mat<T> c(static_cast<Eigen::Index>(points.size()), 2);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Point2 r = to_relative(prompt, points[i].x, points[i].y);
    c(static_cast<Eigen::Index>(i), 0) = static_cast<T>(r.x);
    c(static_cast<Eigen::Index>(i), 1) = static_cast<T>(r.y);
  }
  return c;
}

// ------------------------------------------------------------------ caches

template <class T>
struct BlockCache {
  Mat<T> x;
  std::vector<nn::LayerNormCache<T>> ln;
  std::vector<Mat<T>> ln_out;
  std::vector<nn::Mlp2Cache<T>> pe;
  nn::AttentionCache<T> attn;
  Mat<T> attn_out;  // heads concatenated
  Mat<T> proj;      // attn_out * W_out
  nn::LayerNormCache<T> ln_mlp;
  nn::Mlp2Cache<T> mlp;
  Mat<T> mlp_out;
};

template <class T>
struct PredictorCache {
  nn::Mlp2Cache<T> pre;
  nn::Mlp2Cache<T> pe_token;
  nn::LayerNormCache<T> ln_k;
  nn::LayerNormCache<T> ln_v;
  Mat<T> ln_v_out;
  nn::Mlp2Cache<T> mlp_k;
  nn::Mlp2Cache<T> mlp_v;
  nn::Mlp2Cache<T> pe_query;
  nn::AttentionCache<T> attn;
  nn::Mlp2Cache<T> post;
  Mat<T> g;  // feat + post(feat)
};

/// Everything a backward pass needs from one recorded forward pass.
template <class T>
struct Tape {
  const TokenInput<T>* input = nullptr;
  std::vector<nn::Mlp2Cache<T>> embed;
  nn::Mlp2Cache<T> initial_pe;
  std::vector<BlockCache<T>> blocks;
  PredictorCache<T> predictor;
};

// ------------------------------------------------------------------ forward

/// Resolution-specific encoders E_r applied to every patch.
template <class T>
Mat<T> embed_patches(const Parameters<T>& p, const TokenInput<T>& in, Tape<T>* tape = nullptr) {
  const Eigen::Index d = p.blocks.empty() ? p.predictor.w_v.rows() : p.blocks.front().w_q.rows();
  Mat<T> x(in.n_tokens, d);
  if (tape) tape->embed.assign(in.group_pixels.size(), {});
  for (std::size_t g = 0; g < in.group_pixels.size(); ++g) {
    if (in.group_rows[g].empty()) continue;
    const Mat<T> y = nn::mlp2_forward(p.embed[g], in.group_pixels[g], tape ? &tape->embed[g] : nullptr);
    for (std::size_t r = 0; r < in.group_rows[g].size(); ++r) x.row(in.group_rows[g][r]) = y.row(static_cast<Eigen::Index>(r));
  }
  return x;
}

/// Two-layer SiLU perceptron from 2D coordinates to d_model embeddings.
template <class T>
Mat<T> compute_pe(const nn::Mlp2P<T>& pe, const Mat<T>& coords, nn::Mlp2Cache<T>* cache = nullptr) {
  return nn::mlp2_forward(pe, coords, cache);
}

template <class T>
Mat<T> encoder_block_forward(const BlockParams<T>& blk, const ModelConfig& cfg, const Mat<T>& x,
                             const Mat<T>& coords, BlockCache<T>* c) {
  BlockCache<T> local;
  BlockCache<T>& bc = c ? *c : local;
  const std::size_t n_ln = blk.ln_qkv.size();
  bc.ln.assign(n_ln, {});
  bc.ln_out.resize(n_ln);
  for (std::size_t i = 0; i < n_ln; ++i) bc.ln_out[i] = nn::layer_norm_forward(blk.ln_qkv[i], x, &bc.ln[i]);
  const Mat<T>& xq = bc.ln_out[0];
  const Mat<T>& xk = bc.ln_out[n_ln == 1 ? 0 : 1];
  const Mat<T>& xv = bc.ln_out[n_ln == 1 ? 0 : 2];
  Mat<T> q = xq * blk.w_q;
  Mat<T> k = xk * blk.w_k;
  Mat<T> v = xv * blk.w_v;
  if (!blk.pe.empty()) {
    bc.pe.assign(3, {});
    q += compute_pe(blk.pe[0], coords, &bc.pe[0]);
    k += compute_pe(blk.pe[1], coords, &bc.pe[1]);
    v += compute_pe(blk.pe[2], coords, &bc.pe[2]);
  }
  bc.attn_out = nn::attention_forward(q, k, v, cfg.n_heads, &bc.attn);
  bc.proj = bc.attn_out * blk.w_out;
  Mat<T> y = x + blk.alpha(0, 0) * bc.proj;
  const Mat<T> z = nn::layer_norm_forward(blk.ln_mlp, y, &bc.ln_mlp);
  bc.mlp_out = nn::mlp2_forward(blk.mlp, z, &bc.mlp);
  if (c) bc.x = x;
  return y + blk.beta(0, 0) * bc.mlp_out;
}

/// Runs the encoder stack on embedded tokens. Throws "numerical-overflow"
/// when any activation leaves the finite range.
template <class T>
Mat<T> encoder_forward(const Parameters<T>& p, const ModelConfig& cfg, const Mat<T>& tokens, const Mat<T>& coords,
                       Tape<T>* tape = nullptr) {
  Mat<T> x = tokens;
  if (!p.initial_pe.empty()) x += compute_pe(p.initial_pe[0], coords, tape ? &tape->initial_pe : nullptr);
  if (tape) tape->blocks.assign(p.blocks.size(), {});
  for (std::size_t b = 0; b < p.blocks.size(); ++b)
    x = encoder_block_forward(p.blocks[b], cfg, x, coords, tape ? &tape->blocks[b] : nullptr);
  if (!x.allFinite()) throw Error("numerical-overflow", "non-finite encoder activation");
  return x;
}

/// Keys and values the pixel predictor attends over.
template <class T>
struct PredictorKeys {
  Mat<T> k;  // K_enhanced
  Mat<T> v;  // V_enhanced
};

template <class T>
PredictorKeys<T> predictor_keys(const Parameters<T>& p, const Mat<T>& encoded, const Mat<T>& coords,
                                PredictorCache<T>* c = nullptr) {
  if (encoded.rows() == 0) throw Error("empty-encoding", "pixel predictor needs at least one token");
  const auto& pr = p.predictor;
  const Mat<T> xh = encoded + nn::mlp2_forward(pr.pre, encoded, c ? &c->pre : nullptr);
  const Mat<T> pe = compute_pe(pr.pe_token, coords, c ? &c->pe_token : nullptr);
  const Eigen::Index d = encoded.cols();
  Mat<T> kin(encoded.rows(), 2 * d);
  kin.leftCols(d) = nn::layer_norm_forward(pr.ln_k, xh, c ? &c->ln_k : nullptr);
  kin.rightCols(d) = pe;
  PredictorKeys<T> out;
  out.k = nn::mlp2_forward(pr.mlp_k, kin, c ? &c->mlp_k : nullptr);
  Mat<T> lv = nn::layer_norm_forward(pr.ln_v, xh, c ? &c->ln_v : nullptr);
  out.v = lv * pr.w_v + nn::mlp2_forward(pr.mlp_v, pe, c ? &c->mlp_v : nullptr);
  if (c) c->ln_v_out = std::move(lv);
  return out;
}

/// Mask logits for prompt-relative query coordinates (m x 1).
template <class T>
Mat<T> predictor_logits(const Parameters<T>& p, const PredictorKeys<T>& keys, const Mat<T>& query_coords,
                        PredictorCache<T>* c = nullptr) {
  const auto& pr = p.predictor;
  const Mat<T> q = compute_pe(pr.pe_query, query_coords, c ? &c->pe_query : nullptr);
  const Mat<T> feat = nn::attention_forward(q, keys.k, keys.v, 1, c ? &c->attn : nullptr);
  Mat<T> g = feat + nn::mlp2_forward(pr.post, feat, c ? &c->post : nullptr);
  Mat<T> logits = nn::linear_forward(pr.out, g);
  if (c) c->g = std::move(g);
  return logits;
}

template <class T>
Mat<T> pixel_predictor_forward(const Parameters<T>& p, const Mat<T>& encoded, const Mat<T>& token_coords,
                               const Mat<T>& query_coords, PredictorCache<T>* c = nullptr) {
  return predictor_logits(p, predictor_keys(p, encoded, token_coords, c), query_coords, c);
}

/// Patches + queries -> logits, optionally recording a tape.
template <class T>
Mat<T> model_forward(const Parameters<T>& p, const ModelConfig& cfg, const TokenInput<T>& in,
                     const Mat<T>& query_coords, Tape<T>* tape = nullptr) {
  if (tape) tape->input = &in;
  const Mat<T> tokens = embed_patches(p, in, tape);
  const Mat<T> encoded = encoder_forward(p, cfg, tokens, in.coords, tape);
  return pixel_predictor_forward(p, encoded, in.coords, query_coords, tape ? &tape->predictor : nullptr);
}

// ------------------------------------------------------------------ backward

template <class T>
Mat<T> encoder_block_backward(const BlockParams<T>& blk, const ModelConfig& cfg, const BlockCache<T>& c,
                              const Mat<T>& dout, BlockParams<T>& g) {
  const T alpha = blk.alpha(0, 0), beta = blk.beta(0, 0);
  g.beta(0, 0) += (dout.array() * c.mlp_out.array()).sum();
  const Mat<T> dz = nn::mlp2_backward(blk.mlp, c.mlp, (beta * dout).eval(), g.mlp);
  Mat<T> dy = dout + nn::layer_norm_backward(blk.ln_mlp, c.ln_mlp, dz, g.ln_mlp);

  g.alpha(0, 0) += (dy.array() * c.proj.array()).sum();
  const Mat<T> dproj = alpha * dy;
  g.w_out.noalias() += c.attn_out.transpose() * dproj;
  const Mat<T> dattn = dproj * blk.w_out.transpose();
  const auto ag = nn::attention_backward(c.attn, dattn, cfg.n_heads);

  if (!blk.pe.empty()) {
    nn::mlp2_backward(blk.pe[0], c.pe[0], ag.dq, g.pe[0]);
    nn::mlp2_backward(blk.pe[1], c.pe[1], ag.dk, g.pe[1]);
    nn::mlp2_backward(blk.pe[2], c.pe[2], ag.dv, g.pe[2]);
  }
  const std::size_t n_ln = blk.ln_qkv.size();
  const Mat<T>& xq = c.ln_out[0];
  const Mat<T>& xk = c.ln_out[n_ln == 1 ? 0 : 1];
  const Mat<T>& xv = c.ln_out[n_ln == 1 ? 0 : 2];
  g.w_q.noalias() += xq.transpose() * ag.dq;
  g.w_k.noalias() += xk.transpose() * ag.dk;
  g.w_v.noalias() += xv.transpose() * ag.dv;
  const Mat<T> dxq = ag.dq * blk.w_q.transpose();
  const Mat<T> dxk = ag.dk * blk.w_k.transpose();
  const Mat<T> dxv = ag.dv * blk.w_v.transpose();
  if (n_ln == 1) {
    dy += nn::layer_norm_backward(blk.ln_qkv[0], c.ln[0], (dxq + dxk + dxv).eval(), g.ln_qkv[0]);
  } else {
    dy += nn::layer_norm_backward(blk.ln_qkv[0], c.ln[0], dxq, g.ln_qkv[0]);
    dy += nn::layer_norm_backward(blk.ln_qkv[1], c.ln[1], dxk, g.ln_qkv[1]);
    dy += nn::layer_norm_backward(blk.ln_qkv[2], c.ln[2], dxv, g.ln_qkv[2]);
  }
  return dy;
}

/// Returns dL/d(encoded tokens).
template <class T>
Mat<T> predictor_backward(const Parameters<T>& p, const PredictorCache<T>& c, const Mat<T>& dlogits,
                          Parameters<T>& grads) {
  const auto& pr = p.predictor;
  auto& gp = grads.predictor;
  const Mat<T> dg = nn::linear_backward(pr.out, c.g, dlogits, gp.out);
  const Mat<T> dfeat = dg + nn::mlp2_backward(pr.post, c.post, dg, gp.post);
  const auto ag = nn::attention_backward(c.attn, dfeat, 1);
  nn::mlp2_backward(pr.pe_query, c.pe_query, ag.dq, gp.pe_query);

  gp.w_v.noalias() += c.ln_v_out.transpose() * ag.dv;
  const Mat<T> dlv = ag.dv * pr.w_v.transpose();
  Mat<T> dpe = nn::mlp2_backward(pr.mlp_v, c.mlp_v, ag.dv, gp.mlp_v);
  const Mat<T> dkin = nn::mlp2_backward(pr.mlp_k, c.mlp_k, ag.dk, gp.mlp_k);
  const Eigen::Index d = dlv.cols();
  dpe += dkin.rightCols(d);
  nn::mlp2_backward(pr.pe_token, c.pe_token, dpe, gp.pe_token);

  Mat<T> dxh = nn::layer_norm_backward(pr.ln_k, c.ln_k, Mat<T>(dkin.leftCols(d)), gp.ln_k);
  dxh += nn::layer_norm_backward(pr.ln_v, c.ln_v, dlv, gp.ln_v);
  return dxh + nn::mlp2_backward(pr.pre, c.pre, dxh, gp.pre);
}

/// Exact reverse-mode gradients of a scalar loss given dL/dlogits for the
/// recorded forward pass. Accumulates into `grads` (shaped like params).
template <class T>
void model_backward(const Parameters<T>& p, const ModelConfig& cfg, const Tape<T>& tape, const Mat<T>& dlogits,
                    Parameters<T>& grads) {
  Mat<T> dx = predictor_backward(p, tape.predictor, dlogits, grads);
  for (std::size_t b = p.blocks.size(); b-- > 0;)
    dx = encoder_block_backward(p.blocks[b], cfg, tape.blocks[b], dx, grads.blocks[b]);
  if (!p.initial_pe.empty()) nn::mlp2_backward(p.initial_pe[0], tape.initial_pe, dx, grads.initial_pe[0]);
  const TokenInput<T>& in = *tape.input;
  for (std::size_t g = 0; g < in.group_pixels.size(); ++g) {
    if (in.group_rows[g].empty()) continue;
    Mat<T> dy(static_cast<Eigen::Index>(in.group_rows[g].size()), dx.cols());
    for (std::size_t r = 0; r < in.group_rows[g].size(); ++r) dy.row(static_cast<Eigen::Index>(r)) = dx.row(in.group_rows[g][r]);
    nn::mlp2_backward(p.embed[g], tape.embed[g], dy, grads.embed[g]);
  }
}

// ------------------------------------------------------------------ inference kernel

/// Row-local evaluation of the pixel predictor. Each query is computed with
/// fixed-order loops independent of how many queries are evaluated together,
/// so a pixel's logit is bit-identical across dense and hierarchical passes.
template <class T>
class QueryKernel {
 public:
  QueryKernel(const Parameters<T>& p, PredictorKeys<T> keys) : p_(p), keys_(std::move(keys)) {
    d_ = static_cast<int>(keys_.k.cols());
    n_ = static_cast<int>(keys_.k.rows());
    scale_ = T(1) / std::sqrt(static_cast<T>(d_));
  }

  int tokens() const { return n_; }

  T logit(double rel_x, double rel_y) const {
    thread_local std::vector<T> buf;
    const auto& pr = p_.predictor;
    const int h = static_cast<int>(pr.pe_query.l1.w.cols());
    buf.assign(static_cast<std::size_t>(3 * d_ + h + n_ + d_), T(0));
    T* q = buf.data();
    T* feat = q + d_;
    T* g = feat + d_;
    T* hid = g + d_;
    T* score = hid + h;
    T* hid2 = score + n_;

    // PE_t
    const T u = static_cast<T>(rel_x), v = static_cast<T>(rel_y);
    for (int j = 0; j < h; ++j) {
      const T a = u * pr.pe_query.l1.w(0, j) + v * pr.pe_query.l1.w(1, j) + pr.pe_query.l1.b(0, j);
      hid[j] = a * nn::sigmoid(a);
    }
    affine(pr.pe_query.l2, hid, h, q);

    T mx = -std::numeric_limits<T>::infinity();
    for (int i = 0; i < n_; ++i) {
      score[i] = dot(q, keys_.k.row(i).data(), d_) * scale_;
      mx = std::max(mx, score[i]);
    }
    T sum = 0;
    for (int i = 0; i < n_; ++i) {
      score[i] = std::exp(score[i] - mx);
      sum += score[i];
    }
    for (int i = 0; i < n_; ++i) {
      const T w = score[i] / sum;
      const T* vr = keys_.v.row(i).data();
      for (int c = 0; c < d_; ++c) feat[c] += w * vr[c];
    }

    const int hp = static_cast<int>(pr.post.l1.w.cols());
    std::vector<T>& tmp = scratch();
    tmp.assign(static_cast<std::size_t>(hp), T(0));
    affine(pr.post.l1, feat, d_, tmp.data());
    for (int j = 0; j < hp; ++j) tmp[j] = tmp[j] * nn::sigmoid(tmp[j]);
    affine(pr.post.l2, tmp.data(), hp, hid2);
    for (int c = 0; c < d_; ++c) g[c] = feat[c] + hid2[c];
    T out = pr.out.b(0, 0);
    for (int c = 0; c < d_; ++c) out += g[c] * pr.out.w(c, 0);
    return out;
  }

 private:
  static std::vector<T>& scratch() {
    thread_local std::vector<T> s;
    return s;
  }

  // y = x W + b with W row-major (in x out); accumulates row by row.
  static void affine(const nn::LinearP<T>& l, const T* x, int in, T* y) {
    const int out = static_cast<int>(l.w.cols());
    for (int c = 0; c < out; ++c) y[c] = l.b(0, c);
    for (int r = 0; r < in; ++r) {
      const T xr = x[r];
      const T* w = l.w.row(r).data();
      for (int c = 0; c < out; ++c) y[c] += xr * w[c];
    }
  }

  // Eight interleaved partial sums, reduced in a fixed order.
  static T dot(const T* a, const T* b, int n) {
    T acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    int i = 0;
    for (; i + 8 <= n; i += 8)
      for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
    for (; i < n; ++i) acc[i & 7] += a[i] * b[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  }

  const Parameters<T>& p_;
  PredictorKeys<T> keys_;
  int d_ = 0;
  int n_ = 0;
  T scale_ = 1;
};

}  // namespace flip
