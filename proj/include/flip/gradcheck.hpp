#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "flip/model.hpp"
#include "flip/rng.hpp"
#include "flip/training.hpp"

namespace flip {

/// A small random problem: tokens of mixed sizes with random pixels and
/// coordinates, plus query coordinates and binary targets.
struct GradcheckProblem {
  TokenInput<double> input;
  Mat<double> queries;
  std::vector<std::uint8_t> targets;
};

inline GradcheckProblem make_gradcheck_problem(const ModelConfig& cfg, int tokens, int queries, Rng& rng) {
  GradcheckProblem pb;
  std::vector<Patch> patches;
  for (int i = 0; i < tokens; ++i) {
    Patch p;
    p.spec.size = cfg.sizes[static_cast<std::size_t>(i) % cfg.sizes.size()];
    p.spec.resolution_index = static_cast<int>(static_cast<std::size_t>(i) % cfg.sizes.size());
    p.spec.center_x = uniform(rng, 0.0, 32.0);
    p.spec.center_y = uniform(rng, 0.0, 32.0);
    p.pixels.resize(static_cast<std::size_t>(3 * p.spec.size * p.spec.size));
    for (auto& v : p.pixels) v = static_cast<float>(uniform01(rng));
    patches.push_back(std::move(p));
  }
  const GaussianPrompt prompt = GaussianPrompt::from_frame(16.0, 16.0, 6.0, 3.0, 0.3);
  pb.input = make_token_input<double>(patches, prompt, cfg);
  pb.queries.resize(queries, 2);
  for (int q = 0; q < queries; ++q) {
    pb.queries(q, 0) = uniform(rng, -2.0, 2.0);
    pb.queries(q, 1) = uniform(rng, -2.0, 2.0);
    pb.targets.push_back(static_cast<std::uint8_t>(q % 2));
  }
  return pb;
}

inline double gradcheck_loss(const Parameters<double>& p, const ModelConfig& cfg, const GradcheckProblem& pb) {
  const Mat<double> z = model_forward(p, cfg, pb.input, pb.queries);
  return sparse_bce(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())), pb.targets);
}

struct GradcheckEntry {
  std::string tensor;
  Eigen::Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradcheckReport {
  std::int64_t checked = 0;
  double max_rel_err = 0.0;
  GradcheckEntry worst;
  std::vector<std::string> tensors;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is zero from dividing noise by noise.
inline double gradcheck_rel_err(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Central differences on every scalar of every tensor, double precision.
inline GradcheckReport run_gradcheck(const ModelConfig& cfg, std::uint64_t seed, int tokens = 8, int queries = 4,
                                     double h = 1e-5) {
  Rng rng(seed);
  Parameters<double> p = init_params<double>(cfg, rng);
  const GradcheckProblem pb = make_gradcheck_problem(cfg, tokens, queries, rng);

  Tape<double> tape;
  const Mat<double> z = model_forward(p, cfg, pb.input, pb.queries, &tape);
  Mat<double> dz(z.rows(), 1);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-z(i, 0)));
    dz(i, 0) = (s - pb.targets[static_cast<std::size_t>(i)]) / static_cast<double>(z.rows());
  }
  Parameters<double> g = zeros_like(p);
  model_backward(p, cfg, tape, dz, g);

  std::vector<const Mat<double>*> grads;
  for_each_tensor(g, [&](const std::string&, const Mat<double>& m) { grads.push_back(&m); });
  GradcheckReport rep;
  std::size_t t = 0;
  for_each_tensor(p, [&](const std::string& name, Mat<double>& m) {
    rep.tensors.push_back(name);
    const Mat<double>& gm = *grads[t++];
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double orig = m.data()[i];
      m.data()[i] = orig + h;
      const double lp = gradcheck_loss(p, cfg, pb);
      m.data()[i] = orig - h;
      const double lm = gradcheck_loss(p, cfg, pb);
      m.data()[i] = orig;
      const double num = (lp - lm) / (2.0 * h);
      const double err = gradcheck_rel_err(gm.data()[i], num);
      ++rep.checked;
      if (err > rep.max_rel_err || rep.checked == 1) {
        rep.max_rel_err = std::max(rep.max_rel_err, err);
        rep.worst = {name, i, gm.data()[i], num, err};
      }
    }
  });
  return rep;
}

}  // namespace flip
