#pragma once

// End-to-end training on procedural scenes, shared by the CLI and the
// acceptance suite.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "flip/checkpoint.hpp"
#include "flip/config.hpp"
#include "flip/datagen.hpp"
#include "flip/inference.hpp"
#include "flip/training.hpp"

namespace flip {

// Independent streams derived from the run seed.
inline std::uint64_t training_scene_seed(std::uint64_t seed) { return mix_seed(seed, 0x7EA1); }
inline std::uint64_t heldout_scene_seed(std::uint64_t seed) { return mix_seed(seed, 0x4E1D); }
inline std::uint64_t init_seed(std::uint64_t seed) { return mix_seed(seed, 0x1417); }

/// Learning rate at `step` (0-based): linear warmup, then constant or cosine
/// decay to zero at `total`.
inline double scheduled_learning_rate(double base, std::int64_t step, std::int64_t total, std::int64_t warmup,
                                      bool cosine) {
  if (warmup > 0 && step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (!cosine) return base;
  const double span = static_cast<double>(std::max<std::int64_t>(1, total - warmup));
  const double t = std::min(1.0, static_cast<double>(step - warmup) / span);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Mean IoU of `params` over held-out scenes [0, count) with mask-derived prompts.
inline IouSummary heldout_iou(const Parameters<float>& params, const RunConfig& cfg, std::uint64_t seed, int count,
                              bool hierarchical) {
  const SceneConfig scene = cfg.scene();
  const Segmenter<float> seg{params, cfg.model(), cfg.sampler(), cfg.inference(), hierarchical, seed};
  std::vector<double> ious;
  for (int i = 0; i < count; ++i) {
    const GeneratedScene sc = dataset_scene(scene, heldout_scene_seed(seed), static_cast<std::uint64_t>(i));
    ious.push_back(iou(seg.segment(sc.image, mask_moments(sc.mask)).binary, sc.mask));
  }
  return summarize(ious);
}

struct TrainingOptions {
  std::filesystem::path out_dir;  // checkpoint.flip and train_log.csv; empty: write nothing
  int workers = 1;
  int progress_every = 50;  // steps between progress lines on `log`
};

/// Trains from scratch for train.steps steps. Scenes are regenerated from
/// (seed, index) when drawn, so memory does not grow with train.scenes.
inline Parameters<float> run_training(const RunConfig& cfg, std::uint64_t seed, const TrainingOptions& opt,
                                      std::ostream& log) {
  cfg.validate();
  const ModelConfig mcfg = cfg.model();
  const SceneConfig scene = cfg.scene();
  TrainConfig tcfg = cfg.train();
  tcfg.workers = opt.workers;
  const int n_scenes = cfg.get_int("train.scenes");
  const int warmup = cfg.get_int("train.warmup_steps");
  const bool cosine = cfg.get_bool("train.cosine_decay");
  const int ckpt_every = cfg.get_int("train.checkpoint_every");
  const int eval_every = cfg.get_int("train.eval_every");
  const int eval_scenes = cfg.get_int("train.eval_scenes");
  if (n_scenes < 1 || warmup < 0 || ckpt_every < 0 || eval_every < 0 || eval_scenes < 0)
    throw Error("bad-config", "train.scenes must be >= 1 and step intervals >= 0");

  Rng init(init_seed(seed));
  Trainer<float> trainer(mcfg, cfg.sampler(), tcfg, init_params<float>(mcfg, init));
  Rng order(mix_seed(seed, 0xBA7C));
  const std::uint64_t step_seed = mix_seed(seed, 0x57E9);

  std::ofstream csv;
  const std::string ckpt = opt.out_dir.empty() ? std::string() : (opt.out_dir / "checkpoint.flip").string();
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    csv.open(opt.out_dir / "train_log.csv");
    if (!csv) throw Error("io", "cannot write " + (opt.out_dir / "train_log.csv").string());
    csv << "step,loss,group_iou_mean";
    for (int g = 0; g < kDistanceGroups; ++g) csv << ",p" << g;
    csv << "\n";
  }

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  std::vector<Scene> batch(static_cast<std::size_t>(tcfg.batch_size));
  std::vector<const Scene*> ptrs;
  for (const auto& s : batch) ptrs.push_back(&s);
  double ema = 0.0;
  for (std::int64_t step = 0; step < tcfg.total_steps; ++step) {
    trainer.set_learning_rate(scheduled_learning_rate(tcfg.learning_rate, step, tcfg.total_steps, warmup, cosine));
    for (auto& s : batch) {
      const auto idx = static_cast<std::uint64_t>(uniform_int(order, 0, n_scenes - 1));
      GeneratedScene g = dataset_scene(scene, training_scene_seed(seed), idx);
      s.image = std::move(g.image);
      s.mask = std::move(g.mask);
    }
    const StepResult r = trainer.step(ptrs, step_seed);
    ema = step == 0 ? r.loss : 0.98 * ema + 0.02 * r.loss;
    if (csv.is_open()) csv << format_train_log(step + 1, r, trainer.stats()) << "\n";
    const std::int64_t done = step + 1;
    if (opt.progress_every > 0 && (done % opt.progress_every == 0 || done == tcfg.total_steps)) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "step %lld loss %.5f (ema %.5f) %.1fs", static_cast<long long>(done), r.loss, ema,
                    elapsed());
      log << buf << std::endl;
    }
    if (!ckpt.empty() && ckpt_every > 0 && done % ckpt_every == 0 && done != tcfg.total_steps)
      save_checkpoint(ckpt, trainer.params(), cfg);
    if (eval_every > 0 && done % eval_every == 0 && done != tcfg.total_steps && eval_scenes > 0) {
      const IouSummary s = heldout_iou(trainer.params(), cfg, seed, eval_scenes, false);
      log << "eval step " << done << " mean_iou " << s.mean << " std " << s.stddev << std::endl;
    }
  }
  if (!ckpt.empty()) save_checkpoint(ckpt, trainer.params(), cfg);
  if (eval_scenes > 0) {
    const IouSummary s = heldout_iou(trainer.params(), cfg, seed, eval_scenes, false);
    log << "eval step " << tcfg.total_steps << " mean_iou " << s.mean << " std " << s.stddev << std::endl;
  }
  return trainer.params();
}

}  // namespace flip
