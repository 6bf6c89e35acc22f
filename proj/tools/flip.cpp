// Command-line entry point: gen, sample, train, eval, infer, params, gradcheck.
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "flip/flip.hpp"

namespace fs = std::filesystem;
using namespace flip;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  int workers = 1;
  std::string out;
};

void add_common(CLI::App* sub, Common& c, bool with_out) {
  sub->add_option("--config", c.config, "flat 'section.key = value' config file");
  sub->add_option("--set", c.sets, "override one key: section.key=value (repeatable)");
  sub->add_option("--seed", c.seed, "random seed");
  sub->add_option("--workers", c.workers, "worker threads")->check(CLI::PositiveNumber);
  if (with_out) sub->add_option("--out", c.out, "output directory")->required();
}

// Defaults (or a base config), then the file, then --set overrides.
RunConfig build_config(const Common& c, RunConfig base = {}) {
  if (!c.config.empty()) base.load_file(c.config);
  for (const auto& s : c.sets) base.apply_override(s);
  base.validate();
  return base;
}

// Checkpointed architecture wins; overriding it would not match the tensors.
RunConfig checkpoint_config(const Common& c, const LoadedModel& lm) {
  const RunConfig cfg = build_config(c, lm.config);
  for (const auto& k : config_keys()) {
    const std::string key = k.key;
    if ((key.rfind("model.", 0) == 0 || key == "sampler.sizes") && cfg.get(key) != lm.config.get(key))
      throw UsageError(key + " is fixed by the checkpoint");
  }
  return cfg;
}

void print_seed(const Common& c) { std::cout << "seed " << c.seed << "\n"; }

GaussianPrompt parse_prompt(const std::string& s) {
  std::vector<double> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      v.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw UsageError("bad prompt value '" + item + "'");
    }
  }
  if (v.size() != 5) throw UsageError("--prompt expects mu_x,mu_y,cov_xx,cov_xy,cov_yy");
  return GaussianPrompt::from_covariance(v[0], v[1], Cov2{v[2], v[3], v[4]});
}

GaussianPrompt resolve_prompt(const std::string& prompt, const std::string& mask_path) {
  if (!prompt.empty() && !mask_path.empty()) throw UsageError("give either --prompt or --mask, not both");
  if (!prompt.empty()) return parse_prompt(prompt);
  if (!mask_path.empty()) return mask_moments(read_mask_png(mask_path));
  throw UsageError("a prompt is required: --prompt or --mask");
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ------------------------------------------------------------------ subcommands

int cmd_gen(const Common& c) {
  const RunConfig cfg = build_config(c);
  print_seed(c);
  const int count = cfg.get_int("data.count");
  if (count < 0) throw Error("bad-config", "data.count must be >= 0");
  const auto recs = generate_dataset(cfg.scene(), c.seed, count, c.out, c.workers);
  std::size_t small = 0;
  for (const auto& r : recs) small += r.relative_area < kSmallObjectArea;
  std::cout << "scenes " << recs.size() << "\nsmall_objects " << small << "\nmanifest "
            << (fs::path(c.out) / "manifest.tsv").string() << "\n";
  return 0;
}

int cmd_sample(const Common& c, const std::string& image_path, const std::string& prompt, const std::string& mask) {
  const RunConfig cfg = build_config(c);
  print_seed(c);
  const Image img = read_image_png(image_path);
  const GaussianPrompt p = resolve_prompt(prompt, mask);
  const SamplerConfig scfg = cfg.sampler();
  const PatchBudget budget = allocate_budget(p, scfg);
  Rng rng(c.seed);
  SamplingTrace trace;
  const auto specs = sample_patch_specs(img.width, img.height, p, budget, scfg, rng, &trace);
  fs::create_directories(c.out);
  write_image_png((fs::path(c.out) / "overlay.png").string(), render_patch_overlay(img, specs));
  std::ofstream rec(fs::path(c.out) / "patches.txt");
  if (!rec) throw Error("io", "cannot write patches.txt");
  write_patch_records(rec, specs);
  std::cout << "budget";
  for (std::size_t i = 0; i < budget.sizes.size(); ++i) std::cout << " " << budget.sizes[i] << ":" << budget.counts[i];
  std::cout << "\npatches " << specs.size() << "\nattempts " << trace.attempts << "\nrelaxations " << trace.relaxations
            << "\n";
  return 0;
}

int cmd_train(const Common& c) {
  const RunConfig cfg = build_config(c);
  print_seed(c);
  std::cout << "params " << param_count(cfg.model()) << std::endl;
  TrainingOptions opt;
  opt.out_dir = c.out;
  opt.workers = c.workers;
  run_training(cfg, c.seed, opt, std::cout);
  std::cout << "checkpoint " << (fs::path(c.out) / "checkpoint.flip").string() << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt, const std::string& data_dir, bool hierarchical) {
  const LoadedModel lm = load_checkpoint(ckpt);
  const RunConfig cfg = checkpoint_config(c, lm);
  print_seed(c);
  const Segmenter<float> seg{lm.params, lm.model, cfg.sampler(), cfg.inference(), hierarchical, c.seed};
  const MaskPredictorFn predict = [&](const Image& img, const GaussianPrompt& p, const SceneRecord&) {
    return seg.segment(img, p).binary;
  };
  EvalOptions opt;
  opt.prompt_jitter = cfg.get_bool("eval.prompt_jitter");
  opt.jitter = cfg.augmentation();
  opt.seed = c.seed;
  opt.workers = c.workers;
  const auto recs = read_manifest((fs::path(data_dir) / "manifest.tsv").string());
  const EvalReport rep = evaluate_dataset(predict, recs, data_dir, opt);

  fs::create_directories(c.out);
  std::ofstream summary(fs::path(c.out) / "report.txt"), heat(fs::path(c.out) / "heatmap.csv"),
      per(fs::path(c.out) / "ious.tsv");
  if (!summary || !heat || !per) throw Error("io", "cannot write evaluation outputs in " + c.out);
  write_report_summary(rep, summary);
  write_heatmap_csv(rep, heat);
  per << "#image\tiou\n";
  for (std::size_t i = 0; i < recs.size(); ++i)
    per << recs[i].image_path << '\t' << (std::isnan(rep.iou[i]) ? std::string("failed") : fmt("%.6f", rep.iou[i])) << '\n';
  write_report_summary(rep, std::cout);
  std::cout << "mode " << (hierarchical ? "hierarchical" : "dense") << "\n";
  return 0;
}

int cmd_infer(const Common& c, const std::string& ckpt, const std::string& image_path, const std::string& prompt,
              const std::string& mask, bool hierarchical) {
  const LoadedModel lm = load_checkpoint(ckpt);
  const RunConfig cfg = checkpoint_config(c, lm);
  print_seed(c);
  const Image img = read_image_png(image_path);
  const GaussianPrompt p = resolve_prompt(prompt, mask);
  const auto t0 = std::chrono::steady_clock::now();
  const Segmenter<float> seg{lm.params, lm.model, cfg.sampler(), cfg.inference(), hierarchical, c.seed};
  const MaskResult r = seg.segment(img, p);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  fs::create_directories(c.out);
  write_mask_png((fs::path(c.out) / "mask.png").string(), r.binary);

  std::ostringstream s;
  s << "box " << r.box.x << " " << r.box.y << " " << r.box.width << " " << r.box.height << "\n";
  s << "mode " << (hierarchical ? "hierarchical" : "dense") << "\n";
  s << "rounds " << r.rounds << "\nqueries " << r.queries << "\nround_queries";
  for (auto q : r.round_queries) s << " " << q;
  s << "\nforeground " << r.binary.count() << "\nwall_time_s " << fmt("%.4f", secs) << "\n";
  std::ofstream(fs::path(c.out) / "summary.txt") << s.str();
  std::cout << s.str();
  return 0;
}

int cmd_params(const Common& c) {
  const RunConfig cfg = build_config(c);
  print_seed(c);
  std::cout << param_count(cfg.model()) << "\n";
  return 0;
}

int cmd_gradcheck(const Common& c, int tokens, int queries, double tol) {
  const RunConfig cfg = build_config(c);
  print_seed(c);
  const GradcheckReport rep = run_gradcheck(cfg.model(), c.seed, tokens, queries);
  std::cout << "checked " << rep.checked << "\nmax_rel_err " << fmt("%.3e", rep.max_rel_err) << "\nworst "
            << rep.worst.tensor << "[" << rep.worst.index << "] analytic " << fmt("%.9g", rep.worst.analytic)
            << " numeric " << fmt("%.9g", rep.worst.numeric) << "\n";
  if (rep.max_rel_err > tol) {
    std::cerr << "gradcheck failed: max relative error " << rep.max_rel_err << " > " << tol << "\n";
    return 2;
  }
  std::cout << "ok\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flip: foveated patch sampling and Gaussian-prompted segmentation"};
  app.require_subcommand(1);

  Common gen_c, sample_c, train_c, eval_c, infer_c, params_c, grad_c;
  std::string image, prompt, mask, ckpt, data_dir;
  bool hierarchical = false;
  int tokens = 8, queries = 4;
  double tol = 1e-4;

  auto* gen = app.add_subcommand("gen", "generate a procedural scene dataset");
  add_common(gen, gen_c, true);

  auto* sample = app.add_subcommand("sample", "draw a patch layout and write an overlay");
  add_common(sample, sample_c, true);
  sample->add_option("--image", image, "input PNG")->required();
  sample->add_option("--prompt", prompt, "mu_x,mu_y,cov_xx,cov_xy,cov_yy");
  sample->add_option("--mask", mask, "mask PNG to derive the prompt from");

  auto* train = app.add_subcommand("train", "train on procedural scenes");
  add_common(train, train_c, true);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a generated dataset");
  add_common(eval, eval_c, true);
  eval->add_option("--checkpoint", ckpt, "checkpoint path")->required();
  eval->add_option("--data", data_dir, "dataset directory containing manifest.tsv")->required();
  eval->add_flag("--hierarchical", hierarchical, "use hierarchical refinement");

  auto* infer = app.add_subcommand("infer", "segment one image for one prompt");
  add_common(infer, infer_c, true);
  infer->add_option("--checkpoint", ckpt, "checkpoint path")->required();
  infer->add_option("--image", image, "input PNG")->required();
  infer->add_option("--prompt", prompt, "mu_x,mu_y,cov_xx,cov_xy,cov_yy");
  infer->add_option("--mask", mask, "mask PNG to derive the prompt from");
  infer->add_flag("--hierarchical", hierarchical, "use hierarchical refinement");

  auto* params = app.add_subcommand("params", "print the parameter count of a configuration");
  add_common(params, params_c, false);

  auto* grad = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
  add_common(grad, grad_c, false);
  grad->add_option("--tokens", tokens, "tokens in the test problem")->check(CLI::PositiveNumber);
  grad->add_option("--queries", queries, "queries in the test problem")->check(CLI::PositiveNumber);
  grad->add_option("--tolerance", tol, "maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (*gen) return cmd_gen(gen_c);
    if (*sample) return cmd_sample(sample_c, image, prompt, mask);
    if (*train) return cmd_train(train_c);
    if (*eval) return cmd_eval(eval_c, ckpt, data_dir, hierarchical);
    if (*infer) return cmd_infer(infer_c, ckpt, image, prompt, mask, hierarchical);
    if (*params) return cmd_params(params_c);
    if (*grad) return cmd_gradcheck(grad_c, tokens, queries, tol);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == "bad-config" || e.code() == "unknown-key" ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
