#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "flip/datagen.hpp"
#include "flip/error.hpp"
#include "flip/geometry.hpp"
#include "flip/inference.hpp"
#include "flip/model.hpp"
#include "flip/sampler.hpp"
#include "flip/training.hpp"

namespace flip {

struct ConfigKey {
  const char* key;
  const char* default_value;
  const char* doc;
};

// Every recognized key with its default. Order is the serialization order.
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"sampler.coverage", "1", "patch density c over the 2-sigma ellipse, in [0.1, 2]"},
      {"sampler.tau_overlap", "1", "max mean pre-existing coverage per candidate patch, in [0, 4]"},
      {"sampler.tokens", "512", "patches (tokens) per sample N"},
      {"sampler.max_attempts", "64", "rejections before the overlap threshold doubles"},
      {"sampler.grid_cell", "0", "hash grid cell in pixels; 0 uses the finest patch size"},
      {"sampler.sizes", "1,2,4,8,16", "ascending patch sizes"},
      {"model.d_model", "64", "token width"},
      {"model.n_heads", "4", "encoder attention heads"},
      {"model.n_blocks", "3", "encoder blocks"},
      {"model.pe_hidden", "32", "hidden width of positional-embedding perceptrons"},
      {"model.mlp_expansion", "4", "encoder MLP expansion factor"},
      {"model.per_layer_pe", "true", "inject positional embeddings in every block (false: input only)"},
      {"model.shared_pe_norm", "false", "one LayerNorm feeds Q, K and V"},
      {"train.batch_size", "16", "scenes per optimizer step"},
      {"train.learning_rate", "1e-4", "Adam step size"},
      {"train.steps", "1000", "optimizer steps"},
      {"train.pixels", "2048", "supervised pixels per scene k"},
      {"train.token_jitter", "0.25", "token count drawn uniformly from [(1-j)N, (1+j)N]"},
      {"train.dynamic_sampling", "true", "re-weight distance groups by running IoU"},
      {"train.scenes", "2048", "procedural training scenes"},
      {"train.checkpoint_every", "500", "steps between checkpoints (0: only at the end)"},
      {"train.eval_every", "0", "steps between held-out evaluations (0: only at the end)"},
      {"train.eval_scenes", "64", "held-out scenes for evaluation during training"},
      {"train.warmup_steps", "0", "linear learning-rate warmup"},
      {"train.cosine_decay", "false", "cosine-decay the learning rate to 0 over train.steps"},
      {"augment.max_center_shift", "0.1", "center shift as a fraction of sigma_a"},
      {"augment.sigma_scale_min", "0.8", "lower sigma scale factor"},
      {"augment.sigma_scale_max", "1.25", "upper sigma scale factor"},
      {"augment.max_rotation", "0.1", "rotation perturbation in radians"},
      {"infer.tau_uncertain", "0.01", "uncertainty band [tau, 1 - tau] for re-queries"},
      {"infer.alpha_upsample", "4", "upsampling factor per refinement round"},
      {"infer.k_init", "16", "coarse grid side length"},
      {"infer.sigma_multiplier", "5", "half-width of the query box in sigma_iso"},
      {"data.res_min", "512", "smallest scene side in pixels"},
      {"data.res_max", "2048", "largest scene side in pixels"},
      {"data.footprint_min", "4", "smallest object extent in pixels"},
      {"data.footprint_max", "256", "largest object extent in pixels"},
      {"data.shapes", "ellipse,rectangle,convex,star", "shape families"},
      {"data.supersample", "4", "anti-aliasing samples per pixel side"},
      {"data.count", "64", "scenes written by gen"},
      {"eval.prompt_jitter", "false", "perturb mask-derived prompts during evaluation"},
  };
  return keys;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

/// Merged key-value configuration: defaults, then a file, then overrides.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[k.key] = k.default_value;
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw Error("unknown-key", "unknown configuration key '" + key + "'");
    values_[key] = value;
  }

  /// "section.key=value"
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw Error("bad-config", "expected section.key=value, got '" + assignment + "'");
    set(detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
  }

  void parse(std::istream& is, const std::string& origin = "<config>") {
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      const std::string body = detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
      if (body.empty()) continue;
      if (body.find('=') == std::string::npos)
        throw Error("bad-config", origin + ":" + std::to_string(lineno) + ": expected key = value");
      try {
        apply_override(body);
      } catch (const Error& e) {
        throw Error(e.code(), origin + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  void load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("io", "cannot open config " + path);
    parse(f, path);
  }

  void write(std::ostream& os) const {
    for (const auto& k : config_keys()) os << k.key << " = " << values_.at(k.key) << "\n";
  }

  const std::string& get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw Error("unknown-key", "unknown configuration key '" + key + "'");
    return it->second;
  }

  double get_double(const std::string& key) const {
    const std::string& v = get(key);
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw Error("bad-config", key + ": expected a number, got '" + v + "'");
    }
  }

  int get_int(const std::string& key) const {
    const std::string& v = get(key);
    int out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
      throw Error("bad-config", key + ": expected an integer, got '" + v + "'");
    return out;
  }

  bool get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw Error("bad-config", key + ": expected true/false, got '" + v + "'");
  }

  std::vector<std::string> get_list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = detail::trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  SamplerConfig sampler() const {
    SamplerConfig c;
    c.coverage = get_double("sampler.coverage");
    c.tau_overlap = get_double("sampler.tau_overlap");
    c.token_count = get_int("sampler.tokens");
    c.max_attempts_per_patch = get_int("sampler.max_attempts");
    c.grid_cell = get_int("sampler.grid_cell");
    c.sizes.clear();
    for (const auto& s : get_list("sampler.sizes")) {
      try {
        c.sizes.push_back(std::stoi(s));
      } catch (const std::exception&) {
        throw Error("bad-config", "sampler.sizes: bad entry '" + s + "'");
      }
    }
    c.validate();
    return c;
  }

  ModelConfig model() const {
    ModelConfig c;
    c.d_model = get_int("model.d_model");
    c.n_heads = get_int("model.n_heads");
    c.n_blocks = get_int("model.n_blocks");
    c.pe_hidden = get_int("model.pe_hidden");
    c.mlp_expansion = get_int("model.mlp_expansion");
    c.per_layer_pe = get_bool("model.per_layer_pe");
    c.shared_pe_norm = get_bool("model.shared_pe_norm");
    c.sizes = sampler().sizes;
    c.validate();
    return c;
  }

  AugmentationSpec augmentation() const {
    AugmentationSpec a;
    a.max_center_shift = get_double("augment.max_center_shift");
    a.sigma_scale_min = get_double("augment.sigma_scale_min");
    a.sigma_scale_max = get_double("augment.sigma_scale_max");
    a.max_rotation = get_double("augment.max_rotation");
    a.validate();
    return a;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.batch_size = get_int("train.batch_size");
    t.learning_rate = get_double("train.learning_rate");
    t.total_steps = get_int("train.steps");
    t.pixels = get_int("train.pixels");
    t.token_jitter = get_double("train.token_jitter");
    t.dynamic_sampling = get_bool("train.dynamic_sampling");
    t.augmentation = augmentation();
    t.validate();
    return t;
  }

  InferenceConfig inference() const {
    InferenceConfig c;
    c.tau_uncertain = get_double("infer.tau_uncertain");
    c.alpha_upsample = get_int("infer.alpha_upsample");
    c.k_init = get_int("infer.k_init");
    c.sigma_multiplier = get_double("infer.sigma_multiplier");
    c.validate();
    return c;
  }

  SceneConfig scene() const {
    SceneConfig c;
    c.res_min = get_int("data.res_min");
    c.res_max = get_int("data.res_max");
    c.footprint_min = get_double("data.footprint_min");
    c.footprint_max = get_double("data.footprint_max");
    c.shapes.clear();
    for (const auto& s : get_list("data.shapes")) c.shapes.push_back(parse_shape(s));
    c.supersample = get_int("data.supersample");
    c.validate();
    return c;
  }

  /// Re-validates every module's invariants.
  void validate() const {
    (void)scene();
    (void)sampler();
    (void)model();
    (void)train();
    (void)inference();
  }

  bool operator==(const RunConfig&) const = default;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace flip
