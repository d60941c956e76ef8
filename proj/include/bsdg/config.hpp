// Experiment configuration: one versioned JSON document describing the data
// source, model, losses, optimizer, surrogate pipelines, evaluation protocol,
// and outputs. Unknown keys are errors at every level so sweep typos cannot
// silently fall back to defaults.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bsdg/bilevel.hpp"
#include "bsdg/dataset.hpp"
#include "bsdg/model.hpp"
#include "bsdg/transforms.hpp"

namespace bsdg {

struct DataConfig {
  std::string kind = "glyphs";  // "glyphs" | "idx"
  // Shared by dataset synthesis and held-out domain materialization. Kept
  // separate from the training seeds so every seed of a multi-seed run sees
  // the same data.
  std::uint64_t seed = 42;
  // glyphs
  std::size_t train_samples = 2000;
  std::size_t eval_samples = 1000;
  std::size_t num_classes = 10;
  std::size_t resolution = 16;
  // idx
  std::string train_images, train_labels;
  std::string eval_images, eval_labels;
};

struct SurrogateConfig {
  std::size_t k = 5;  // number of surrogate domains
  std::size_t m = 3;  // steps per pipeline
  std::vector<Pipeline> pipelines;  // empty means: derive from the built-ins
};

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  double alpha_theta = 1e-4;
  double alpha_omega = 1e-5;
  std::size_t decay_epoch = 0;  // 0 means: half of the epoch count
  double decay_factor = 0.1;
  bool log_wall_clock = false;  // keep metrics bitwise reproducible by default
};

struct EvalConfig {
  std::string prompt_mode = "test-batch";  // or "source-calibrated"
  std::size_t batch_size = 32;
};

struct ExperimentConfig {
  int version = 1;
  DataConfig data;
  ModelSpec model;
  AdvConfig<float> inner;
  HypergradConfig<float> hyper;
  SurrogateConfig surrogate;
  TrainConfig train;
  EvalConfig eval;
  std::vector<std::uint64_t> seeds = {1};
  std::string output_dir = "runs";

  void validate() const;
};

namespace detail_cfg {

inline void reject_unknown(const nlohmann::json& j,
                           const std::vector<std::string>& known,
                           const std::string& where) {
  if (!j.is_object()) throw config_error(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const auto& k : known) ok = ok || k == it.key();
    if (!ok) throw config_error(where + ": unknown key '" + it.key() + "'");
  }
}

template <typename T>
void get_into(const nlohmann::json& j, const char* key, T& into,
              const std::string& where) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw config_error(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail_cfg

inline void ExperimentConfig::validate() const {
  if (version != 1)
    throw config_error("config: unsupported version " + std::to_string(version));
  if (data.kind != "glyphs" && data.kind != "idx")
    throw config_error("data.kind must be 'glyphs' or 'idx'");
  if (data.kind == "glyphs") {
    if (data.train_samples == 0 || data.eval_samples == 0)
      throw config_error("data: glyph sample counts must be positive");
  } else {
    if (data.train_images.empty() || data.train_labels.empty())
      throw config_error("data: idx source needs train_images and train_labels");
    if (data.eval_images.empty() || data.eval_labels.empty())
      throw config_error("data: idx source needs eval_images and eval_labels");
  }
  model.validate();
  if (inner.lambda < 0) throw config_error("inner.lambda must be >= 0");
  if (inner.rho <= 0) throw config_error("inner.rho must be > 0");
  if (inner.adv_steps < 1) throw config_error("inner.adv_steps must be >= 1");
  if (hyper.epsilon_theta <= 0) throw config_error("hypergrad.epsilon_theta must be > 0");
  if (surrogate.k == 0) throw config_error("surrogate.k must be >= 1");
  if (surrogate.m == 0) throw config_error("surrogate.m must be >= 1");
  if (!surrogate.pipelines.empty()) {
    if (surrogate.pipelines.size() != surrogate.k)
      throw config_error("surrogate: explicit pipeline list must have exactly k entries");
    for (const auto& p : surrogate.pipelines)
      if (p.steps.size() != surrogate.m)
        throw config_error("surrogate: pipeline '" + p.name + "' must have exactly m steps");
  }
  if (train.batch_size == 0) throw config_error("train.batch_size must be >= 1");
  if (train.alpha_theta <= 0) throw config_error("train.alpha_theta must be > 0");
  if (train.alpha_omega < 0) throw config_error("train.alpha_omega must be >= 0");
  if (train.decay_factor <= 0 || train.decay_factor > 1)
    throw config_error("train.decay_factor must be in (0, 1]");
  if (eval.prompt_mode != "test-batch" && eval.prompt_mode != "source-calibrated")
    throw config_error("eval.prompt_mode must be 'test-batch' or 'source-calibrated'");
  if (eval.batch_size == 0) throw config_error("eval.batch_size must be >= 1");
  if (seeds.empty()) throw config_error("seeds must be nonempty");
  if (output_dir.empty()) throw config_error("output_dir must be nonempty");
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["version"] = c.version;
  nlohmann::json d;
  d["kind"] = c.data.kind;
  d["seed"] = c.data.seed;
  if (c.data.kind == "glyphs") {
    d["train_samples"] = c.data.train_samples;
    d["eval_samples"] = c.data.eval_samples;
    d["num_classes"] = c.data.num_classes;
    d["resolution"] = c.data.resolution;
  } else {
    d["train_images"] = c.data.train_images;
    d["train_labels"] = c.data.train_labels;
    d["eval_images"] = c.data.eval_images;
    d["eval_labels"] = c.data.eval_labels;
  }
  j["data"] = d;
  j["model"] = to_json(c.model);
  j["inner"] = {{"lambda", c.inner.lambda},
                {"rho", c.inner.rho},
                {"adv_steps", c.inner.adv_steps},
                {"xi", c.inner.xi},
                {"kl_clean_ref", c.inner.kl_clean_ref}};
  j["hypergrad"] = {{"epsilon_theta", c.hyper.epsilon_theta},
                    {"mode", c.hyper.mode == HypergradMode::fd ? "fd" : "exact-audit"},
                    {"recompute_committed_grad", c.hyper.recompute_committed_grad},
                    {"normalize_delta", c.hyper.normalize_delta}};
  nlohmann::json s;
  s["k"] = c.surrogate.k;
  s["m"] = c.surrogate.m;
  if (c.surrogate.pipelines.empty()) {
    s["pipelines"] = "default";
  } else {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : c.surrogate.pipelines) arr.push_back(to_json(p));
    s["pipelines"] = arr;
  }
  j["surrogate"] = s;
  j["train"] = {{"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"alpha_theta", c.train.alpha_theta},
                {"alpha_omega", c.train.alpha_omega},
                {"decay_epoch", c.train.decay_epoch},
                {"decay_factor", c.train.decay_factor},
                {"log_wall_clock", c.train.log_wall_clock}};
  j["eval"] = {{"prompt_mode", c.eval.prompt_mode},
               {"batch_size", c.eval.batch_size}};
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail_cfg::get_into;
  using detail_cfg::reject_unknown;
  reject_unknown(j, {"version", "data", "model", "inner", "hypergrad", "surrogate",
                     "train", "eval", "seeds", "output_dir"},
                 "config");
  ExperimentConfig c;
  get_into(j, "version", c.version, "config");
  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d, {"kind", "seed", "train_samples", "eval_samples", "num_classes",
                       "resolution", "train_images", "train_labels", "eval_images",
                       "eval_labels"},
                   "data");
    get_into(d, "kind", c.data.kind, "data");
    get_into(d, "seed", c.data.seed, "data");
    get_into(d, "train_samples", c.data.train_samples, "data");
    get_into(d, "eval_samples", c.data.eval_samples, "data");
    get_into(d, "num_classes", c.data.num_classes, "data");
    get_into(d, "resolution", c.data.resolution, "data");
    get_into(d, "train_images", c.data.train_images, "data");
    get_into(d, "train_labels", c.data.train_labels, "data");
    get_into(d, "eval_images", c.data.eval_images, "data");
    get_into(d, "eval_labels", c.data.eval_labels, "data");
  }
  if (j.contains("model")) c.model = model_spec_from_json(j.at("model"));
  if (j.contains("inner")) {
    const auto& i = j.at("inner");
    reject_unknown(i, {"lambda", "rho", "adv_steps", "xi", "kl_clean_ref"}, "inner");
    get_into(i, "lambda", c.inner.lambda, "inner");
    get_into(i, "rho", c.inner.rho, "inner");
    get_into(i, "adv_steps", c.inner.adv_steps, "inner");
    get_into(i, "xi", c.inner.xi, "inner");
    get_into(i, "kl_clean_ref", c.inner.kl_clean_ref, "inner");
  }
  if (j.contains("hypergrad")) {
    const auto& h = j.at("hypergrad");
    reject_unknown(h, {"epsilon_theta", "mode", "recompute_committed_grad",
                       "normalize_delta"},
                   "hypergrad");
    get_into(h, "epsilon_theta", c.hyper.epsilon_theta, "hypergrad");
    std::string mode = "fd";
    get_into(h, "mode", mode, "hypergrad");
    if (mode == "fd")
      c.hyper.mode = HypergradMode::fd;
    else if (mode == "exact-audit")
      c.hyper.mode = HypergradMode::exact_audit;
    else
      throw config_error("hypergrad.mode must be 'fd' or 'exact-audit'");
    get_into(h, "recompute_committed_grad", c.hyper.recompute_committed_grad,
             "hypergrad");
    get_into(h, "normalize_delta", c.hyper.normalize_delta, "hypergrad");
  }
  if (j.contains("surrogate")) {
    const auto& s = j.at("surrogate");
    reject_unknown(s, {"k", "m", "pipelines"}, "surrogate");
    get_into(s, "k", c.surrogate.k, "surrogate");
    get_into(s, "m", c.surrogate.m, "surrogate");
    if (s.contains("pipelines") && s.at("pipelines") != "default") {
      if (!s.at("pipelines").is_array())
        throw config_error("surrogate.pipelines must be 'default' or an array");
      for (const auto& pj : s.at("pipelines"))
        c.surrogate.pipelines.push_back(pipeline_from_json(pj));
    }
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    reject_unknown(t, {"batch_size", "epochs", "alpha_theta", "alpha_omega",
                       "decay_epoch", "decay_factor", "log_wall_clock"},
                   "train");
    get_into(t, "batch_size", c.train.batch_size, "train");
    get_into(t, "epochs", c.train.epochs, "train");
    get_into(t, "alpha_theta", c.train.alpha_theta, "train");
    get_into(t, "alpha_omega", c.train.alpha_omega, "train");
    get_into(t, "decay_epoch", c.train.decay_epoch, "train");
    get_into(t, "decay_factor", c.train.decay_factor, "train");
    get_into(t, "log_wall_clock", c.train.log_wall_clock, "train");
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    reject_unknown(e, {"prompt_mode", "batch_size"}, "eval");
    get_into(e, "prompt_mode", c.eval.prompt_mode, "eval");
    get_into(e, "batch_size", c.eval.batch_size, "eval");
  }
  get_into(j, "seeds", c.seeds, "config");
  get_into(j, "output_dir", c.output_dir, "config");
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail_ds::slurp(path));
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config '" + path + "': invalid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace bsdg
