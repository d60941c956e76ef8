// Experiment orchestration: surrogate-pipeline derivation for arbitrary
// (k, m), evaluation-domain suites, per-epoch training runs with metrics and
// checkpoints, multi-seed aggregation, ablations, single-axis sweeps, and a
// chain-term audit table comparing the probe estimate against the hand-built
// gradient program.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bsdg/audit.hpp"
#include "bsdg/bilevel.hpp"
#include "bsdg/checkpoint.hpp"
#include "bsdg/config.hpp"
#include "bsdg/dataset.hpp"
#include "bsdg/metrics.hpp"
#include "bsdg/model.hpp"
#include "bsdg/svg.hpp"
#include "bsdg/transforms.hpp"

namespace bsdg {

// ---------------------------------------------------------------------------
// Pipeline derivation
// ---------------------------------------------------------------------------

namespace detail_harness {

// Shrink a magnitude range toward its midpoint. Shrinking keeps the range
// inside the transform's legal domain, so derived variants never need
// per-kind clamping.
inline Transform shrink_toward_mid(Transform t, double f) {
  const double mid = 0.5 * (t.lo + t.hi);
  t.lo = mid - (mid - t.lo) * f;
  t.hi = mid + (t.hi - mid) * f;
  return t;
}

}  // namespace detail_harness

// Derive k pipelines of m steps each from the curated recipes. The first
// five are the built-ins themselves; pipeline i >= 5 reuses recipe i mod 5
// with every range shrunk by 0.6 per generation (a milder variant, distinct
// magnitudes). Fewer steps truncate the recipe; extra steps cycle through
// the recipe's own steps with ranges shrunk by 0.8 per repetition so no two
// steps of one pipeline are identical.
inline std::vector<Pipeline> pipelines_for(std::size_t k, std::size_t m) {
  detail::require(k >= 1, "pipelines_for: k must be >= 1");
  detail::require(m >= 1, "pipelines_for: m must be >= 1");
  const auto base = builtin_pipelines();
  std::vector<Pipeline> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const auto& src = base[i % base.size()];
    const std::size_t gen = i / base.size();
    Pipeline p;
    p.name = src.name;
    double gen_scale = 1.0;
    for (std::size_t g = 0; g < gen; ++g) gen_scale *= 0.6;
    if (gen > 0) p.name += "_v" + std::to_string(gen);
    for (std::size_t j = 0; j < m; ++j) {
      const auto& step = src.steps[j % src.steps.size()];
      const std::size_t rep = j / src.steps.size();
      double rep_scale = 1.0;
      for (std::size_t rcount = 0; rcount < rep; ++rcount) rep_scale *= 0.8;
      p.steps.push_back(
          detail_harness::shrink_toward_mid(step, gen_scale * rep_scale));
    }
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalDomain {
  std::string name;
  LabeledDataset data;
};

// Evaluation suite. By construction domains[0] is the clean source split;
// every later entry is a shifted domain.
struct EvalDomainSuite {
  std::vector<EvalDomain> domains;

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(domains.size());
    for (const auto& d : domains) out.push_back(d.name);
    return out;
  }
};

inline EvalDomainSuite make_eval_suite(const LabeledDataset& clean_eval,
                                       const std::vector<Pipeline>& holdout,
                                       std::uint64_t seed) {
  detail::require(clean_eval.size() > 0, "eval suite: empty evaluation split");
  EvalDomainSuite s;
  s.domains.push_back({"source", clean_eval});
  for (std::size_t i = 0; i < holdout.size(); ++i) {
    s.domains.push_back(
        {holdout[i].name,
         materialize(clean_eval, holdout[i], mix_seed(seed, stream_tag::eval, i))});
  }
  return s;
}

struct EvalResult {
  std::vector<double> domain_acc;  // aligned with the suite's domain order
  double avg_shifted = 0.0;        // mean over domains[1..]; 0 if none exist
};

namespace detail_harness {

inline double argmax_accuracy(const Tensor<float>& logits,
                              const std::vector<int>& labels) {
  const std::size_t n = logits.shape()[0];
  const std::size_t c = logits.shape()[1];
  detail::require(labels.size() == n, "accuracy: label count mismatch");
  std::size_t hits = 0;
  const auto& v = logits.values();
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (v[r * c + j] > v[r * c + best]) best = j;
    if (static_cast<int>(best) == labels[r]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

inline std::vector<std::vector<std::size_t>> sequential_batches(std::size_t n,
                                                                std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t at = 0; at < n; at += batch) {
    const std::size_t end = std::min(n, at + batch);
    std::vector<std::size_t> idx(end - at);
    for (std::size_t i = at; i < end; ++i) idx[i - at] = i;
    out.push_back(std::move(idx));
  }
  return out;
}

}  // namespace detail_harness

// Accuracy over every suite domain. Batching is sequential and unshuffled.
// "test-batch" computes a fresh prompt from each evaluation batch's own
// features (transductive). "source-calibrated" computes one prompt from the
// first batch of the source split and reuses it for every prediction.
inline EvalResult evaluate(const ModelSpec& spec, const ModelParams<float>& params,
                           const EvalDomainSuite& suite, const EvalConfig& ec) {
  detail::require(!suite.domains.empty(), "evaluate: empty suite");
  if (ec.prompt_mode != "test-batch" && ec.prompt_mode != "source-calibrated")
    throw config_error("evaluate: unknown prompt_mode '" + ec.prompt_mode + "'");

  const auto theta = as_constants(params.theta);
  const auto phi = as_constants(params.phi);
  const auto omega = as_constants(params.omega);

  const bool calibrated = ec.prompt_mode == "source-calibrated";
  Prompt<float> fixed_prompt;
  if (calibrated) {
    const auto& src = suite.domains[0].data;
    std::vector<std::size_t> idx(std::min(ec.batch_size, src.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    auto [x, y] = gather_batch(src, idx);
    (void)y;
    fixed_prompt = encode_prompt(spec, omega, backbone_features(spec, theta, x));
  }

  EvalResult out;
  for (const auto& dom : suite.domains) {
    double correct_weighted = 0.0;
    std::size_t total = 0;
    for (const auto& idx :
         detail_harness::sequential_batches(dom.data.size(), ec.batch_size)) {
      auto [x, y] = gather_batch(dom.data, idx);
      Tensor<float> logits =
          calibrated ? predict_logits_with_prompt(spec, theta, phi, fixed_prompt, x)
                     : predict_logits(spec, theta, phi, omega, x);
      correct_weighted +=
          detail_harness::argmax_accuracy(logits, y) * static_cast<double>(y.size());
      total += y.size();
    }
    out.domain_acc.push_back(correct_weighted / static_cast<double>(total));
  }
  if (out.domain_acc.size() > 1) {
    double s = 0.0;
    for (std::size_t i = 1; i < out.domain_acc.size(); ++i) s += out.domain_acc[i];
    out.avg_shifted = s / static_cast<double>(out.domain_acc.size() - 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Variants
// ---------------------------------------------------------------------------

enum class Variant { full, no_adv, no_std, erm };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_adv: return "no_adv";
    case Variant::no_std: return "no_std";
    case Variant::erm: return "erm";
  }
  return "?";
}

// full:   the method as configured.
// no_adv: drops the perturbation-consistency term (lambda = 0).
// no_std: drops feature standardization inside the modulation.
// erm:    plain source-risk baseline. The prompt heads start at scale one /
//         shift zero, the prompt step size is zeroed so they stay there, and
//         standardization is off, so modulation is the identity for the whole
//         run and the classifier trains on source batches alone.
inline ExperimentConfig apply_variant(ExperimentConfig c, Variant v) {
  switch (v) {
    case Variant::full: break;
    case Variant::no_adv: c.inner.lambda = 0.0f; break;
    case Variant::no_std: c.model.standardize = false; break;
    case Variant::erm:
      c.inner.lambda = 0.0f;
      c.train.alpha_omega = 0.0;
      c.model.standardize = false;
      break;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Data assembly
// ---------------------------------------------------------------------------

struct BenchmarkData {
  LabeledDataset train;
  EvalDomainSuite suite;
};

inline BenchmarkData make_benchmark_data(const DataConfig& dc) {
  BenchmarkData bd;
  LabeledDataset clean_eval;
  if (dc.kind == "glyphs") {
    bd.train = make_glyphs(dc.train_samples, dc.num_classes, dc.resolution,
                           mix_seed(dc.seed, stream_tag::data, 0));
    clean_eval = make_glyphs(dc.eval_samples, dc.num_classes, dc.resolution,
                             mix_seed(dc.seed, stream_tag::data, 1));
  } else if (dc.kind == "idx") {
    bd.train = load_idx_pair(dc.train_images, dc.train_labels, dc.num_classes);
    clean_eval = load_idx_pair(dc.eval_images, dc.eval_labels, dc.num_classes);
  } else {
    throw config_error("data.kind must be 'glyphs' or 'idx'");
  }
  bd.suite = make_eval_suite(clean_eval, builtin_holdout_pipelines(), dc.seed);
  return bd;
}

// The reference desk benchmark: 10 glyph classes, 2000 train / 1000 eval at
// 16x16, five surrogate pipelines, three held-out shift domains, 20 epochs,
// five seeds. Learning rates are tuned for this scale; eps_std is raised to
// 1e-2 because a 64-wide f32 backbone routinely produces near-constant batch
// features whose standardization would otherwise amplify backward signals by
// up to 1/eps_std. The probe displacement is normalized so the finite-
// difference radius stays at epsilon_theta even when the outer gradient is
// large.
inline ExperimentConfig benchmark_config() {
  ExperimentConfig c;
  c.data.kind = "glyphs";
  c.data.seed = 42;
  c.data.train_samples = 2000;
  c.data.eval_samples = 1000;
  c.data.num_classes = 10;
  c.data.resolution = 16;
  c.model.eps_std = 0.01f;
  c.hyper.normalize_delta = true;
  c.train.batch_size = 32;
  c.train.epochs = 20;
  c.train.alpha_theta = 0.02;
  c.train.alpha_omega = 0.02;
  c.seeds = {1, 2, 3, 4, 5};
  return c;
}

// ---------------------------------------------------------------------------
// Single training run
// ---------------------------------------------------------------------------

struct RunResult {
  std::uint64_t seed = 0;
  ModelParams<float> params;
  std::vector<std::string> domain_names;
  std::vector<MetricsRecord> records;  // one per epoch
  EvalResult final_eval;               // of the returned parameters
};

inline std::vector<Pipeline> training_pipelines(const ExperimentConfig& cfg) {
  auto pipes = cfg.surrogate.pipelines.empty()
                   ? pipelines_for(cfg.surrogate.k, cfg.surrogate.m)
                   : cfg.surrogate.pipelines;
  // Held-out evaluation recipes must not appear among the training recipes.
  check_pipelines_disjoint(pipes, builtin_holdout_pipelines());
  return pipes;
}

inline RunResult train_run(const ExperimentConfig& cfg, std::uint64_t seed,
                           const LabeledDataset& train_ds,
                           const EvalDomainSuite& suite) {
  cfg.validate();
  detail::require(train_ds.size() > 0, "train_run: empty training split");
  const auto& spec = cfg.model;
  detail::require(train_ds.num_classes == spec.num_classes &&
                      train_ds.height == spec.in_height &&
                      train_ds.width == spec.in_width &&
                      train_ds.channels == spec.in_channels,
                  "train_run: dataset geometry does not match model spec");

  TrainerState<float> st;
  st.params = init_params<float>(spec, seed);
  st.alpha_theta = static_cast<float>(cfg.train.alpha_theta);
  st.alpha_omega = static_cast<float>(cfg.train.alpha_omega);
  st.adv = cfg.inner;
  st.hyper = cfg.hyper;
  st.seed = seed;

  const auto pipelines = training_pipelines(cfg);

  // A run with a zero prompt step size and no consistency term is plain
  // single-level SGD: the prompt-gradient machinery would multiply every
  // result by the zero step size, so skip it instead of computing it.
  const bool plain_sgd = cfg.train.alpha_omega == 0.0 && cfg.inner.lambda == 0.0f;

  const std::size_t epochs = cfg.train.epochs;
  const std::size_t decay_at =
      cfg.train.decay_epoch > 0 ? cfg.train.decay_epoch : epochs / 2;
  const Batcher batcher{train_ds.size(), cfg.train.batch_size, seed};

  RunResult out;
  out.seed = seed;
  out.domain_names = suite.names();

  for (std::size_t e = 0; e < epochs; ++e) {
    if (decay_at > 0 && e == decay_at) {
      st.alpha_theta *= static_cast<float>(cfg.train.decay_factor);
      st.alpha_omega *= static_cast<float>(cfg.train.decay_factor);
    }
    const auto t0 = std::chrono::steady_clock::now();
    double cl = 0.0, adv = 0.0, outer = 0.0, gnt = 0.0, gno = 0.0;
    std::size_t nb = 0;
    for (const auto& idx : batcher.epoch_batches(e)) {
      auto [x, y] = gather_batch(train_ds, idx);
      if (plain_sgd) {
        try {
          RngStream rng(mix_seed(st.seed, stream_tag::inner, st.t));
          auto res = inner_step(spec, st.params, x, y, st.adv, rng, st.alpha_theta);
          cl += res.cl;
          adv += res.adv;
          gnt += task_l2(res.g_in);
          st.params = std::move(res.next);
          st.t += 1;
        } catch (const training_error& err) {
          throw training_error(std::string(err.what()) + " [step " +
                               std::to_string(st.t) + "]");
        }
      } else {
        const auto stats = train_step(spec, st, x, y, pipelines);
        cl += stats.inner_cl;
        adv += stats.inner_adv;
        outer += stats.outer_value;
        gnt += stats.grad_norm_theta;
        gno += stats.grad_norm_omega;
      }
      ++nb;
    }
    const auto ev = evaluate(spec, st.params, suite, cfg.eval);
    const auto t1 = std::chrono::steady_clock::now();

    MetricsRecord r;
    r.step = st.t;
    r.epoch = e + 1;
    r.seed = seed;
    r.inner_cl = cl / static_cast<double>(nb);
    r.inner_adv = adv / static_cast<double>(nb);
    r.outer_loss = outer / static_cast<double>(nb);
    r.grad_norm_theta = gnt / static_cast<double>(nb);
    r.grad_norm_omega = gno / static_cast<double>(nb);
    r.lr_theta = st.alpha_theta;
    r.lr_omega = st.alpha_omega;
    r.domain_acc = ev.domain_acc;
    r.avg_shifted = ev.avg_shifted;
    r.wall_clock_ms =
        cfg.train.log_wall_clock
            ? std::chrono::duration<double, std::milli>(t1 - t0).count()
            : 0.0;
    out.records.push_back(std::move(r));
    out.final_eval = ev;
  }

  if (epochs == 0) out.final_eval = evaluate(spec, st.params, suite, cfg.eval);
  out.params = std::move(st.params);
  return out;
}

// ---------------------------------------------------------------------------
// Multi-seed orchestration
// ---------------------------------------------------------------------------

inline double median_of(std::vector<double> v) {
  detail::require(!v.empty(), "median of empty vector");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::pair<double, double> mean_sd(const std::vector<double>& v) {
  detail::require(!v.empty(), "mean of empty vector");
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s2 = 0.0;
  for (double x : v) s2 += (x - m) * (x - m);
  const double sd =
      v.size() > 1 ? std::sqrt(s2 / static_cast<double>(v.size() - 1)) : 0.0;
  return {m, sd};
}

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::vector<double> domain_acc;
  double avg_shifted = 0.0;
};

struct VariantSummary {
  std::string variant;
  std::vector<std::string> domains;
  std::vector<SeedOutcome> per_seed;
  std::vector<double> mean_acc, sd_acc;  // per domain, across seeds
  double mean_avg_shifted = 0.0;
  double sd_avg_shifted = 0.0;
  double median_avg_shifted = 0.0;
};

inline nlohmann::json to_json(const VariantSummary& s) {
  nlohmann::json j;
  j["variant"] = s.variant;
  j["domains"] = s.domains;
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& p : s.per_seed) {
    nlohmann::json e;
    e["seed"] = p.seed;
    e["domain_acc"] = p.domain_acc;
    e["avg_shifted"] = p.avg_shifted;
    seeds.push_back(e);
  }
  j["per_seed"] = seeds;
  j["mean_acc"] = s.mean_acc;
  j["sd_acc"] = s.sd_acc;
  j["mean_avg_shifted"] = s.mean_avg_shifted;
  j["sd_avg_shifted"] = s.sd_avg_shifted;
  j["median_avg_shifted"] = s.median_avg_shifted;
  return j;
}

// Runs one variant over every configured seed. When out_dir is nonempty each
// seed writes metrics.csv, metrics.jsonl, and checkpoint.bsck under
// <out_dir>/<variant>/seed_<seed>/, plus a summary.json beside them.
inline VariantSummary run_variant(const ExperimentConfig& base, Variant v,
                                  const BenchmarkData& data,
                                  const std::string& out_dir) {
  const auto cfg = apply_variant(base, v);
  VariantSummary summary;
  summary.variant = variant_name(v);
  summary.domains = data.suite.names();

  for (const auto seed : cfg.seeds) {
    const auto run = train_run(cfg, seed, data.train, data.suite);
    SeedOutcome o;
    o.seed = seed;
    o.domain_acc = run.final_eval.domain_acc;
    o.avg_shifted = run.final_eval.avg_shifted;
    summary.per_seed.push_back(o);

    if (!out_dir.empty()) {
      const std::string dir = out_dir + "/" + summary.variant + "/seed_" +
                              std::to_string(seed);
      std::filesystem::create_directories(dir);
      write_metrics_csv(dir + "/metrics.csv", run.domain_names, run.records);
      write_metrics_jsonl(dir + "/metrics.jsonl", run.domain_names, run.records);
      Checkpoint ck;
      ck.spec = cfg.model;
      ck.params = run.params;
      ck.seed = seed;
      ck.step = run.records.empty() ? 0 : run.records.back().step;
      save_checkpoint(ck, dir + "/checkpoint.bsck");
    }
  }

  const std::size_t nd = summary.domains.size();
  std::vector<double> shifted;
  for (const auto& p : summary.per_seed) shifted.push_back(p.avg_shifted);
  for (std::size_t d = 0; d < nd; ++d) {
    std::vector<double> col;
    for (const auto& p : summary.per_seed) col.push_back(p.domain_acc[d]);
    const auto [m, sd] = mean_sd(col);
    summary.mean_acc.push_back(m);
    summary.sd_acc.push_back(sd);
  }
  const auto [m, sd] = mean_sd(shifted);
  summary.mean_avg_shifted = m;
  summary.sd_avg_shifted = sd;
  summary.median_avg_shifted = median_of(shifted);

  if (!out_dir.empty()) {
    const std::string dir = out_dir + "/" + summary.variant;
    std::filesystem::create_directories(dir);
    detail_ds::spew(dir + "/summary.json", to_json(summary).dump(2) + "\n");
  }
  return summary;
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

struct AblateReport {
  VariantSummary full, no_adv, no_std;
};

// Runs the method and its two ablations on identical data and seeds, then
// writes an ablation.json comparing median shifted-domain accuracy.
inline AblateReport ablate(const ExperimentConfig& cfg, const std::string& out_dir) {
  const auto data = make_benchmark_data(cfg.data);
  AblateReport rep;
  rep.full = run_variant(cfg, Variant::full, data, out_dir);
  rep.no_adv = run_variant(cfg, Variant::no_adv, data, out_dir);
  rep.no_std = run_variant(cfg, Variant::no_std, data, out_dir);

  if (!out_dir.empty()) {
    nlohmann::json j;
    j["full"] = to_json(rep.full);
    j["no_adv"] = to_json(rep.no_adv);
    j["no_std"] = to_json(rep.no_std);
    j["full_beats_no_adv"] =
        rep.full.median_avg_shifted >= rep.no_adv.median_avg_shifted;
    j["full_beats_no_std"] =
        rep.full.median_avg_shifted >= rep.no_std.median_avg_shifted;
    std::filesystem::create_directories(out_dir);
    detail_ds::spew(out_dir + "/ablation.json", j.dump(2) + "\n");
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Single-axis sweep
// ---------------------------------------------------------------------------

struct SweepPoint {
  double value = 0.0;
  std::vector<double> domain_acc;
  double avg_shifted = 0.0;
};

struct SweepResult {
  std::string axis;
  std::vector<std::string> domains;
  std::vector<SweepPoint> points;
};

inline ExperimentConfig with_axis_value(ExperimentConfig c, const std::string& axis,
                                        double v) {
  auto as_count = [&](const char* what) {
    if (v < 1.0 || v != std::floor(v))
      throw config_error(std::string("sweep: ") + what +
                         " must be a positive integer, got " + detail_metrics::g9(v));
    return static_cast<std::size_t>(v);
  };
  if (axis == "K") {
    c.surrogate.k = as_count("K");
    c.surrogate.pipelines.clear();  // re-derive to match the new count
  } else if (axis == "lambda") {
    if (v < 0) throw config_error("sweep: lambda must be >= 0");
    c.inner.lambda = static_cast<float>(v);
  } else if (axis == "eps_theta") {
    if (v <= 0) throw config_error("sweep: eps_theta must be > 0");
    c.hyper.epsilon_theta = static_cast<float>(v);
  } else if (axis == "m") {
    c.surrogate.m = as_count("m");
    c.surrogate.pipelines.clear();
  } else if (axis == "eval_batch") {
    c.eval.batch_size = as_count("eval_batch");
  } else if (axis == "prompt_mode") {
    // Numeric encoding for the categorical protocol choice:
    // 0 = test-batch (transductive), 1 = source-calibrated.
    if (v == 0.0) c.eval.prompt_mode = "test-batch";
    else if (v == 1.0) c.eval.prompt_mode = "source-calibrated";
    else throw config_error("sweep: prompt_mode values must be 0 or 1");
  } else {
    throw config_error(
        "sweep: axis must be one of K, lambda, eps_theta, m, eval_batch, prompt_mode");
  }
  return c;
}

// One training run per value (first configured seed), shared data. Writes
// per-value metrics under <out_dir>/sweep_<axis>/, a CSV of final accuracies,
// and a line chart sweep_<axis>.svg.
inline SweepResult sweep(const ExperimentConfig& cfg, const std::string& axis,
                         const std::vector<double>& values,
                         const std::string& out_dir) {
  detail::require(!values.empty(), "sweep: needs at least one value");
  const auto data = make_benchmark_data(cfg.data);
  const std::uint64_t seed = cfg.seeds.front();

  SweepResult res;
  res.axis = axis;
  res.domains = data.suite.names();

  const std::string sweep_dir =
      out_dir.empty() ? "" : out_dir + "/sweep_" + axis;
  for (const double v : values) {
    const auto c = with_axis_value(cfg, axis, v);
    c.validate();
    const auto run = train_run(c, seed, data.train, data.suite);
    SweepPoint p;
    p.value = v;
    p.domain_acc = run.final_eval.domain_acc;
    p.avg_shifted = run.final_eval.avg_shifted;
    res.points.push_back(p);

    if (!sweep_dir.empty()) {
      const std::string dir = sweep_dir + "/" + axis + "_" + detail_metrics::g9(v);
      std::filesystem::create_directories(dir);
      write_metrics_csv(dir + "/metrics.csv", run.domain_names, run.records);
    }
  }

  if (!sweep_dir.empty()) {
    std::string csv = "value";
    for (const auto& d : res.domains) csv += ",acc_" + d;
    csv += ",avg_shifted\n";
    for (const auto& p : res.points) {
      csv += detail_metrics::g9(p.value);
      for (double a : p.domain_acc) csv += "," + detail_metrics::g9(a);
      csv += "," + detail_metrics::g9(p.avg_shifted) + "\n";
    }
    detail_ds::spew(sweep_dir + "/sweep_" + axis + ".csv", csv);

    SvgChart chart;
    chart.title = "sweep over " + axis;
    chart.x_label = axis;
    chart.y_label = "accuracy";
    SvgSeries avg{"avg_shifted", {}, {}};
    for (const auto& p : res.points) {
      avg.x.push_back(p.value);
      avg.y.push_back(p.avg_shifted);
    }
    chart.series.push_back(std::move(avg));
    for (std::size_t d = 0; d < res.domains.size(); ++d) {
      SvgSeries s{"acc_" + res.domains[d], {}, {}};
      for (const auto& p : res.points) {
        s.x.push_back(p.value);
        s.y.push_back(p.domain_acc[d]);
      }
      chart.series.push_back(std::move(s));
    }
    write_line_chart(sweep_dir + "/sweep_" + axis + ".svg", chart);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Chain-term audit table
// ---------------------------------------------------------------------------

struct AuditRow {
  double eps = 0.0;
  double median_rel_err = 0.0;
  double max_rel_err = 0.0;
};

// For each probe radius, the relative gap between the finite-difference
// chain term and the hand-built exact program on small double-precision
// problems, aggregated over seeds.
inline std::vector<AuditRow> hypergrad_audit_table(
    const std::vector<std::uint64_t>& seeds, const std::vector<double>& eps_list,
    double alpha_theta = 0.05) {
  detail::require(!seeds.empty() && !eps_list.empty(),
                  "audit table: seeds and eps list must be nonempty");
  std::vector<AuditRow> rows;
  for (const double eps : eps_list) {
    std::vector<double> errs;
    for (const auto seed : seeds) {
      auto prob = TinyProblem<double>::make(seed);
      auto outer = tiny_outer_grads(prob, prob.params);
      auto program = [&](ad::Tape<double>& t, const BoundParams<double>& ob,
                         const ModelParams<double>& p) {
        return prob.grad_program(t, ob, p);
      };
      auto exact = hypergrad_exact_with(program, prob.params, outer.delta,
                                        alpha_theta);
      auto build = [&](ad::Tape<double>& t, const ModelParams<double>& p,
                       BoundModel<double>& b) { return prob.inner(t, p, b); };
      HypergradConfig<double> hc;
      hc.epsilon_theta = eps;
      auto fd = hypergrad_fd_with(build, prob.params, outer.delta, alpha_theta, hc);
      errs.push_back(prompt_rel_gap(fd, exact));
    }
    AuditRow row;
    row.eps = eps;
    row.median_rel_err = median_of(errs);
    row.max_rel_err = *std::max_element(errs.begin(), errs.end());
    rows.push_back(row);
  }
  return rows;
}

}  // namespace bsdg
