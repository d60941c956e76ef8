// Command-line front end: dataset generation, training, evaluation, the
// gradient and chain-term audit suites, ablations, sensitivity sweeps, and
// metric plotting. Exit codes: 0 success, 1 configuration error, 2 runtime
// failure.
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bsdg/audit.hpp"
#include "bsdg/harness.hpp"

namespace {

using namespace bsdg;

std::vector<double> parse_value_list(const std::string& csv) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    const std::size_t comma = csv.find(',', pos);
    const std::string tok =
        csv.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (tok.empty()) throw config_error("--values: empty entry in '" + csv + "'");
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw config_error("--values: '" + tok + "' is not a number");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw config_error("--values: list is empty");
  return out;
}

ExperimentConfig config_or_default(const std::string& path) {
  if (path.empty()) return benchmark_config();
  return load_config(path);
}

void print_summary(const VariantSummary& s) {
  std::printf("variant %s\n", s.variant.c_str());
  for (const auto& o : s.per_seed) {
    std::printf("  seed %llu:", static_cast<unsigned long long>(o.seed));
    for (std::size_t d = 0; d < s.domains.size(); ++d)
      std::printf(" %s=%.4f", s.domains[d].c_str(), o.domain_acc[d]);
    std::printf(" avg_shifted=%.4f\n", o.avg_shifted);
  }
  std::printf("  avg_shifted: median=%.4f mean=%.4f sd=%.4f\n", s.median_avg_shifted,
              s.mean_avg_shifted, s.sd_avg_shifted);
  for (std::size_t d = 0; d < s.domains.size(); ++d)
    std::printf("  %s: mean=%.4f sd=%.4f\n", s.domains[d].c_str(), s.mean_acc[d],
                s.sd_acc[d]);
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
  auto cfg = config_or_default(config_path);
  cfg.validate();
  if (cfg.data.kind != "glyphs")
    throw config_error("gen-data: data.kind must be 'glyphs' (idx data is an input)");
  std::filesystem::create_directories(out_dir);
  const auto train = make_glyphs(cfg.data.train_samples, cfg.data.num_classes,
                                 cfg.data.resolution,
                                 mix_seed(cfg.data.seed, stream_tag::data, 0));
  const auto eval = make_glyphs(cfg.data.eval_samples, cfg.data.num_classes,
                                cfg.data.resolution,
                                mix_seed(cfg.data.seed, stream_tag::data, 1));
  const std::string train_path = out_dir + "/train.bsds";
  const std::string eval_path = out_dir + "/eval.bsds";
  save_dataset(train, train_path);
  save_dataset(eval, eval_path);
  std::printf("wrote %s (%zu samples)\n", train_path.c_str(), train.size());
  std::printf("wrote %s (%zu samples)\n", eval_path.c_str(), eval.size());
  return 0;
}

int cmd_train(const std::string& config_path, long long seed_override,
              const std::string& out_dir) {
  auto cfg = config_or_default(config_path);
  if (seed_override >= 0) cfg.seeds = {static_cast<std::uint64_t>(seed_override)};
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  cfg.validate();
  const auto data = make_benchmark_data(cfg.data);
  const auto summary = run_variant(cfg, Variant::full, data, cfg.output_dir);
  print_summary(summary);
  std::printf("artifacts under %s/%s\n", cfg.output_dir.c_str(), summary.variant.c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& config_path,
             const std::string& prompt_mode, long long batch_size) {
  auto cfg = config_or_default(config_path);
  if (!prompt_mode.empty()) cfg.eval.prompt_mode = prompt_mode;
  if (batch_size > 0) cfg.eval.batch_size = static_cast<std::size_t>(batch_size);
  cfg.validate();
  const auto ck = load_checkpoint(checkpoint_path);
  const auto data = make_benchmark_data(cfg.data);
  const auto r = evaluate(ck.spec, ck.params, data.suite, cfg.eval);
  std::printf("checkpoint %s (seed %llu, step %llu)\n", checkpoint_path.c_str(),
              static_cast<unsigned long long>(ck.seed),
              static_cast<unsigned long long>(ck.step));
  const auto names = data.suite.names();
  for (std::size_t d = 0; d < names.size(); ++d)
    std::printf("  %s: %.4f\n", names[d].c_str(), r.domain_acc[d]);
  std::printf("  avg_shifted: %.4f\n", r.avg_shifted);
  return 0;
}

int cmd_gradcheck(long long instances) {
  if (instances < 1) throw config_error("--instances must be >= 1");
  const auto rows =
      run_gradcheck_suite(static_cast<std::size_t>(instances), 1e-6, 7);
  bool all_ok = true;
  std::size_t total = 0;
  std::printf("%-22s %10s %14s  %s\n", "family", "instances", "max_rel_err", "status");
  for (const auto& r : rows) {
    const bool ok = r.max_rel_err <= 1e-5;
    all_ok = all_ok && ok;
    total += r.instances;
    std::printf("%-22s %10zu %14.3e  %s\n", r.family.c_str(), r.instances,
                r.max_rel_err, ok ? "ok" : "FAIL");
  }
  std::printf("%zu instances total\n", total);
  if (!all_ok) {
    std::fprintf(stderr, "gradcheck: at least one family exceeded rtol 1e-5\n");
    return 2;
  }
  return 0;
}

int cmd_hypergrad_audit(long long instances, const std::string& eps_csv,
                        double alpha_theta) {
  if (instances < 1) throw config_error("--instances must be >= 1");
  const auto eps_list = parse_value_list(eps_csv);
  for (double e : eps_list)
    if (e <= 0) throw config_error("--eps entries must be > 0");
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(instances));
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = 100 + i;
  const auto rows = hypergrad_audit_table(seeds, eps_list, alpha_theta);
  std::printf("%12s %16s %16s\n", "eps", "median_rel_err", "max_rel_err");
  for (const auto& r : rows)
    std::printf("%12g %16.6e %16.6e\n", r.eps, r.median_rel_err, r.max_rel_err);
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir) {
  auto cfg = config_or_default(config_path);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  cfg.validate();
  const auto rep = ablate(cfg, cfg.output_dir);
  print_summary(rep.full);
  print_summary(rep.no_adv);
  print_summary(rep.no_std);
  std::printf("full >= no_adv (median avg_shifted): %s\n",
              rep.full.median_avg_shifted >= rep.no_adv.median_avg_shifted ? "yes"
                                                                           : "no");
  std::printf("full >= no_std (median avg_shifted): %s\n",
              rep.full.median_avg_shifted >= rep.no_std.median_avg_shifted ? "yes"
                                                                           : "no");
  std::printf("artifacts under %s\n", cfg.output_dir.c_str());
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& param,
              const std::string& values_csv, const std::string& out_dir) {
  auto cfg = config_or_default(config_path);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  cfg.validate();
  const auto values = parse_value_list(values_csv);
  const auto res = sweep(cfg, param, values, cfg.output_dir);
  std::printf("%12s", param.c_str());
  for (const auto& d : res.domains) std::printf(" %14s", d.c_str());
  std::printf(" %14s\n", "avg_shifted");
  for (const auto& p : res.points) {
    std::printf("%12g", p.value);
    for (double a : p.domain_acc) std::printf(" %14.4f", a);
    std::printf(" %14.4f\n", p.avg_shifted);
  }
  std::printf("artifacts under %s/sweep_%s\n", cfg.output_dir.c_str(), param.c_str());
  return 0;
}

int cmd_plot(const std::string& csv_path, const std::string& out_svg,
             const std::string& columns_csv, const std::string& title) {
  const auto parsed = parse_metrics_csv(detail_ds::slurp(csv_path));
  std::vector<std::string> columns;
  if (!columns_csv.empty()) {
    std::size_t pos = 0;
    while (pos <= columns_csv.size()) {
      const std::size_t comma = columns_csv.find(',', pos);
      const std::string tok = columns_csv.substr(
          pos, comma == std::string::npos ? std::string::npos : comma - pos);
      if (tok.empty()) throw config_error("--columns: empty entry");
      columns.push_back(tok);
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
  } else {
    for (const auto& d : parsed.domains) columns.push_back("acc_" + d);
    columns.push_back("avg_shifted");
  }
  const auto chart = chart_from_metrics(parsed, columns, title);
  write_line_chart(out_svg, chart);
  std::printf("wrote %s\n", out_svg.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Surrogate-domain generalization trainer and audit toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint_path, prompt_mode;
  std::string sweep_param, sweep_values, plot_csv, plot_out, plot_columns;
  std::string plot_title = "training metrics";
  std::string audit_eps = "1e-1,1e-2,1e-3";
  long long seed_override = -1, instances = 20, batch_size = -1;
  double alpha_theta = 0.05;

  auto* gen = app.add_subcommand("gen-data", "Generate the glyph dataset files");
  gen->add_option("--config", config_path, "Experiment config JSON");
  gen->add_option("--out", out_dir, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Run bi-level training");
  train->add_option("--config", config_path, "Experiment config JSON");
  train->add_option("--seed", seed_override, "Run only this seed");
  train->add_option("--out", out_dir, "Output directory (default from config)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the shift suite");
  ev->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  ev->add_option("--config", config_path, "Experiment config JSON");
  ev->add_option("--prompt-mode", prompt_mode, "test-batch | source-calibrated");
  ev->add_option("--batch", batch_size, "Evaluation batch size");

  auto* gc = app.add_subcommand("gradcheck", "Gradient oracle suite");
  gc->add_option("--instances", instances, "Random instances per family");

  auto* ha = app.add_subcommand("hypergrad-audit",
                                "Finite-difference vs exact chain-term table");
  ha->add_option("--instances", instances, "Number of random problems");
  ha->add_option("--eps", audit_eps, "Comma-separated probe radii");
  ha->add_option("--alpha", alpha_theta, "Inner-step learning rate");

  auto* ab = app.add_subcommand("ablate", "Run full, no_adv, and no_std variants");
  ab->add_option("--config", config_path, "Experiment config JSON");
  ab->add_option("--out", out_dir, "Output directory (default from config)");

  auto* sw = app.add_subcommand("sweep", "Sensitivity sweep over one parameter");
  sw->add_option("--param", sweep_param,
                 "Axis: K, lambda, eps_theta, m, eval_batch, prompt_mode")
      ->required();
  sw->add_option("--values", sweep_values, "Comma-separated values")->required();
  sw->add_option("--config", config_path, "Experiment config JSON");
  sw->add_option("--out", out_dir, "Output directory (default from config)");

  auto* pl = app.add_subcommand("plot", "Render a metrics CSV to an SVG chart");
  pl->add_option("--csv", plot_csv, "Metrics CSV path")->required();
  pl->add_option("--out", plot_out, "Output SVG path")->required();
  pl->add_option("--columns", plot_columns, "Comma-separated column names");
  pl->add_option("--title", plot_title, "Chart title");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_dir);
    if (train->parsed()) return cmd_train(config_path, seed_override, out_dir);
    if (ev->parsed())
      return cmd_eval(checkpoint_path, config_path, prompt_mode, batch_size);
    if (gc->parsed()) return cmd_gradcheck(instances);
    if (ha->parsed()) return cmd_hypergrad_audit(instances, audit_eps, alpha_theta);
    if (ab->parsed()) return cmd_ablate(config_path, out_dir);
    if (sw->parsed()) return cmd_sweep(config_path, sweep_param, sweep_values, out_dir);
    if (pl->parsed()) return cmd_plot(plot_csv, plot_out, plot_columns, plot_title);
  } catch (const config_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
