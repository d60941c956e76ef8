#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bsdg/checkpoint.hpp"
#include "bsdg/config.hpp"
#include "bsdg/harness.hpp"
#include "bsdg/metrics.hpp"
#include "bsdg/model.hpp"
#include "bsdg/svg.hpp"

using namespace bsdg;
using ad::Shape;
using ad::Tensor;

namespace {

std::string tmpdir() {
  auto d = std::filesystem::temp_directory_path() / "bsdg_harness_tests";
  std::filesystem::create_directories(d);
  return d.string();
}

std::vector<MetricsRecord> sample_records() {
  std::vector<MetricsRecord> recs;
  MetricsRecord a;
  a.step = 63;
  a.epoch = 1;
  a.seed = 7;
  a.inner_cl = 1.0 / 3.0;
  a.inner_adv = 1e-17;
  a.outer_loss = 2.30258509;
  a.grad_norm_theta = 123456.789;
  a.grad_norm_omega = -0.0625;
  a.lr_theta = 0.1;
  a.lr_omega = 0.01;
  a.domain_acc = {0.5, 0.25, 0.125};
  a.avg_shifted = 0.1875;
  a.wall_clock_ms = 0.0;
  MetricsRecord b = a;
  b.step = 126;
  b.epoch = 2;
  b.inner_cl = 9.87654321e-5;
  b.domain_acc = {0.625, 0.375, 0.0};
  b.avg_shifted = 0.1875;
  recs.push_back(a);
  recs.push_back(b);
  return recs;
}

ModelSpec small_spec() {
  ModelSpec s;
  s.in_channels = 1;
  s.in_height = 4;
  s.in_width = 4;
  s.num_classes = 3;
  s.backbone = "mlp";
  s.mlp_widths = {6, 5};
  s.prompt_widths = {4};
  s.prompt_post_widths = {4};
  s.head_widths = {6};
  return s;
}

}  // namespace

TEST_CASE("metrics csv: header layout and empty run") {
  const std::vector<std::string> domains = {"source", "warp"};
  CHECK(metrics_csv_header(domains) ==
        "step,epoch,seed,inner_cl,inner_adv,outer_loss,grad_norm_theta,"
        "grad_norm_omega,lr_theta,lr_omega,acc_source,acc_warp,avg_shifted,"
        "wall_clock_ms");
  const std::string doc = serialize_metrics_csv(domains, {});
  CHECK(doc == metrics_csv_header(domains) + "\n");
  const auto parsed = parse_metrics_csv(doc);
  CHECK(parsed.domains == domains);
  CHECK(parsed.records.empty());
}

TEST_CASE("metrics csv: serialize -> parse -> serialize is byte-identical") {
  const std::vector<std::string> domains = {"source", "warp", "photo"};
  const auto recs = sample_records();
  const std::string doc = serialize_metrics_csv(domains, recs);
  const auto parsed = parse_metrics_csv(doc);
  REQUIRE(parsed.records.size() == recs.size());
  CHECK(parsed.domains == domains);
  CHECK(serialize_metrics_csv(parsed.domains, parsed.records) == doc);
  CHECK(parsed.records[0].inner_cl == doctest::Approx(1.0 / 3.0).epsilon(1e-9));
  CHECK(parsed.records[1].step == 126);
  CHECK(parsed.records[1].domain_acc[2] == 0.0);
}

TEST_CASE("metrics csv: file round trip") {
  const auto dir = tmpdir();
  const std::vector<std::string> domains = {"source"};
  std::vector<MetricsRecord> recs = sample_records();
  for (auto& r : recs) {
    r.domain_acc = {0.75};
    r.avg_shifted = 0.75;
  }
  const auto path = dir + "/metrics.csv";
  write_metrics_csv(path, domains, recs);
  const auto parsed = parse_metrics_csv(detail_ds::slurp(path));
  CHECK(parsed.records.size() == 2);
  CHECK(parsed.records[0].domain_acc[0] == 0.75);
}

TEST_CASE("metrics csv: malformed documents are rejected with offsets") {
  const std::vector<std::string> domains = {"source"};
  const auto good = serialize_metrics_csv(domains, sample_records().size()
                                                       ? std::vector<MetricsRecord>{}
                                                       : std::vector<MetricsRecord>{});
  CHECK_THROWS_AS(parse_metrics_csv(""), parse_error);

  // Wrong fixed column name.
  CHECK_THROWS_WITH_AS(
      parse_metrics_csv("step,epoch,seed,inner_cl,inner_adv,outer_loss,"
                        "grad_norm_theta,grad_norm_omega,lr_theta,WRONG,"
                        "acc_source,avg_shifted,wall_clock_ms\n"),
      doctest::Contains("lr_omega"), parse_error);

  // Domain column without the acc_ prefix.
  CHECK_THROWS_WITH_AS(
      parse_metrics_csv("step,epoch,seed,inner_cl,inner_adv,outer_loss,"
                        "grad_norm_theta,grad_norm_omega,lr_theta,lr_omega,"
                        "bogus,avg_shifted,wall_clock_ms\n"),
      doctest::Contains("acc_"), parse_error);

  // Row with too few fields: offset points at that row.
  const std::string header = metrics_csv_header(domains);
  const std::string bad_row = header + "\n1,2,3\n";
  try {
    parse_metrics_csv(bad_row);
    FAIL("expected parse_error");
  } catch (const parse_error& e) {
    CHECK(e.offset == header.size() + 1);
  }

  // Non-numeric value.
  CHECK_THROWS_WITH_AS(
      parse_metrics_csv(header + "\n1,1,1,abc,0,0,0,0,0,0,0,0,0\n"),
      doctest::Contains("inner_cl"), parse_error);
}

TEST_CASE("metrics jsonl: one valid JSON object per record") {
  const std::vector<std::string> domains = {"source", "warp"};
  auto recs = sample_records();
  for (auto& r : recs) {
    r.domain_acc = {0.5, 0.25};
  }
  const std::string doc = serialize_metrics_jsonl(domains, recs);
  std::size_t lines = 0, pos = 0;
  while (pos < doc.size()) {
    auto nl = doc.find('\n', pos);
    REQUIRE(nl != std::string::npos);
    const auto j = nlohmann::json::parse(doc.substr(pos, nl - pos));
    CHECK(j.at("step").get<std::uint64_t>() == recs[lines].step);
    CHECK(j.at("acc").at("warp").get<double>() == recs[lines].domain_acc[1]);
    CHECK(j.at("avg_shifted").get<double>() == recs[lines].avg_shifted);
    ++lines;
    pos = nl + 1;
  }
  CHECK(lines == recs.size());
}

TEST_CASE("checkpoint: round trip preserves every bit") {
  const auto spec = small_spec();
  Checkpoint c;
  c.spec = spec;
  c.params = init_params<float>(spec, 42);
  c.seed = 42;
  c.step = 1234567890123ull;

  const std::string bytes = serialize_checkpoint(c);
  CHECK(bytes.substr(0, 4) == "BSCK");
  const auto back = parse_checkpoint(bytes);
  CHECK(back.seed == c.seed);
  CHECK(back.step == c.step);
  CHECK(to_json(back.spec).dump() == to_json(c.spec).dump());

  auto check_set = [](const ParamSet<float>& a, const ParamSet<float>& b) {
    REQUIRE(a.values.size() == b.values.size());
    for (const auto& [name, t] : a.values) {
      REQUIRE(b.values.count(name) == 1);
      const auto& u = b.values.at(name);
      REQUIRE(t.shape() == u.shape());
      for (std::size_t i = 0; i < t.size(); ++i) CHECK(t.values()[i] == u.values()[i]);
    }
  };
  check_set(c.params.theta, back.params.theta);
  check_set(c.params.phi, back.params.phi);
  check_set(c.params.omega, back.params.omega);

  // Serialization is a pure function of the content.
  CHECK(serialize_checkpoint(back) == bytes);
}

TEST_CASE("checkpoint: corruption and truncation are detected") {
  const auto spec = small_spec();
  Checkpoint c;
  c.spec = spec;
  c.params = init_params<float>(spec, 7);
  const std::string bytes = serialize_checkpoint(c);

  SUBCASE("bad magic") {
    std::string b = bytes;
    b[0] = 'X';
    try {
      parse_checkpoint(b);
      FAIL("expected parse_error");
    } catch (const parse_error& e) {
      CHECK(e.offset == 0);
    }
  }
  SUBCASE("unsupported version") {
    std::string b = bytes;
    b[4] = 9;
    try {
      parse_checkpoint(b);
      FAIL("expected parse_error");
    } catch (const parse_error& e) {
      CHECK(e.offset == 4);
    }
  }
  SUBCASE("flipped value byte breaks the checksum") {
    std::string b = bytes;
    b[b.size() - 10] = static_cast<char>(b[b.size() - 10] ^ 0x40);
    CHECK_THROWS_WITH_AS(parse_checkpoint(b), doctest::Contains("checksum"),
                         parse_error);
  }
  SUBCASE("trailing garbage") {
    CHECK_THROWS_WITH_AS(parse_checkpoint(bytes + "z"), doctest::Contains("trailing"),
                         parse_error);
  }
  SUBCASE("truncation") {
    CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() / 2)), parse_error);
  }
}

TEST_CASE("checkpoint: file save and load") {
  const auto dir = tmpdir();
  const auto spec = small_spec();
  Checkpoint c;
  c.spec = spec;
  c.params = init_params<float>(spec, 3);
  c.seed = 3;
  c.step = 99;
  const auto path = dir + "/model.bsck";
  save_checkpoint(c, path);
  const auto back = load_checkpoint(path);
  CHECK(back.step == 99);
  CHECK(serialize_checkpoint(back) == serialize_checkpoint(c));
}

TEST_CASE("config: defaults survive a JSON round trip") {
  ExperimentConfig c;
  c.model = small_spec();
  c.validate();
  const auto j = to_json(c);
  const auto back = config_from_json(j);
  CHECK(to_json(back).dump(2) == j.dump(2));
  CHECK(back.train.batch_size == 32);
  CHECK(back.hyper.mode == HypergradMode::fd);
  CHECK(back.surrogate.pipelines.empty());
}

TEST_CASE("config: explicit pipelines round trip") {
  ExperimentConfig c;
  c.model = small_spec();
  c.surrogate.k = 2;
  c.surrogate.m = 3;
  auto all = builtin_pipelines();
  c.surrogate.pipelines = {all[0], all[1]};
  const auto back = config_from_json(to_json(c));
  REQUIRE(back.surrogate.pipelines.size() == 2);
  CHECK(back.surrogate.pipelines[0].name == all[0].name);
  CHECK(back.surrogate.pipelines[1].steps.size() == 3);
  CHECK(to_json(back).dump() == to_json(c).dump());
}

TEST_CASE("config: unknown keys are rejected at every level") {
  ExperimentConfig c;
  c.model = small_spec();
  auto base = to_json(c);

  auto expect_reject = [&](const char* where, nlohmann::json j) {
    CHECK_THROWS_WITH_AS(config_from_json(j), doctest::Contains("unknown key"),
                         config_error);
    (void)where;
  };

  {
    auto j = base;
    j["extra_top"] = 1;
    expect_reject("top", j);
  }
  {
    auto j = base;
    j["data"]["typo"] = 1;
    expect_reject("data", j);
  }
  {
    auto j = base;
    j["inner"]["lamda"] = 0.5;  // classic typo must not silently default
    expect_reject("inner", j);
  }
  {
    auto j = base;
    j["hypergrad"]["eps"] = 0.1;
    expect_reject("hypergrad", j);
  }
  {
    auto j = base;
    j["surrogate"]["K"] = 5;
    expect_reject("surrogate", j);
  }
  {
    auto j = base;
    j["train"]["lr"] = 0.1;
    expect_reject("train", j);
  }
  {
    auto j = base;
    j["eval"]["mode"] = "x";
    expect_reject("eval", j);
  }
}

TEST_CASE("config: validation rejects out-of-range values") {
  auto make = [] {
    ExperimentConfig c;
    c.model = small_spec();
    return c;
  };
  {
    auto c = make();
    c.version = 2;
    CHECK_THROWS_AS(c.validate(), config_error);
  }
  {
    auto c = make();
    c.inner.lambda = -0.5f;
    CHECK_THROWS_AS(c.validate(), config_error);
  }
  {
    auto c = make();
    c.inner.rho = 0.0f;
    CHECK_THROWS_AS(c.validate(), config_error);
  }
  {
    auto c = make();
    c.hyper.epsilon_theta = 0.0f;
    CHECK_THROWS_AS(c.validate(), config_error);
  }
  {
    auto c = make();
    c.surrogate.k = 0;
    CHECK_THROWS_AS(c.validate(), config_error);
  }
  {
    auto c = make();
    c.surrogate.pipelines = {builtin_pipelines()[0]};  // k defaults to 5
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("exactly k"), config_error);
  }
  {
    auto c = make();
    c.train.decay_factor = 0.0;
    CHECK_THROWS_AS(c.validate(), config_error);
  }
  {
    auto c = make();
    c.eval.prompt_mode = "oracle";
    CHECK_THROWS_AS(c.validate(), config_error);
  }
  {
    auto c = make();
    c.seeds.clear();
    CHECK_THROWS_AS(c.validate(), config_error);
  }
}

TEST_CASE("config: bad mode strings and invalid JSON files") {
  ExperimentConfig c;
  c.model = small_spec();
  auto j = to_json(c);
  j["hypergrad"]["mode"] = "newton";
  CHECK_THROWS_WITH_AS(config_from_json(j), doctest::Contains("fd"), config_error);

  const auto dir = tmpdir();
  const auto path = dir + "/broken.json";
  detail_ds::spew(path, "{not json");
  CHECK_THROWS_AS(load_config(path), config_error);

  const auto good_path = dir + "/good.json";
  detail_ds::spew(good_path, to_json(c).dump(2));
  const auto back = load_config(good_path);
  CHECK(back.train.epochs == c.train.epochs);
}

TEST_CASE("svg: rendering is deterministic and well formed") {
  SvgChart chart;
  chart.title = "loss & accuracy";  // ampersand must be escaped
  chart.x_label = "epoch";
  chart.y_label = "value";
  SvgSeries s1{"train<loss>", {0, 1, 2, 3}, {1.0, 0.5, 0.25, 0.125}};
  SvgSeries s2{"acc", {0, 1, 2, 3}, {0.1, 0.4, 0.6, 0.8}};
  chart.series = {s1, s2};

  const std::string a = render_line_chart(chart);
  const std::string b = render_line_chart(chart);
  CHECK(a == b);
  CHECK(a.find("<svg") == 0);
  CHECK(a.find("</svg>") != std::string::npos);
  CHECK(a.find("loss &amp; accuracy") != std::string::npos);
  CHECK(a.find("train&lt;loss&gt;") != std::string::npos);
  CHECK(a.find("<polyline") != std::string::npos);
  CHECK(a.find("nan") == std::string::npos);
  CHECK(a.find("inf") == std::string::npos);

  const auto dir = tmpdir();
  write_line_chart(dir + "/chart.svg", chart);
  CHECK(detail_ds::slurp(dir + "/chart.svg") == a);
}

TEST_CASE("svg: degenerate inputs stay finite") {
  SvgChart flat;
  flat.series = {{"const", {0, 1, 2}, {0.5, 0.5, 0.5}}};
  const auto a = render_line_chart(flat);
  CHECK(a.find("nan") == std::string::npos);

  SvgChart with_nan;
  with_nan.series = {{"gap",
                      {0, 1, 2, 3},
                      {1.0, std::numeric_limits<double>::quiet_NaN(), 2.0, 3.0}}};
  const auto b = render_line_chart(with_nan);
  CHECK(b.find("nan") == std::string::npos);
  // The NaN splits the series into two polyline runs.
  std::size_t count = 0, pos = 0;
  while ((pos = b.find("<polyline", pos)) != std::string::npos) {
    ++count;
    pos += 9;
  }
  CHECK(count == 2);

  SvgChart empty;
  empty.series = {{"nothing", {}, {}}};
  const auto c = render_line_chart(empty);
  CHECK(c.find("</svg>") != std::string::npos);
}

namespace {

// A deliberately tiny experiment: 4-class glyphs, a narrow model, two short
// pipelines, two epochs. Fast enough to run many times per test binary.
ExperimentConfig micro_cfg(const std::string& out_dir) {
  ExperimentConfig c;
  c.data.seed = 5;
  c.data.train_samples = 48;
  c.data.eval_samples = 24;
  c.data.num_classes = 4;
  c.data.resolution = 16;
  c.model.in_height = 16;
  c.model.in_width = 16;
  c.model.num_classes = 4;
  c.model.mlp_widths = {12, 8};
  c.model.prompt_widths = {6};
  c.model.prompt_post_widths = {6};
  c.model.head_widths = {8};
  c.inner.lambda = 0.5f;
  c.inner.adv_steps = 1;
  c.surrogate.k = 2;
  c.surrogate.m = 2;
  c.train.batch_size = 16;
  c.train.epochs = 2;
  c.train.alpha_theta = 0.05;
  c.train.alpha_omega = 0.005;
  c.seeds = {3};
  c.output_dir = out_dir;
  c.validate();
  return c;
}

}  // namespace

TEST_CASE("pipelines_for: built-ins verbatim, variants shrunk, any k and m") {
  const auto base = builtin_pipelines();
  const auto same = pipelines_for(5, 3);
  REQUIRE(same.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(same[i].name == base[i].name);
    REQUIRE(same[i].steps.size() == base[i].steps.size());
    for (std::size_t j = 0; j < base[i].steps.size(); ++j)
      CHECK(same[i].steps[j] == base[i].steps[j]);
  }

  const auto nine = pipelines_for(9, 3);
  REQUIRE(nine.size() == 9);
  CHECK(nine[5].name == base[0].name + "_v1");
  // A shrunk variant keeps the midpoint but narrows the range.
  const auto& orig = base[0].steps[1];
  const auto& shr = nine[5].steps[1];
  CHECK(shr.kind == orig.kind);
  CHECK(0.5 * (shr.lo + shr.hi) == doctest::Approx(0.5 * (orig.lo + orig.hi)));
  CHECK(shr.hi - shr.lo == doctest::Approx(0.6 * (orig.hi - orig.lo)));

  const auto short_p = pipelines_for(3, 1);
  for (const auto& p : short_p) CHECK(p.steps.size() == 1);

  const auto long_p = pipelines_for(2, 5);
  for (const auto& p : long_p) {
    CHECK(p.steps.size() == 5);
    // Cycled steps reuse the recipe's kinds with narrower ranges.
    CHECK(p.steps[3].kind == p.steps[0].kind);
    CHECK(p.steps[3].hi - p.steps[3].lo ==
          doctest::Approx(0.8 * (p.steps[0].hi - p.steps[0].lo)));
    CHECK(!(p.steps[3] == p.steps[0]));
  }

  // Every sweep combination yields k pipelines of m steps, all disjoint from
  // the held-out evaluation recipes.
  for (std::size_t k : {1u, 3u, 5u, 7u, 9u})
    for (std::size_t m : {1u, 2u, 3u, 4u, 5u}) {
      const auto pipes = pipelines_for(k, m);
      REQUIRE(pipes.size() == k);
      for (const auto& p : pipes) CHECK(p.steps.size() == m);
      CHECK_NOTHROW(check_pipelines_disjoint(pipes, builtin_holdout_pipelines()));
    }

  CHECK_THROWS_AS(pipelines_for(0, 3), contract_violation);
  CHECK_THROWS_AS(pipelines_for(3, 0), contract_violation);
}

TEST_CASE("evaluate: chance level at init and prompt-mode agreement") {
  DataConfig dc;
  dc.seed = 11;
  dc.train_samples = 8;  // unused here
  dc.eval_samples = 1000;
  dc.num_classes = 10;
  dc.resolution = 16;
  const auto data = make_benchmark_data(dc);
  REQUIRE(data.suite.domains.size() == 4);  // source + three held-out
  CHECK(data.suite.domains[0].name == "source");

  ModelSpec spec;  // defaults: 16x16, 10 classes
  const auto params = init_params<float>(spec, 1);

  EvalConfig ec;  // test-batch, 32
  const auto r = evaluate(spec, params, data.suite, ec);
  REQUIRE(r.domain_acc.size() == 4);
  // Untrained model on 10 balanced classes: chance level.
  CHECK(std::abs(r.domain_acc[0] - 0.1) <= 0.03);
  CHECK(r.avg_shifted ==
        doctest::Approx((r.domain_acc[1] + r.domain_acc[2] + r.domain_acc[3]) / 3));

  // At init the prompt heads have zero weights, so the prompt is the same
  // constant for every batch and both protocols must agree exactly.
  EvalConfig cal;
  cal.prompt_mode = "source-calibrated";
  const auto rc = evaluate(spec, params, data.suite, cal);
  for (std::size_t d = 0; d < 4; ++d) CHECK(rc.domain_acc[d] == r.domain_acc[d]);

  EvalConfig bad;
  bad.prompt_mode = "oracle";
  CHECK_THROWS_AS(evaluate(spec, params, data.suite, bad), config_error);
}

TEST_CASE("train_run: per-epoch records, decay, and exact reproducibility") {
  const auto dir = tmpdir() + "/run_repro";
  const auto cfg = micro_cfg(dir);
  const auto data = make_benchmark_data(cfg.data);

  const auto a = train_run(cfg, 3, data.train, data.suite);
  const auto b = train_run(cfg, 3, data.train, data.suite);

  REQUIRE(a.records.size() == 2);
  CHECK(a.records[0].epoch == 1);
  CHECK(a.records[1].epoch == 2);
  CHECK(a.records[0].step == 3);  // 48 samples / batch 16
  CHECK(a.records[1].step == 6);
  CHECK(a.records[0].seed == 3);
  // Default decay point: half the epochs, so epoch 2 runs at a tenth.
  CHECK(a.records[0].lr_theta == doctest::Approx(0.05));
  CHECK(a.records[1].lr_theta == doctest::Approx(0.005));
  CHECK(a.records[0].wall_clock_ms == 0.0);
  CHECK(a.domain_names.size() == 4);
  REQUIRE(a.records[0].domain_acc.size() == 4);

  // Bitwise-identical metrics and checkpoints across reruns.
  CHECK(serialize_metrics_csv(a.domain_names, a.records) ==
        serialize_metrics_csv(b.domain_names, b.records));
  Checkpoint ca{cfg.model, a.params, 3, a.records.back().step};
  Checkpoint cb{cfg.model, b.params, 3, b.records.back().step};
  CHECK(serialize_checkpoint(ca) == serialize_checkpoint(cb));

  // A different seed must actually change the trajectory.
  const auto c = train_run(cfg, 4, data.train, data.suite);
  CHECK(serialize_metrics_csv(a.domain_names, a.records) !=
        serialize_metrics_csv(c.domain_names, c.records));
}

TEST_CASE("train_run: zero epochs returns the initial parameters") {
  auto cfg = micro_cfg(tmpdir());
  cfg.train.epochs = 0;
  const auto data = make_benchmark_data(cfg.data);
  const auto r = train_run(cfg, 3, data.train, data.suite);
  CHECK(r.records.empty());
  const auto init = init_params<float>(cfg.model, 3);
  Checkpoint got{cfg.model, r.params, 3, 0};
  Checkpoint want{cfg.model, init, 3, 0};
  CHECK(serialize_checkpoint(got) == serialize_checkpoint(want));
  CHECK(r.final_eval.domain_acc.size() == 4);
}

TEST_CASE("train_run: plain-SGD fast path engages for the erm variant") {
  auto cfg = apply_variant(micro_cfg(tmpdir()), Variant::erm);
  CHECK(cfg.inner.lambda == 0.0f);
  CHECK(cfg.train.alpha_omega == 0.0);
  CHECK(!cfg.model.standardize);
  const auto data = make_benchmark_data(cfg.data);
  const auto r = train_run(cfg, 3, data.train, data.suite);
  REQUIRE(r.records.size() == 2);
  // No prompt training happens, so the outer objective is never evaluated.
  CHECK(r.records[0].outer_loss == 0.0);
  CHECK(r.records[0].grad_norm_omega == 0.0);
  CHECK(r.records[0].inner_adv == 0.0);
  CHECK(r.records[0].inner_cl > 0.0);
  // The prompt parameters stay at their initialization bit for bit.
  const auto init = init_params<float>(cfg.model, 3);
  for (const auto& [name, t] : init.omega.values) {
    const auto& u = r.params.omega.values.at(name);
    for (std::size_t i = 0; i < t.size(); ++i)
      CHECK(t.values()[i] == u.values()[i]);
  }
}

TEST_CASE("run_variant: files, summary statistics, multi-seed aggregation") {
  const auto dir = tmpdir() + "/variant_out";
  std::filesystem::remove_all(dir);
  auto cfg = micro_cfg(dir);
  cfg.train.epochs = 1;
  cfg.seeds = {3, 4, 5};
  const auto data = make_benchmark_data(cfg.data);

  const auto s = run_variant(cfg, Variant::full, data, dir);
  CHECK(s.variant == "full");
  REQUIRE(s.per_seed.size() == 3);
  REQUIRE(s.mean_acc.size() == 4);
  for (double sd : s.sd_acc) CHECK(sd >= 0.0);

  std::vector<double> shifted;
  for (const auto& p : s.per_seed) shifted.push_back(p.avg_shifted);
  const double lo = *std::min_element(shifted.begin(), shifted.end());
  const double hi = *std::max_element(shifted.begin(), shifted.end());
  CHECK(s.mean_avg_shifted >= lo);
  CHECK(s.mean_avg_shifted <= hi);
  CHECK(s.median_avg_shifted >= lo);
  CHECK(s.median_avg_shifted <= hi);

  for (const auto seed : {3, 4, 5}) {
    const auto base = dir + "/full/seed_" + std::to_string(seed);
    CHECK(std::filesystem::exists(base + "/metrics.csv"));
    CHECK(std::filesystem::exists(base + "/metrics.jsonl"));
    CHECK(std::filesystem::exists(base + "/checkpoint.bsck"));
    // The emitted files parse back.
    const auto pm = parse_metrics_csv(detail_ds::slurp(base + "/metrics.csv"));
    CHECK(pm.records.size() == 1);
    const auto ck = load_checkpoint(base + "/checkpoint.bsck");
    CHECK(ck.seed == static_cast<std::uint64_t>(seed));
  }
  const auto sj = nlohmann::json::parse(detail_ds::slurp(dir + "/full/summary.json"));
  CHECK(sj.at("variant") == "full");
  CHECK(sj.at("per_seed").size() == 3);
}

TEST_CASE("with_axis_value: every axis, rejects bad values") {
  const auto cfg = micro_cfg(tmpdir());
  CHECK(with_axis_value(cfg, "K", 7).surrogate.k == 7);
  CHECK(with_axis_value(cfg, "lambda", 0.25).inner.lambda == 0.25f);
  CHECK(with_axis_value(cfg, "eps_theta", 1e-3).hyper.epsilon_theta ==
        doctest::Approx(1e-3));
  CHECK(with_axis_value(cfg, "m", 4).surrogate.m == 4);
  CHECK_THROWS_AS(with_axis_value(cfg, "K", 2.5), config_error);
  CHECK_THROWS_AS(with_axis_value(cfg, "K", 0), config_error);
  CHECK_THROWS_AS(with_axis_value(cfg, "lambda", -1), config_error);
  CHECK_THROWS_AS(with_axis_value(cfg, "eps_theta", 0), config_error);
  CHECK_THROWS_AS(with_axis_value(cfg, "banana", 1), config_error);

  // Axis values that change the pipeline count re-derive the pipelines.
  auto explicit_cfg = cfg;
  explicit_cfg.surrogate.pipelines = pipelines_for(2, 2);
  const auto grown = with_axis_value(explicit_cfg, "K", 3);
  CHECK(grown.surrogate.pipelines.empty());
  CHECK_NOTHROW(grown.validate());
}

TEST_CASE("sweep: per-value runs, CSV and SVG artifacts, deterministic output") {
  const auto dir = tmpdir() + "/sweep_out";
  std::filesystem::remove_all(dir);
  auto cfg = micro_cfg(dir);
  cfg.train.epochs = 1;

  const auto res = sweep(cfg, "m", {1, 2}, dir);
  CHECK(res.axis == "m");
  REQUIRE(res.points.size() == 2);
  CHECK(res.points[0].value == 1);
  CHECK(res.points[1].value == 2);
  REQUIRE(res.points[0].domain_acc.size() == 4);

  const auto svg_path = dir + "/sweep_m/sweep_m.svg";
  const auto csv_path = dir + "/sweep_m/sweep_m.csv";
  REQUIRE(std::filesystem::exists(svg_path));
  REQUIRE(std::filesystem::exists(csv_path));
  CHECK(std::filesystem::exists(dir + "/sweep_m/m_1/metrics.csv"));
  CHECK(std::filesystem::exists(dir + "/sweep_m/m_2/metrics.csv"));

  const auto svg1 = detail_ds::slurp(svg_path);
  CHECK(svg1.find("<svg") == 0);
  CHECK(svg1.find("avg_shifted") != std::string::npos);

  // Rerunning the sweep reproduces every artifact byte for byte.
  const auto res2 = sweep(cfg, "m", {1, 2}, dir);
  CHECK(detail_ds::slurp(svg_path) == svg1);
  for (std::size_t i = 0; i < res.points.size(); ++i)
    CHECK(res.points[i].avg_shifted == res2.points[i].avg_shifted);

  CHECK_THROWS_AS(sweep(cfg, "m", {}, dir), contract_violation);
}

TEST_CASE("ablate: three tagged variants and a comparison report") {
  const auto dir = tmpdir() + "/ablate_out";
  std::filesystem::remove_all(dir);
  auto cfg = micro_cfg(dir);
  cfg.train.epochs = 1;
  cfg.seeds = {3};

  const auto rep = ablate(cfg, dir);
  CHECK(rep.full.variant == "full");
  CHECK(rep.no_adv.variant == "no_adv");
  CHECK(rep.no_std.variant == "no_std");
  for (const char* v : {"full", "no_adv", "no_std"})
    CHECK(std::filesystem::exists(dir + "/" + v + "/seed_3/metrics.csv"));
  const auto aj = nlohmann::json::parse(detail_ds::slurp(dir + "/ablation.json"));
  CHECK(aj.contains("full_beats_no_adv"));
  CHECK(aj.contains("full_beats_no_std"));
  CHECK(aj.at("full").at("median_avg_shifted").is_number());
}

TEST_CASE("hypergrad audit table: gap shrinks with the probe radius") {
  const auto rows =
      hypergrad_audit_table({100, 101, 102}, {1e-1, 1e-2, 1e-3}, 0.05);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].eps == 1e-1);
  CHECK(rows[1].median_rel_err <= rows[0].median_rel_err + 1e-12);
  CHECK(rows[2].median_rel_err <= rows[1].median_rel_err + 1e-12);
  CHECK(rows[2].median_rel_err <= 1e-2);
  for (const auto& r : rows) CHECK(r.max_rel_err >= r.median_rel_err);
}

TEST_CASE("svg: charts from parsed metrics") {
  const std::vector<std::string> domains = {"source", "warp"};
  auto recs = sample_records();
  for (auto& r : recs) r.domain_acc = {0.5, 0.25};
  const auto parsed = parse_metrics_csv(serialize_metrics_csv(domains, recs));

  const auto chart =
      chart_from_metrics(parsed, {"outer_loss", "acc_warp", "avg_shifted"}, "run");
  REQUIRE(chart.series.size() == 3);
  CHECK(chart.series[0].label == "outer_loss");
  CHECK(chart.series[0].x == std::vector<double>{1.0, 2.0});
  CHECK(chart.series[1].y == std::vector<double>{0.25, 0.25});

  CHECK_THROWS_AS(chart_from_metrics(parsed, {"acc_missing"}, "x"), config_error);
  CHECK_THROWS_AS(chart_from_metrics(parsed, {"bogus"}, "x"), config_error);
  const auto svg = render_line_chart(chart);
  CHECK(svg.find("acc_warp") != std::string::npos);
}
