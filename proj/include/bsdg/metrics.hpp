// Training metrics: an append-only record per logging interval, persisted as
// a CSV with a fixed column order plus a JSONL mirror. Serialization uses
// %.9g so that a written file parses back to the same records and re-writes
// to the same bytes.
#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bsdg/dataset.hpp"

namespace bsdg {

struct MetricsRecord {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t seed = 0;
  double inner_cl = 0.0;
  double inner_adv = 0.0;
  double outer_loss = 0.0;
  double grad_norm_theta = 0.0;
  double grad_norm_omega = 0.0;
  double lr_theta = 0.0;
  double lr_omega = 0.0;
  std::vector<double> domain_acc;  // aligned with the suite's domain names
  double avg_shifted = 0.0;        // mean accuracy over the shifted domains
  double wall_clock_ms = 0.0;      // 0 unless wall-clock recording is enabled
};

namespace detail_metrics {

inline std::string g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace detail_metrics

// Column order: step, epoch, seed, losses, gradient norms, learning rates,
// one acc_<domain> column per suite entry, avg_shifted, wall_clock_ms.
inline std::string metrics_csv_header(const std::vector<std::string>& domains) {
  std::string h =
      "step,epoch,seed,inner_cl,inner_adv,outer_loss,grad_norm_theta,"
      "grad_norm_omega,lr_theta,lr_omega";
  for (const auto& d : domains) h += ",acc_" + d;
  h += ",avg_shifted,wall_clock_ms";
  return h;
}

inline std::string serialize_metrics_csv(const std::vector<std::string>& domains,
                                         const std::vector<MetricsRecord>& records) {
  using detail_metrics::g9;
  std::string out = metrics_csv_header(domains) + "\n";
  for (const auto& r : records) {
    detail::require(r.domain_acc.size() == domains.size(),
                    "metrics: record has " + std::to_string(r.domain_acc.size()) +
                        " domain accuracies, header has " +
                        std::to_string(domains.size()));
    out += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," +
           std::to_string(r.seed);
    for (double v : {r.inner_cl, r.inner_adv, r.outer_loss, r.grad_norm_theta,
                     r.grad_norm_omega, r.lr_theta, r.lr_omega})
      out += "," + g9(v);
    for (double v : r.domain_acc) out += "," + g9(v);
    out += "," + g9(r.avg_shifted) + "," + g9(r.wall_clock_ms) + "\n";
  }
  return out;
}

inline void write_metrics_csv(const std::string& path,
                              const std::vector<std::string>& domains,
                              const std::vector<MetricsRecord>& records) {
  detail_ds::spew(path, serialize_metrics_csv(domains, records));
}

struct ParsedMetrics {
  std::vector<std::string> domains;
  std::vector<MetricsRecord> records;
};

namespace detail_metrics {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

inline double parse_num(const std::string& s, std::size_t offset, const char* what) {
  if (s.empty()) throw parse_error(std::string("metrics csv: empty ") + what, offset);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size())
    throw parse_error("metrics csv: bad " + std::string(what) + " value '" + s + "'",
                      offset);
  return v;
}

}  // namespace detail_metrics

inline ParsedMetrics parse_metrics_csv(const std::string& content) {
  using namespace detail_metrics;
  ParsedMetrics out;
  std::size_t pos = 0;
  auto next_line = [&](std::string& line) {
    if (pos >= content.size()) return false;
    auto nl = content.find('\n', pos);
    if (nl == std::string::npos) nl = content.size();
    line = content.substr(pos, nl - pos);
    pos = nl + 1;
    return true;
  };
  std::string header;
  if (!next_line(header)) throw parse_error("metrics csv: empty document", 0);
  auto cols = split_csv_line(header);
  constexpr std::size_t kFixed = 10;  // through lr_omega
  if (cols.size() < kFixed + 2)
    throw parse_error("metrics csv: header has too few columns", 0);
  const char* expect[kFixed] = {"step",       "epoch",          "seed",
                                "inner_cl",   "inner_adv",      "outer_loss",
                                "grad_norm_theta", "grad_norm_omega", "lr_theta",
                                "lr_omega"};
  for (std::size_t i = 0; i < kFixed; ++i)
    if (cols[i] != expect[i])
      throw parse_error("metrics csv: expected column '" + std::string(expect[i]) +
                            "', found '" + cols[i] + "'",
                        0);
  if (cols[cols.size() - 2] != "avg_shifted" || cols.back() != "wall_clock_ms")
    throw parse_error("metrics csv: trailing columns must be avg_shifted,wall_clock_ms",
                      0);
  for (std::size_t i = kFixed; i + 2 < cols.size(); ++i) {
    if (cols[i].rfind("acc_", 0) != 0)
      throw parse_error("metrics csv: domain column '" + cols[i] +
                            "' must start with acc_",
                        0);
    out.domains.push_back(cols[i].substr(4));
  }
  std::string line;
  while (next_line(line)) {
    const std::size_t line_off = pos - line.size() - 1;
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != cols.size())
      throw parse_error("metrics csv: row has " + std::to_string(f.size()) +
                            " fields, header has " + std::to_string(cols.size()),
                        line_off);
    MetricsRecord r;
    r.step = static_cast<std::uint64_t>(parse_num(f[0], line_off, "step"));
    r.epoch = static_cast<std::uint64_t>(parse_num(f[1], line_off, "epoch"));
    r.seed = static_cast<std::uint64_t>(parse_num(f[2], line_off, "seed"));
    r.inner_cl = parse_num(f[3], line_off, "inner_cl");
    r.inner_adv = parse_num(f[4], line_off, "inner_adv");
    r.outer_loss = parse_num(f[5], line_off, "outer_loss");
    r.grad_norm_theta = parse_num(f[6], line_off, "grad_norm_theta");
    r.grad_norm_omega = parse_num(f[7], line_off, "grad_norm_omega");
    r.lr_theta = parse_num(f[8], line_off, "lr_theta");
    r.lr_omega = parse_num(f[9], line_off, "lr_omega");
    for (std::size_t i = 0; i < out.domains.size(); ++i)
      r.domain_acc.push_back(parse_num(f[kFixed + i], line_off, "accuracy"));
    r.avg_shifted = parse_num(f[f.size() - 2], line_off, "avg_shifted");
    r.wall_clock_ms = parse_num(f.back(), line_off, "wall_clock_ms");
    out.records.push_back(std::move(r));
  }
  return out;
}

inline std::string serialize_metrics_jsonl(const std::vector<std::string>& domains,
                                           const std::vector<MetricsRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::json j;
    j["step"] = r.step;
    j["epoch"] = r.epoch;
    j["seed"] = r.seed;
    j["inner_cl"] = r.inner_cl;
    j["inner_adv"] = r.inner_adv;
    j["outer_loss"] = r.outer_loss;
    j["grad_norm_theta"] = r.grad_norm_theta;
    j["grad_norm_omega"] = r.grad_norm_omega;
    j["lr_theta"] = r.lr_theta;
    j["lr_omega"] = r.lr_omega;
    nlohmann::json acc;
    for (std::size_t i = 0; i < domains.size(); ++i) acc[domains[i]] = r.domain_acc[i];
    j["acc"] = acc;
    j["avg_shifted"] = r.avg_shifted;
    j["wall_clock_ms"] = r.wall_clock_ms;
    out += j.dump() + "\n";
  }
  return out;
}

inline void write_metrics_jsonl(const std::string& path,
                                const std::vector<std::string>& domains,
                                const std::vector<MetricsRecord>& records) {
  detail_ds::spew(path, serialize_metrics_jsonl(domains, records));
}

}  // namespace bsdg
