#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "s2moe/config.hpp"
#include "s2moe/report.hpp"

namespace s2moe {

inline constexpr std::string_view kMetricsHeader =
    "step,task_nats,bpc,balance,uncertainty,total,router_entropy,expert_load_gini,k,wall_ms";

struct MetricsRow {
  std::uint64_t step = 0;
  double task_nats = 0.0;
  double bpc = 0.0;
  double balance = 0.0;
  double uncertainty = 0.0;
  double total = 0.0;
  double router_entropy = 0.0;
  double expert_load_gini = 0.0;
  std::uint64_t k = 0;
  std::uint64_t wall_ms = 0;

  bool operator==(const MetricsRow&) const = default;
};

inline std::string format_metrics_row(const MetricsRow& r) {
  std::string s = std::to_string(r.step);
  for (double v : {r.task_nats, r.bpc, r.balance, r.uncertainty, r.total, r.router_entropy, r.expert_load_gini}) {
    s += ',';
    s += format_double(v);
  }
  s += ',' + std::to_string(r.k) + ',' + std::to_string(r.wall_ms);
  return s;
}

inline MetricsRow parse_metrics_row(std::string_view line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in{std::string(line)};
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (cells.size() != 10) {
    throw std::invalid_argument("metrics row has " + std::to_string(cells.size()) + " fields, expected 10");
  }
  MetricsRow r;
  r.step = detail::parse_unsigned<std::uint64_t>("step", cells[0]);
  double* reals[] = {&r.task_nats, &r.bpc, &r.balance, &r.uncertainty, &r.total, &r.router_entropy,
                     &r.expert_load_gini};
  for (std::size_t i = 0; i < 7; ++i) *reals[i] = detail::parse_real("metrics", cells[i + 1]);
  r.k = detail::parse_unsigned<std::uint64_t>("k", cells[8]);
  r.wall_ms = detail::parse_unsigned<std::uint64_t>("wall_ms", cells[9]);
  return r;
}

/// Append-only metrics file; writes the header when the file is new.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path, bool truncate = true) : path_(path) {
    const bool fresh = truncate || !std::ifstream(path).good();
    out_.open(path, truncate ? std::ios::trunc : std::ios::app);
    if (!out_) throw std::runtime_error("cannot open metrics file '" + path + "'");
    if (fresh) {
      out_ << kMetricsHeader << '\n';
      out_.flush();
    }
  }

  void append(const MetricsRow& row) {
    out_ << format_metrics_row(row) << '\n';
    out_.flush();
    if (!out_) throw std::runtime_error("write to metrics file '" + path_ + "' failed");
  }

 private:
  std::string path_;
  std::ofstream out_;
};

inline std::vector<MetricsRow> parse_metrics(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw std::invalid_argument("metrics: missing header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(parse_metrics_row(line));
  }
  return rows;
}

inline std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read metrics file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_metrics(ss.str());
}

}  // namespace s2moe
