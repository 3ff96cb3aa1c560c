#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "resist/protocol.hpp"

namespace resist {

// Locale-free numeric formatting; %.17g round-trips doubles exactly.
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct RateFit {
  double rho = 0.0;
  double r2 = 0.0;
  int window_start = 0;
  int window_len = 0;
};

/// Least-squares fit of log L(t) = c + t log(rho) over the maximal strictly
/// decreasing suffix of the loss sequence. Needs at least 5 positive,
/// decreasing points.
inline RateFit fit_rate(const std::vector<double>& losses) {
  const int n = static_cast<int>(losses.size());
  if (n == 0) throw std::invalid_argument("fit_rate: empty loss sequence");
  int start = n - 1;
  while (start > 0 && losses[static_cast<std::size_t>(start - 1)] >
                          losses[static_cast<std::size_t>(start)])
    --start;
  const int len = n - start;
  if (len < 5)
    throw std::invalid_argument(
        "fit_rate: needs >= 5 rounds of decreasing losses (got " +
        std::to_string(len) + ")");
  for (int i = start; i < n; ++i)
    if (!(losses[static_cast<std::size_t>(i)] > 0.0))
      throw std::invalid_argument("fit_rate: non-positive loss in window");

  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (int i = start; i < n; ++i) {
    const double x = static_cast<double>(i - start);
    const double y = std::log(losses[static_cast<std::size_t>(i)]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double k = static_cast<double>(len);
  const double slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
  const double intercept = (sy - slope * sx) / k;

  double ss_res = 0.0, ss_tot = 0.0;
  const double mean_y = sy / k;
  for (int i = start; i < n; ++i) {
    const double x = static_cast<double>(i - start);
    const double y = std::log(losses[static_cast<std::size_t>(i)]);
    const double fit = intercept + slope * x;
    ss_res += (y - fit) * (y - fit);
    ss_tot += (y - mean_y) * (y - mean_y);
  }
  RateFit out;
  out.rho = std::exp(slope);
  out.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
  out.window_start = start;
  out.window_len = len;
  return out;
}

/// Metrics CSV, columns exactly:
/// round,train_loss,eval_loss,shared_bytes,partitioned_bytes,cumulative_bytes,seconds
inline void write_metrics_csv(std::ostream& out, const RunResult& run) {
  out << "round,train_loss,eval_loss,shared_bytes,partitioned_bytes,"
         "cumulative_bytes,seconds\n";
  for (const auto& row : run.metrics) {
    out << row.round << ',' << fmt_double(row.train_loss) << ','
        << fmt_double(row.eval_loss) << ',' << fmt_double(row.shared_bytes)
        << ',' << fmt_double(row.partitioned_bytes) << ','
        << fmt_double(row.cumulative_bytes) << ',' << fmt_double(row.seconds)
        << '\n';
  }
}

/// Reads one named column back out of a metrics CSV.
inline std::vector<double> read_csv_column(std::istream& in,
                                           const std::string& column) {
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("metrics CSV is empty");
  std::vector<std::string> names;
  {
    std::stringstream header(line);
    std::string cell;
    while (std::getline(header, cell, ',')) {
      if (!cell.empty() && cell.back() == '\r') cell.pop_back();
      names.push_back(cell);
    }
  }
  int target = -1;
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == column) target = static_cast<int>(i);
  if (target < 0)
    throw std::runtime_error("metrics CSV has no column '" + column + "'");

  std::vector<double> values;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::stringstream cells(line);
    std::string cell;
    int col = 0;
    bool found = false;
    while (std::getline(cells, cell, ',')) {
      if (col++ != target) continue;
      if (!cell.empty() && cell.back() == '\r') cell.pop_back();
      double v = 0.0;
      auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || p != cell.data() + cell.size())
        throw std::runtime_error("metrics CSV line " + std::to_string(line_no) +
                                 ": bad number '" + cell + "'");
      values.push_back(v);
      found = true;
    }
    if (!found)
      throw std::runtime_error("metrics CSV line " + std::to_string(line_no) +
                               ": too few columns");
  }
  return values;
}

}  // namespace resist
