#pragma once

#include <charconv>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "resist/model.hpp"

namespace resist {

enum class LabelMode { teacher_net, random_bounded };
enum class ShardMode { full_data, disjoint_shards };
enum class NormalizePolicy { normalize, reject_if_not_unit };

/// Unit-norm Gaussian rows with pairwise-distinct entries; labels come from
/// a fixed random teacher network rescaled to [-1, 1], or uniform on [-1, 1].
inline Dataset gen_synthetic(int n, int d, std::uint64_t seed, LabelMode mode) {
  if (n < 1 || d < 1) throw std::invalid_argument("gen_synthetic: n, d >= 1");
  DetRng rng(stream_seed(seed, 0, 0, stream_tag::data));
  Dataset ds;
  ds.features.resize(n, d);
  for (int i = 0; i < n; ++i) {
    for (;;) {
      Vector row(d);
      for (int j = 0; j < d; ++j) row(j) = rng.normal();
      const double norm = row.norm();
      if (norm == 0.0) continue;  // astronomically unlikely, resample
      row /= norm;
      bool distinct = true;
      for (int k = 0; k < i; ++k) {
        if ((ds.features.row(k).transpose() - row).norm() <= 1e-9) {
          distinct = false;
          break;
        }
      }
      if (!distinct) continue;
      ds.features.row(i) = row.transpose();
      break;
    }
  }

  ds.labels.resize(n);
  if (mode == LabelMode::random_bounded) {
    for (int i = 0; i < n; ++i) ds.labels(i) = 2.0 * rng.uniform01() - 1.0;
  } else {
    ModelConfig teacher_cfg;
    teacher_cfg.depth = 3;
    teacher_cfg.width = 64;
    teacher_cfg.input_dim = d;
    teacher_cfg.partition_lo = 2;
    teacher_cfg.partition_hi = 3;
    const GlobalParams teacher =
        init_params(teacher_cfg, stream_seed(seed, 0, 0, stream_tag::teacher));
    BatchCache out = forward_batch(teacher_cfg, teacher,
                                   ds.features.transpose(),
                                   BlockMask::all_ones(teacher_cfg));
    const double peak = out.predictions.cwiseAbs().maxCoeff();
    ds.labels = peak > 0.0 ? Vector(out.predictions / peak)
                           : Vector(Vector::Zero(n));
  }
  ds.validate();
  return ds;
}

/// CSV rows are d feature columns then one label column; an optional header
/// is detected by a non-numeric first row. Feature rows are normalized (or
/// rejected, per policy); labels beyond the bound are clamped with a warning.
inline Dataset load_csv(const std::string& path,
                        NormalizePolicy policy = NormalizePolicy::normalize,
                        std::ostream* warn = &std::cerr,
                        double label_bound = 1.0) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset: " + path);

  auto parse_cell = [](const std::string& cell, double& value) {
    const char* b = cell.data();
    const char* e = b + cell.size();
    while (b < e && (*b == ' ' || *b == '\t')) ++b;
    while (e > b && (*(e - 1) == ' ' || *(e - 1) == '\t' || *(e - 1) == '\r')) --e;
    auto [p, ec] = std::from_chars(b, e, value);
    return ec == std::errc() && p == e && b != e;
  };

  std::vector<std::vector<double>> rows;
  std::string line;
  int line_no = 0;
  int width = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::vector<double> row;
    std::stringstream cells(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(cells, cell, ',')) {
      double v = 0.0;
      if (!parse_cell(cell, v)) {
        numeric = false;
        break;
      }
      row.push_back(v);
    }
    if (!numeric) {
      if (line_no == 1) continue;  // header row
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": non-numeric cell '" + cell + "'");
    }
    if (row.size() < 2)
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": need at least one feature and a label");
    if (width < 0) width = static_cast<int>(row.size());
    if (static_cast<int>(row.size()) != width)
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": expected " + std::to_string(width) +
                               " columns, got " + std::to_string(row.size()));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error(path + ": no data rows");

  const int n = static_cast<int>(rows.size());
  const int d = width - 1;
  Dataset ds;
  ds.label_bound = label_bound;
  ds.features.resize(n, d);
  ds.labels.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) ds.features(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    const double norm = ds.features.row(i).norm();
    if (std::abs(norm - 1.0) > 1e-12) {
      if (policy == NormalizePolicy::reject_if_not_unit)
        throw std::runtime_error(path + ": row " + std::to_string(i + 1) +
                                 " is not unit-norm (" + std::to_string(norm) + ")");
      if (norm == 0.0)
        throw std::runtime_error(path + ": row " + std::to_string(i + 1) +
                                 " is all-zero and cannot be normalized");
      ds.features.row(i) /= norm;
    }
    double y = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)];
    if (std::abs(y) > label_bound) {
      if (warn)
        (*warn) << "warning: " << path << " row " << (i + 1) << " label " << y
                << " clamped to +/-" << label_bound << "\n";
      y = y > 0.0 ? label_bound : -label_bound;
    }
    ds.labels(i) = y;
  }
  ds.validate();
  return ds;
}

/// full_data: every worker sees the whole dataset. disjoint_shards:
/// contiguous near-equal splits (sizes differ by at most 1) of a seeded
/// shuffle of the index set.
inline std::vector<Dataset> shard(const Dataset& data, int workers,
                                  ShardMode mode, std::uint64_t seed) {
  if (workers < 1) throw std::invalid_argument("shard: workers >= 1");
  if (mode == ShardMode::full_data)
    return std::vector<Dataset>(static_cast<std::size_t>(workers), data);

  const int n = data.n();
  if (n < workers)
    throw std::invalid_argument("disjoint sharding needs n >= workers");
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  DetRng rng(stream_seed(seed, 0, 0, stream_tag::shard));
  rng.shuffle(perm);

  std::vector<Dataset> out;
  out.reserve(static_cast<std::size_t>(workers));
  const int base = n / workers;
  const int extra = n % workers;
  int pos = 0;
  for (int v = 0; v < workers; ++v) {
    const int take = base + (v < extra ? 1 : 0);
    Dataset piece;
    piece.label_bound = data.label_bound;
    piece.features.resize(take, data.dim());
    piece.labels.resize(take);
    for (int i = 0; i < take; ++i) {
      piece.features.row(i) = data.features.row(perm[static_cast<std::size_t>(pos)]);
      piece.labels(i) = data.labels(perm[static_cast<std::size_t>(pos)]);
      ++pos;
    }
    out.push_back(std::move(piece));
  }
  return out;
}

}  // namespace resist
