#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "resist/partition.hpp"

namespace resist {

// --- codecs ------------------------------------------------------------

/// Uniform affine quantization of one tensor: step = (hi-lo)/(2^bits - 1),
/// code = round((v-lo)/step). A constant tensor has step 0 and codes 0.
struct QuantizedTensor {
  std::vector<std::uint32_t> codes;
  double lo = 0.0;
  double hi = 0.0;
  int bits = 8;
};

inline QuantizedTensor quantize(std::span<const double> values, int bits) {
  if (bits < 1 || bits > 16)
    throw std::invalid_argument("quantize: bits must lie in [1, 16]");
  if (values.empty()) throw std::invalid_argument("quantize: empty input");
  QuantizedTensor q;
  q.bits = bits;
  q.lo = values[0];
  q.hi = values[0];
  for (double v : values) {
    if (!std::isfinite(v))
      throw std::invalid_argument("quantize: non-finite input");
    q.lo = std::min(q.lo, v);
    q.hi = std::max(q.hi, v);
  }
  q.codes.resize(values.size());
  const double levels = static_cast<double>((1u << bits) - 1);
  const double step = (q.hi - q.lo) / levels;
  if (step == 0.0) {
    std::fill(q.codes.begin(), q.codes.end(), 0u);
    return q;
  }
  for (std::size_t i = 0; i < values.size(); ++i)
    q.codes[i] =
        static_cast<std::uint32_t>(std::llround((values[i] - q.lo) / step));
  return q;
}

inline std::vector<double> dequantize(const QuantizedTensor& q) {
  std::vector<double> out(q.codes.size());
  const double levels = static_cast<double>((1u << q.bits) - 1);
  const double step = (q.hi - q.lo) / levels;
  for (std::size_t i = 0; i < q.codes.size(); ++i)
    out[i] = q.lo + static_cast<double>(q.codes[i]) * step;
  return out;
}

/// Top-k magnitude sparsification; keeps k = ceil(frac * len) entries, ties
/// broken toward the lower index. Dropped entries densify to zero.
struct SparseTensor {
  std::vector<std::int64_t> indices;  // ascending
  std::vector<double> values;
  std::int64_t size = 0;
};

inline SparseTensor sparsify_topk(std::span<const double> values, double frac) {
  if (values.empty()) throw std::invalid_argument("sparsify_topk: empty input");
  if (!(frac > 0.0 && frac <= 1.0))
    throw std::invalid_argument("sparsify_topk: frac must lie in (0, 1]");
  const std::int64_t len = static_cast<std::int64_t>(values.size());
  const std::int64_t k = static_cast<std::int64_t>(
      std::ceil(frac * static_cast<double>(len)));
  std::vector<std::int64_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::int64_t a, std::int64_t b) {
                     return std::abs(values[static_cast<std::size_t>(a)]) >
                            std::abs(values[static_cast<std::size_t>(b)]);
                   });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  SparseTensor s;
  s.size = len;
  s.indices = std::move(order);
  s.values.reserve(static_cast<std::size_t>(k));
  for (auto i : s.indices) s.values.push_back(values[static_cast<std::size_t>(i)]);
  return s;
}

inline std::vector<double> densify(const SparseTensor& s) {
  std::vector<double> out(static_cast<std::size_t>(s.size), 0.0);
  for (std::size_t i = 0; i < s.indices.size(); ++i)
    out[static_cast<std::size_t>(s.indices[i])] = s.values[i];
  return out;
}

enum class CodecKind { none, quantize, topk };

/// Compression applied to transmitted parameters. Quantization replaces the
/// 64-bit payload with `bits` per value; top-k transmits (index, value)
/// pairs, indices costed at 32 bits each.
struct Codec {
  CodecKind kind = CodecKind::none;
  int bits = 8;
  double keep_frac = 0.25;

  int accounting_bits() const { return kind == CodecKind::quantize ? bits : 64; }

  double payload_bytes(std::int64_t count) const {
    switch (kind) {
      case CodecKind::none:
        return 8.0 * static_cast<double>(count);
      case CodecKind::quantize:
        return static_cast<double>(count) * bits / 8.0;
      case CodecKind::topk: {
        const double kept = std::ceil(keep_frac * static_cast<double>(count));
        return kept * (8.0 + 4.0);
      }
    }
    return 0.0;
  }
};

/// Round-trip a tensor through the codec; identity for CodecKind::none.
inline Matrix apply_codec(const Codec& codec, const Matrix& t) {
  if (codec.kind == CodecKind::none || t.size() == 0) return t;
  std::span<const double> flat(t.data(), static_cast<std::size_t>(t.size()));
  std::vector<double> back;
  if (codec.kind == CodecKind::quantize) {
    back = dequantize(quantize(flat, codec.bits));
  } else {
    back = densify(sparsify_topk(flat, codec.keep_frac));
  }
  return Eigen::Map<const Matrix>(back.data(), t.rows(), t.cols());
}

inline Vector apply_codec(const Codec& codec, const Vector& t) {
  Matrix m = apply_codec(codec, Matrix(t));
  return Vector(m.col(0));
}

// --- accounting ----------------------------------------------------------

/// Per-round traffic split by block class: partitioned = blocks inside the
/// partitionable range, shared = everything else (input block, shared
/// residual blocks, readout).
struct RoundVolume {
  double shared_bytes = 0.0;
  double partitioned_bytes = 0.0;
  double total() const { return shared_bytes + partitioned_bytes; }
};

/// Accounting model: each worker uploads and downloads every parameter it
/// holds once per synchronization round. local_sgd / data_parallel workers
/// hold the full model; resist workers hold their views. Ensemble rounds
/// synchronize nothing.
inline RoundVolume round_volume_split(const PartitionPlan& plan,
                                      const ModelConfig& cfg, Method method,
                                      const Codec& codec = Codec{}) {
  RoundVolume vol;
  if (method == Method::ensemble) return vol;

  const std::int64_t m = cfg.width;
  // Payloads are costed per tensor, matching how the codec is applied.
  for (int v = 0; v < plan.workers; ++v) {
    vol.shared_bytes +=
        2.0 * codec.payload_bytes(static_cast<std::int64_t>(m) * cfg.input_dim);
    vol.shared_bytes += 2.0 * codec.payload_bytes(m);  // readout
    for (int h = 2; h <= cfg.depth; ++h) {
      if (!cfg.partitionable(h)) {
        vol.shared_bytes += 2.0 * codec.payload_bytes(m * m);
        continue;
      }
      const bool held = method == Method::resist
                            ? plan.masks[static_cast<std::size_t>(v)].holds(h)
                            : true;
      if (held) vol.partitioned_bytes += 2.0 * codec.payload_bytes(m * m);
    }
  }
  return vol;
}

/// Whole-round volume at a uniform precision.
/// payload_bytes for the quantize kind is linear in bits, valid up to 64.
inline double round_volume(const PartitionPlan& plan, const ModelConfig& cfg,
                           Method method, int bits) {
  if (bits < 4 || bits > 64)
    throw std::invalid_argument("round_volume: bits must lie in [4, 64]");
  Codec c;
  c.kind = CodecKind::quantize;
  c.bits = bits;
  return round_volume_split(plan, cfg, method, c).total();
}

/// Per-round communication log with a running cumulative total.
class CommLedger {
 public:
  struct Entry {
    int round = 0;
    double shared_bytes = 0.0;
    double partitioned_bytes = 0.0;
    double total_bytes = 0.0;
  };

  explicit CommLedger(int precision_bits = 64)
      : precision_bits_(precision_bits) {}

  void record(int round, double shared_bytes, double partitioned_bytes) {
    Entry e;
    e.round = round;
    e.shared_bytes = shared_bytes;
    e.partitioned_bytes = partitioned_bytes;
    e.total_bytes = shared_bytes + partitioned_bytes;
    cumulative_ += e.total_bytes;
    entries_.push_back(e);
  }

  const std::vector<Entry>& entries() const { return entries_; }
  double cumulative() const { return cumulative_; }
  int precision_bits() const { return precision_bits_; }

 private:
  std::vector<Entry> entries_;
  double cumulative_ = 0.0;
  int precision_bits_ = 64;
};

}  // namespace resist
