#pragma once

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "resist/common.hpp"

namespace resist {

enum class Activation { relu, identity };

inline const char* activation_name(Activation a) {
  return a == Activation::relu ? "relu" : "identity";
}

/// Architecture and theory constants of the residual network.
///
/// Depth counts the input block as block 1, so residual blocks live at
/// h = 2..depth. Blocks inside [partition_lo, partition_hi] are the
/// partitionable section dealt to workers; everything else (always
/// including block 1 and the readout) is shared.
struct ModelConfig {
  int depth = 1;       // H
  int width = 1;       // m, hidden units per layer
  int input_dim = 1;   // d
  double c_res = 0.5;  // residual branch constant, in (0, 1)
  double c_sigma = 2.0;
  Activation activation = Activation::relu;
  int partition_lo = 2;
  int partition_hi = 1;  // empty range when hi < lo (depth-1 nets)
  int min_depth = 1;

  bool partitionable(int h) const {
    return h >= partition_lo && h <= partition_hi;
  }
  int partitionable_count() const {
    return partition_hi >= partition_lo ? partition_hi - partition_lo + 1 : 0;
  }
  double input_scale() const { return std::sqrt(c_sigma / width); }
  double branch_scale() const {
    return c_res / (depth * std::sqrt(static_cast<double>(width)));
  }
  std::int64_t param_count() const {
    return static_cast<std::int64_t>(width) * input_dim +
           static_cast<std::int64_t>(depth - 1) * width * width + width;
  }

  void validate() const {
    if (depth < 1) throw std::invalid_argument("depth must be >= 1");
    if (width < 1) throw std::invalid_argument("width must be >= 1");
    if (input_dim < 1) throw std::invalid_argument("input_dim must be >= 1");
    if (!(c_res > 0.0 && c_res < 1.0))
      throw std::invalid_argument("c_res must lie in (0, 1)");
    if (!(c_sigma > 0.0)) throw std::invalid_argument("c_sigma must be > 0");
    if (depth >= 2) {
      if (partition_lo < 2 || partition_hi > depth || partition_lo > partition_hi)
        throw std::invalid_argument(
            "partition range must satisfy 2 <= lo <= hi <= depth");
    }
    if (min_depth < 1) throw std::invalid_argument("min_depth must be >= 1");
    if (min_depth > partitionable_count() && depth >= 2)
      throw std::invalid_argument(
          "min_depth exceeds the number of partitionable blocks");
  }
};

/// Per-block presence bits for one worker. Bits outside the partitionable
/// range are always 1; the readout vector is never masked.
struct BlockMask {
  int depth = 0;
  std::vector<std::uint8_t> bits;  // bits[h-1] for h = 1..depth

  static BlockMask all_ones(const ModelConfig& cfg) {
    BlockMask m;
    m.depth = cfg.depth;
    m.bits.assign(static_cast<std::size_t>(cfg.depth), 1);
    return m;
  }

  /// Partitionable bits cleared; shared bits stay 1.
  static BlockMask shared_only(const ModelConfig& cfg) {
    BlockMask m = all_ones(cfg);
    for (int h = cfg.partition_lo; h <= cfg.partition_hi && h >= 2; ++h)
      m.bits[static_cast<std::size_t>(h - 1)] = 0;
    return m;
  }

  bool holds(int h) const { return bits[static_cast<std::size_t>(h - 1)] != 0; }
  void set(int h, bool v) { bits[static_cast<std::size_t>(h - 1)] = v ? 1 : 0; }

  int held_partitionable(const ModelConfig& cfg) const {
    int c = 0;
    for (int h = cfg.partition_lo; h <= cfg.partition_hi; ++h)
      if (holds(h)) ++c;
    return c;
  }
};

/// The full network's weights: input block (m x d), residual blocks
/// (m x m for h = 2..H) and the readout vector (length m).
struct GlobalParams {
  Matrix input_weights;
  std::vector<Matrix> block_weights;
  Vector output_weights;

  Matrix& block(int h) { return block_weights[static_cast<std::size_t>(h - 2)]; }
  const Matrix& block(int h) const {
    return block_weights[static_cast<std::size_t>(h - 2)];
  }
  int depth() const { return static_cast<int>(block_weights.size()) + 1; }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a(input_weights);
    for (const auto& b : block_weights) h = fnv1a(b, h);
    return fnv1a(output_weights, h);
  }
};

using Gradients = GlobalParams;

inline GlobalParams zeros_like(const ModelConfig& cfg) {
  GlobalParams p;
  p.input_weights = Matrix::Zero(cfg.width, cfg.input_dim);
  p.block_weights.assign(static_cast<std::size_t>(cfg.depth - 1),
                         Matrix::Zero(cfg.width, cfg.width));
  p.output_weights = Vector::Zero(cfg.width);
  return p;
}

inline bool bitwise_equal(const GlobalParams& x, const GlobalParams& y) {
  if (!bitwise_equal(x.input_weights, y.input_weights)) return false;
  if (x.block_weights.size() != y.block_weights.size()) return false;
  for (std::size_t i = 0; i < x.block_weights.size(); ++i)
    if (!bitwise_equal(x.block_weights[i], y.block_weights[i])) return false;
  return bitwise_equal(x.output_weights, y.output_weights);
}

/// All entries i.i.d. standard normal, bitwise-reproducible per seed.
inline GlobalParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DetRng rng(stream_seed(seed, 0, 0, stream_tag::init));
  GlobalParams p = zeros_like(cfg);
  for (Eigen::Index r = 0; r < p.input_weights.rows(); ++r)
    for (Eigen::Index c = 0; c < p.input_weights.cols(); ++c)
      p.input_weights(r, c) = rng.normal();
  for (auto& w : p.block_weights)
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.normal();
  for (Eigen::Index i = 0; i < p.output_weights.size(); ++i)
    p.output_weights(i) = rng.normal();
  return p;
}

/// Inputs are unit-norm rows; labels are bounded by label_bound.
struct Dataset {
  Matrix features;  // n x d
  Vector labels;    // n
  double label_bound = 1.0;

  int n() const { return static_cast<int>(features.rows()); }
  int dim() const { return static_cast<int>(features.cols()); }

  void validate() const {
    if (features.rows() != labels.size())
      throw std::invalid_argument("feature/label row count mismatch");
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
      if (std::abs(features.row(i).norm() - 1.0) > 1e-12)
        throw std::invalid_argument("dataset row " + std::to_string(i) +
                                    " is not unit-norm");
      if (std::abs(labels(i)) > label_bound + 1e-12)
        throw std::invalid_argument("label " + std::to_string(i) +
                                    " exceeds the label bound");
    }
  }
};

/// Forward-pass switches. Train mode applies the mask at unit branch scale;
/// inference ignores the mask and multiplies every partitionable residual
/// branch by 1/S. Warm-up local training uses {1/S, true} with an all-ones
/// mask ("still scaled during local SGD pre-training").
struct ForwardOpts {
  double partition_scale = 1.0;
  bool use_mask = true;

  static ForwardOpts train() { return {1.0, true}; }
  static ForwardOpts inference(int s) {
    if (s < 1) throw std::invalid_argument("inference scaling requires S >= 1");
    return {1.0 / static_cast<double>(s), false};
  }
};

/// Per-sample hidden states, pre-activations and the prediction.
struct ActivationCache {
  std::vector<Vector> hidden;  // hidden[h-1] = x^(h)
  std::vector<Vector> preact;  // preact[h-1] = z^(h); empty when block skipped
  double prediction = 0.0;
};

/// Batched activations; columns are samples.
struct BatchCache {
  Matrix input;                // d x B
  std::vector<Matrix> hidden;  // m x B per block
  std::vector<Matrix> preact;
  Vector predictions;  // B
};

namespace detail {

inline Matrix act(Activation a, const Matrix& z) {
  return a == Activation::relu ? z.cwiseMax(0.0).eval() : z;
}

inline Matrix act_deriv(Activation a, const Matrix& z) {
  if (a == Activation::identity) return Matrix::Ones(z.rows(), z.cols());
  return (z.array() > 0.0).cast<double>();  // derivative at 0 taken as 0
}

}  // namespace detail

/// Masked residual forward pass over a batch (columns are samples):
///   x^(1) = sqrt(c_sigma/m) * act(W^(1) x)
///   x^(h) = x^(h-1) + coef_h * act(W^(h) x^(h-1)),  h = 2..H
///   u     = a^T x^(H)
/// where coef_h is c_res/(H sqrt(m)) times the partition scale for
/// partitionable blocks; masked-out blocks contribute nothing.
template <class Params>
BatchCache forward_batch(const ModelConfig& cfg, const Params& p,
                         const Matrix& inputs, const BlockMask& mask,
                         const ForwardOpts& opts = ForwardOpts::train()) {
  if (inputs.rows() != cfg.input_dim)
    throw std::invalid_argument("input dimension mismatch: expected " +
                                std::to_string(cfg.input_dim) + ", got " +
                                std::to_string(inputs.rows()));
  BatchCache c;
  c.input = inputs;
  c.hidden.resize(static_cast<std::size_t>(cfg.depth));
  c.preact.resize(static_cast<std::size_t>(cfg.depth));

  c.preact[0] = p.input_weights * inputs;
  c.hidden[0] = cfg.input_scale() * detail::act(cfg.activation, c.preact[0]);

  const double s_res = cfg.branch_scale();
  for (int h = 2; h <= cfg.depth; ++h) {
    const Matrix& prev = c.hidden[static_cast<std::size_t>(h - 2)];
    const bool present = opts.use_mask ? mask.holds(h) : true;
    if (!present) {
      c.hidden[static_cast<std::size_t>(h - 1)] = prev;
      continue;
    }
    const double coef =
        s_res * (cfg.partitionable(h) ? opts.partition_scale : 1.0);
    c.preact[static_cast<std::size_t>(h - 1)] = p.block(h) * prev;
    c.hidden[static_cast<std::size_t>(h - 1)] =
        prev + coef * detail::act(cfg.activation,
                                  c.preact[static_cast<std::size_t>(h - 1)]);
  }
  c.predictions =
      c.hidden[static_cast<std::size_t>(cfg.depth - 1)].transpose() *
      p.output_weights;
  return c;
}

/// Single-sample forward pass; returns the prediction and the cache.
template <class Params>
std::pair<double, ActivationCache> forward(
    const ModelConfig& cfg, const Params& p, const Vector& x,
    const BlockMask& mask, const ForwardOpts& opts = ForwardOpts::train()) {
  BatchCache bc = forward_batch(cfg, p, Matrix(x), mask, opts);
  ActivationCache c;
  c.hidden.reserve(bc.hidden.size());
  c.preact.reserve(bc.preact.size());
  for (auto& m : bc.hidden) c.hidden.emplace_back(m.col(0));
  for (auto& m : bc.preact)
    c.preact.emplace_back(m.size() > 0 ? Vector(m.col(0)) : Vector());
  c.prediction = bc.predictions(0);
  return {c.prediction, std::move(c)};
}

/// Squared-norm loss, L = 1/2 * sum_i (y_i - u_i)^2.
template <class Params>
double loss(const ModelConfig& cfg, const Params& p, const Dataset& data,
            const BlockMask& mask, const ForwardOpts& opts = ForwardOpts::train()) {
  if (data.n() == 0) throw std::invalid_argument("loss over an empty dataset");
  BatchCache c = forward_batch(cfg, p, data.features.transpose(), mask, opts);
  return 0.5 * (c.predictions - data.labels).squaredNorm();
}

struct GradResult {
  Gradients grads;  // blocks absent from the compute graph stay 0x0
  double batch_loss = 0.0;
  Vector predictions;
};

/// Ascent gradient of L over a batch. Masked-out blocks do not route the
/// backward signal; their gradient entries are left empty here (the
/// dataset-level grad() expands them to zero matrices).
template <class Params>
GradResult grad_batch(const ModelConfig& cfg, const Params& p,
                      const Matrix& inputs, const Vector& targets,
                      const BlockMask& mask,
                      const ForwardOpts& opts = ForwardOpts::train()) {
  BatchCache c = forward_batch(cfg, p, inputs, mask, opts);
  GradResult out;
  out.predictions = c.predictions;
  const Vector resid = c.predictions - targets;  // d L / d u_i
  out.batch_loss = 0.5 * resid.squaredNorm();
  out.grads.block_weights.resize(static_cast<std::size_t>(cfg.depth - 1));

  out.grads.output_weights =
      c.hidden[static_cast<std::size_t>(cfg.depth - 1)] * resid;

  // delta = dL/dx^(h), back through the residual chain.
  Matrix delta = p.output_weights * resid.transpose();  // m x B
  const double s_res = cfg.branch_scale();
  for (int h = cfg.depth; h >= 2; --h) {
    const bool present = opts.use_mask ? mask.holds(h) : true;
    if (!present) continue;
    const double coef =
        s_res * (cfg.partitionable(h) ? opts.partition_scale : 1.0);
    const Matrix branch =
        coef * detail::act_deriv(cfg.activation,
                                 c.preact[static_cast<std::size_t>(h - 1)])
                   .cwiseProduct(delta);
    out.grads.block(h).noalias() =
        branch * c.hidden[static_cast<std::size_t>(h - 2)].transpose();
    delta.noalias() += p.block(h).transpose() * branch;
  }
  const Matrix branch1 =
      cfg.input_scale() *
      detail::act_deriv(cfg.activation, c.preact[0]).cwiseProduct(delta);
  out.grads.input_weights.noalias() = branch1 * c.input.transpose();
  return out;
}

/// Ascent gradient of the dataset loss under the mask. Gradients of
/// masked-out blocks are identically zero.
template <class Params>
Gradients grad(const ModelConfig& cfg, const Params& p, const Dataset& data,
               const BlockMask& mask,
               const ForwardOpts& opts = ForwardOpts::train()) {
  Gradients g =
      grad_batch(cfg, p, data.features.transpose(), data.labels, mask, opts)
          .grads;
  for (auto& b : g.block_weights)
    if (b.size() == 0) b = Matrix::Zero(cfg.width, cfg.width);
  return g;
}

struct GramResult {
  Matrix total;                  // G, n x n
  std::vector<Matrix> per_layer;  // G^(h) for h = 1..H, then the readout term
};

/// Gram matrix of per-sample prediction gradients under the full mask:
/// G_ij = <du_i/dtheta, du_j/dtheta>, split per layer. Each per-sample
/// weight gradient is a rank-one outer product b x^T, so the layer terms
/// reduce to Hadamard products of two small Gram matrices.
inline GramResult gram_matrix(const ModelConfig& cfg, const GlobalParams& p,
                              const Dataset& data) {
  const int n = data.n();
  if (n == 0) throw std::invalid_argument("gram_matrix over an empty dataset");
  const BlockMask full = BlockMask::all_ones(cfg);
  BatchCache c = forward_batch(cfg, p, data.features.transpose(), full,
                               ForwardOpts::train());

  GramResult res;
  res.per_layer.assign(static_cast<std::size_t>(cfg.depth + 1),
                       Matrix::Zero(n, n));

  // du_i/da = x_i^(H)
  res.per_layer[static_cast<std::size_t>(cfg.depth)] =
      c.hidden[static_cast<std::size_t>(cfg.depth - 1)].transpose() *
      c.hidden[static_cast<std::size_t>(cfg.depth - 1)];

  Matrix delta = p.output_weights * Matrix::Ones(1, n);  // du/dx^(h)
  const double s_res = cfg.branch_scale();
  for (int h = cfg.depth; h >= 2; --h) {
    const Matrix branch =
        s_res * detail::act_deriv(cfg.activation,
                                  c.preact[static_cast<std::size_t>(h - 1)])
                    .cwiseProduct(delta);
    const Matrix& prev = c.hidden[static_cast<std::size_t>(h - 2)];
    res.per_layer[static_cast<std::size_t>(h - 1)] =
        (branch.transpose() * branch).cwiseProduct(prev.transpose() * prev);
    delta.noalias() += p.block(h).transpose() * branch;
  }
  const Matrix branch1 =
      cfg.input_scale() *
      detail::act_deriv(cfg.activation, c.preact[0]).cwiseProduct(delta);
  res.per_layer[0] = (branch1.transpose() * branch1)
                         .cwiseProduct(c.input.transpose() * c.input);

  res.total = Matrix::Zero(n, n);
  for (const auto& g : res.per_layer) res.total += g;
  return res;
}

// --- checkpoint format -----------------------------------------------------
// One JSON header line {"version":1,"H":..,"m":..,"d":..,"c_res":..,
// "c_sigma":..,"activation":".."}, '\n', then raw little-endian 64-bit
// floats: input block row-major, residual blocks row-major, readout.

namespace detail {

inline void put_le_doubles(std::ofstream& out, const double* p, std::size_t k) {
  static_assert(sizeof(double) == 8);
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(p),
              static_cast<std::streamsize>(8 * k));
  } else {
    for (std::size_t i = 0; i < k; ++i) {
      char b[8];
      std::memcpy(b, &p[i], 8);
      std::swap(b[0], b[7]);
      std::swap(b[1], b[6]);
      std::swap(b[2], b[5]);
      std::swap(b[3], b[4]);
      out.write(b, 8);
    }
  }
}

inline void write_row_major(std::ofstream& out, const Matrix& m,
                            std::vector<double>& buf) {
  buf.resize(static_cast<std::size_t>(m.size()));
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) buf[k++] = m(r, c);
  put_le_doubles(out, buf.data(), k);
}

inline void read_le_doubles(std::ifstream& in, double* p, std::size_t k) {
  in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(8 * k));
  if (!in) throw std::runtime_error("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < k; ++i) {
      char b[8];
      std::memcpy(b, &p[i], 8);
      std::swap(b[0], b[7]);
      std::swap(b[1], b[6]);
      std::swap(b[2], b[5]);
      std::swap(b[3], b[4]);
      std::memcpy(&p[i], b, 8);
    }
  }
}

inline void read_row_major(std::ifstream& in, Matrix& m,
                           std::vector<double>& buf) {
  buf.resize(static_cast<std::size_t>(m.size()));
  read_le_doubles(in, buf.data(), buf.size());
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = buf[k++];
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                            const GlobalParams& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  nlohmann::json header = {{"version", 1},
                           {"H", cfg.depth},
                           {"m", cfg.width},
                           {"d", cfg.input_dim},
                           {"c_res", cfg.c_res},
                           {"c_sigma", cfg.c_sigma},
                           {"activation", activation_name(cfg.activation)}};
  out << header.dump() << '\n';
  std::vector<double> buf;
  detail::write_row_major(out, p.input_weights, buf);
  for (const auto& w : p.block_weights) detail::write_row_major(out, w, buf);
  detail::put_le_doubles(out, p.output_weights.data(),
                         static_cast<std::size_t>(p.output_weights.size()));
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

struct Checkpoint {
  int depth = 0;
  int width = 0;
  int input_dim = 0;
  double c_res = 0.0;
  double c_sigma = 0.0;
  Activation activation = Activation::relu;
  GlobalParams params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("checkpoint missing header: " + path);
  nlohmann::json header = nlohmann::json::parse(line);
  Checkpoint ck;
  if (header.at("version").get<int>() != 1)
    throw std::runtime_error("unsupported checkpoint version");
  ck.depth = header.at("H").get<int>();
  ck.width = header.at("m").get<int>();
  ck.input_dim = header.at("d").get<int>();
  ck.c_res = header.at("c_res").get<double>();
  ck.c_sigma = header.at("c_sigma").get<double>();
  const std::string act = header.at("activation").get<std::string>();
  if (act == "relu") {
    ck.activation = Activation::relu;
  } else if (act == "identity") {
    ck.activation = Activation::identity;
  } else {
    throw std::runtime_error("unknown activation in checkpoint: " + act);
  }
  ck.params.input_weights.resize(ck.width, ck.input_dim);
  ck.params.block_weights.assign(static_cast<std::size_t>(ck.depth - 1),
                                 Matrix(ck.width, ck.width));
  ck.params.output_weights.resize(ck.width);
  std::vector<double> buf;
  detail::read_row_major(in, ck.params.input_weights, buf);
  for (auto& w : ck.params.block_weights) detail::read_row_major(in, w, buf);
  detail::read_le_doubles(in, ck.params.output_weights.data(),
                          static_cast<std::size_t>(ck.width));
  return ck;
}

}  // namespace resist
