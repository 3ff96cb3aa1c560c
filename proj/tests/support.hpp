#pragma once

// Shared test-side oracles. These stay independent of the library's
// gradient/aggregation code paths on purpose.

#include <limits>

#include "resist/data.hpp"
#include "resist/model.hpp"

namespace resist::testsupport {

struct FdReport {
  int checked = 0;
  int skipped = 0;
  double max_rel = 0.0;
};

/// Central finite differences over every coordinate present under the mask.
/// A coordinate is excluded when its perturbation moves some pre-activation
/// across a ReLU kink or leaves one within kink_tol of it; unmoved
/// pre-activations never exclude (a frozen zero is a smooth contribution).
inline FdReport finite_difference_check(const ModelConfig& cfg,
                                        GlobalParams params, const Dataset& data,
                                        const BlockMask& mask, double eps = 1e-5,
                                        double kink_tol = 1e-7) {
  const Gradients g = grad(cfg, params, data, mask);
  const Matrix features_t = data.features.transpose();

  auto eval = [&](std::vector<Matrix>* preacts) {
    BatchCache c = forward_batch(cfg, params, features_t, mask);
    if (preacts) *preacts = std::move(c.preact);
    return 0.5 * (c.predictions - data.labels).squaredNorm();
  };

  auto near_kink = [&](const std::vector<Matrix>& up,
                       const std::vector<Matrix>& down) {
    if (cfg.activation != Activation::relu) return false;
    for (std::size_t layer = 0; layer < up.size(); ++layer) {
      const Matrix& zu = up[layer];
      const Matrix& zd = down[layer];
      for (Eigen::Index i = 0; i < zu.size(); ++i) {
        const double a = zu.data()[i];
        const double b = zd.data()[i];
        if (a == b) continue;  // unaffected by this coordinate
        if ((a > 0.0) != (b > 0.0)) return true;
        if (std::min(std::abs(a), std::abs(b)) < kink_tol) return true;
      }
    }
    return false;
  };

  FdReport report;
  std::vector<Matrix> z_up, z_down;
  auto probe = [&](double& coord, double analytic) {
    const double saved = coord;
    coord = saved + eps;
    const double up = eval(&z_up);
    coord = saved - eps;
    const double down = eval(&z_down);
    coord = saved;
    if (near_kink(z_up, z_down)) {
      ++report.skipped;
      return;
    }
    const double fd = (up - down) / (2.0 * eps);
    const double rel =
        std::abs(analytic - fd) / std::max(1.0, std::abs(analytic));
    report.max_rel = std::max(report.max_rel, rel);
    ++report.checked;
  };

  for (Eigen::Index i = 0; i < params.input_weights.size(); ++i)
    probe(params.input_weights.data()[i], g.input_weights.data()[i]);
  for (int h = 2; h <= cfg.depth; ++h) {
    if (!mask.holds(h)) continue;
    for (Eigen::Index i = 0; i < params.block(h).size(); ++i)
      probe(params.block(h).data()[i], g.block(h).data()[i]);
  }
  for (Eigen::Index i = 0; i < params.output_weights.size(); ++i)
    probe(params.output_weights(i), g.output_weights(i));
  return report;
}

inline BlockMask random_mask(const ModelConfig& cfg, DetRng& rng) {
  BlockMask mask = BlockMask::all_ones(cfg);
  bool any = false;
  for (int h = cfg.partition_lo; h <= cfg.partition_hi; ++h) {
    const bool keep = rng.uniform01() < 0.6;
    mask.set(h, keep);
    any = any || keep;
  }
  if (!any) mask.set(cfg.partition_lo, true);
  return mask;
}

/// du/dtheta flattened, via the grad() path: a single sample with
/// y = u - 1 has residual exactly 1, so grad(L) equals grad(u).
inline Vector prediction_gradient(const ModelConfig& cfg, const GlobalParams& p,
                                  const Vector& x) {
  const BlockMask full = BlockMask::all_ones(cfg);
  Dataset one;
  one.features = x.transpose();
  one.label_bound = std::numeric_limits<double>::infinity();
  one.labels.resize(1);
  const auto [u, cache] = forward(cfg, p, x, full);
  one.labels(0) = u - 1.0;
  const Gradients g = grad(cfg, p, one, full);
  Vector flat(cfg.param_count());
  Eigen::Index at = 0;
  for (Eigen::Index i = 0; i < g.input_weights.size(); ++i)
    flat(at++) = g.input_weights.data()[i];
  for (const auto& b : g.block_weights)
    for (Eigen::Index i = 0; i < b.size(); ++i) flat(at++) = b.data()[i];
  for (Eigen::Index i = 0; i < g.output_weights.size(); ++i)
    flat(at++) = g.output_weights(i);
  return flat;
}

}  // namespace resist::testsupport
