#pragma once

#include <atomic>
#include <chrono>
#include <exception>
#include <functional>
#include <limits>
#include <mutex>
#include <thread>
#include <vector>

#include "resist/aggregate.hpp"
#include "resist/comm.hpp"
#include "resist/data.hpp"
#include "resist/partition.hpp"

namespace resist {

inline constexpr double kDivergenceLimit = 1e12;

// Deterministic simulated-clock constants: per-round time is the slowest
// worker's training flops plus the round's traffic over a fixed link.
inline constexpr double kSimFlopsPerSecond = 2e9;
inline constexpr double kSimBytesPerSecond = 1e9;

struct ProtocolConfig {
  Method method = Method::resist;
  int workers = 1;      // S
  int rounds = 1;       // T
  int local_iters = 50; // ell
  double eta = 0.01;
  int batch_size = 0;   // 0 = full batch
  int warmup_rounds = 0;
  ShardMode shard_mode = ShardMode::full_data;
  Codec codec{};
  std::uint64_t seed = 0;

  void validate() const {
    if (workers < 1) throw std::invalid_argument("workers must be >= 1");
    if (rounds < 1) throw std::invalid_argument("rounds must be >= 1");
    if (local_iters < 1) throw std::invalid_argument("local_iters must be >= 1");
    if (!(eta > 0.0)) throw std::invalid_argument("eta must be > 0");
    if (batch_size < 0) throw std::invalid_argument("batch_size must be >= 0");
    if (warmup_rounds < 0)
      throw std::invalid_argument("warmup_rounds must be >= 0");
    if (method == Method::data_parallel && local_iters != 1)
      throw std::invalid_argument("data_parallel requires local_iters == 1");
    if (method == Method::ensemble && warmup_rounds != 0)
      throw std::invalid_argument("ensemble does not take warm-up rounds");
  }
};

struct RoundMetrics {
  int round = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double shared_bytes = 0.0;
  double partitioned_bytes = 0.0;
  double cumulative_bytes = 0.0;
  double seconds = 0.0;           // cumulative simulated seconds
  std::uint64_t param_hash = 0;   // fingerprint, not serialized
};

/// Called after each completed round; returning false stops the run early
/// (the metrics collected so far are returned). Only used by tooling such
/// as the step-size scan; it never alters the computation.
using RoundObserver = std::function<bool(const RoundMetrics&)>;

struct RunResult {
  double initial_train_loss = 0.0;
  double initial_eval_loss = 0.0;
  std::vector<RoundMetrics> metrics;
  GlobalParams final_params;                // aggregated protocols
  std::vector<SubResNetView> ensemble_views;  // ensemble protocol
  PartitionPlan ensemble_plan;
  CommLedger ledger{64};
  double wall_seconds = 0.0;
};

/// Exactly `ell` descent steps W <- W - eta * grad on the view's present
/// parameters; mini-batches are drawn without replacement by the worker's
/// stream (a full batch consumes no randomness). A zero-iteration call
/// returns the view bitwise-unchanged.
inline SubResNetView local_train(const ModelConfig& cfg, SubResNetView view,
                                 const Dataset& shard, int ell, double eta,
                                 int batch_size, const ForwardOpts& opts,
                                 DetRng& rng) {
  if (!(eta > 0.0)) throw std::invalid_argument("local_train: eta must be > 0");
  if (ell == 0) return view;
  const Matrix features_t = shard.features.transpose();  // d x n
  const int n = shard.n();
  const bool full_batch = batch_size <= 0 || batch_size >= n;

  for (int step = 0; step < ell; ++step) {
    GradResult g;
    if (full_batch) {
      g = grad_batch(cfg, view, features_t, shard.labels, view.mask, opts);
    } else {
      const std::vector<int> idx = rng.sample_without_replacement(batch_size, n);
      Matrix xb(features_t.rows(), batch_size);
      Vector yb(batch_size);
      for (int i = 0; i < batch_size; ++i) {
        xb.col(i) = features_t.col(idx[static_cast<std::size_t>(i)]);
        yb(i) = shard.labels(idx[static_cast<std::size_t>(i)]);
      }
      g = grad_batch(cfg, view, xb, yb, view.mask, opts);
    }
    if (!std::isfinite(g.batch_loss) || g.batch_loss > kDivergenceLimit)
      throw divergence_error("local training diverged (loss " +
                             std::to_string(g.batch_loss) + ")");
    view.input_weights.noalias() -= eta * g.grads.input_weights;
    for (int h = 2; h <= cfg.depth; ++h)
      if (view.has_block(h)) view.block(h).noalias() -= eta * g.grads.block(h);
    view.output_weights.noalias() -= eta * g.grads.output_weights;
  }
  return view;
}

namespace detail {

// Runs fn(0..workers-1) on up to max_threads threads; the first exception
// wins and is rethrown on the caller. Work items are independent, so the
// result is identical for any thread count.
template <class F>
void for_each_worker(int workers, int max_threads, F&& fn) {
  const int threads = std::max(1, std::min(max_threads, workers));
  if (threads == 1) {
    for (int v = 0; v < workers; ++v) fn(v);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (int v = next.fetch_add(1); v < workers; v = next.fetch_add(1)) {
        try {
          fn(v);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline double check_finite_loss(double value) {
  if (!std::isfinite(value) || value > kDivergenceLimit)
    throw divergence_error("evaluation diverged (loss " +
                           std::to_string(value) + ")");
  return value;
}

// Training flops per sample per step for a view under the 3x forward rule
// of thumb (forward matvec, backward matvec, weight outer product).
inline double train_flops_per_sample(const ModelConfig& cfg, int held_blocks) {
  const double m = cfg.width;
  return 6.0 * (m * cfg.input_dim + held_blocks * m * m + m);
}

inline std::uint64_t views_hash(const std::vector<SubResNetView>& views) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& v : views) {
    h = fnv1a(v.input_weights, h);
    for (const auto& b : v.block_weights)
      if (b) h = fnv1a(*b, h);
    h = fnv1a(v.output_weights, h);
  }
  return h;
}

// Round-trip the transmitted update through the codec: the receiver
// reconstructs base + dequantize(quantize(view - base)) per tensor.
inline void compress_update(const Codec& codec, const GlobalParams& base,
                            SubResNetView& view, const ModelConfig& cfg) {
  if (codec.kind == CodecKind::none) return;
  view.input_weights =
      base.input_weights +
      apply_codec(codec, Matrix(view.input_weights - base.input_weights));
  for (int h = 2; h <= cfg.depth; ++h)
    if (view.has_block(h))
      view.block(h) =
          base.block(h) + apply_codec(codec, Matrix(view.block(h) - base.block(h)));
  view.output_weights =
      base.output_weights +
      apply_codec(codec, Vector(view.output_weights - base.output_weights));
}

}  // namespace detail

/// Mean of the per-view masked train-mode predictions.
inline Vector ensemble_predictions(const ModelConfig& cfg,
                                   const std::vector<SubResNetView>& views,
                                   const Dataset& data) {
  Vector mean = Vector::Zero(data.n());
  const Matrix features_t = data.features.transpose();
  for (const auto& v : views)
    mean += forward_batch(cfg, v, features_t, v.mask, ForwardOpts::train())
                .predictions;
  return mean / static_cast<double>(views.size());
}

inline double ensemble_loss(const ModelConfig& cfg,
                            const std::vector<SubResNetView>& views,
                            const Dataset& data) {
  return 0.5 *
         (ensemble_predictions(cfg, views, data) - data.labels).squaredNorm();
}

/// The aggregated-model evaluation convention per protocol: resist scales
/// partitionable branches by 1/S at inference; the local-SGD family never
/// masks, so it evaluates unscaled.
inline double evaluate_global(const ModelConfig& cfg, const GlobalParams& p,
                              const Dataset& data, Method method, int workers) {
  const BlockMask full = BlockMask::all_ones(cfg);
  const ForwardOpts opts = method == Method::resist
                               ? ForwardOpts::inference(workers)
                               : ForwardOpts::train();
  return loss(cfg, p, data, full, opts);
}

namespace detail {

inline RunResult run_ensemble_with_plan(const ProtocolConfig& pcfg,
                                        const ModelConfig& cfg,
                                        const Dataset& train,
                                        const Dataset& eval_data,
                                        const PartitionPlan& plan,
                                        int max_threads,
                                        const RoundObserver& observer = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  RunResult res;
  res.ledger = CommLedger(pcfg.codec.accounting_bits());
  res.ensemble_plan = plan;

  const GlobalParams global = init_params(cfg, pcfg.seed);
  std::vector<SubResNetView> views;
  views.reserve(static_cast<std::size_t>(pcfg.workers));
  for (int v = 0; v < pcfg.workers; ++v)
    views.push_back(extract_view(global, plan, v));

  res.initial_train_loss =
      detail::check_finite_loss(ensemble_loss(cfg, views, train));
  res.initial_eval_loss =
      detail::check_finite_loss(ensemble_loss(cfg, views, eval_data));

  const std::vector<Dataset> shards =
      shard(train, pcfg.workers, pcfg.shard_mode, pcfg.seed);

  double sim_seconds = 0.0;
  for (int r = 0; r < pcfg.rounds; ++r) {
    detail::for_each_worker(pcfg.workers, max_threads, [&](int v) {
      DetRng rng(stream_seed(pcfg.seed, static_cast<std::uint64_t>(r),
                             static_cast<std::uint64_t>(v), stream_tag::local));
      views[static_cast<std::size_t>(v)] = local_train(
          cfg, std::move(views[static_cast<std::size_t>(v)]),
          shards[static_cast<std::size_t>(v)], pcfg.local_iters, pcfg.eta,
          pcfg.batch_size, ForwardOpts::train(), rng);
    });

    // Round 0 records the one-way initial distribution of each view at full
    // precision; there is no synchronization afterwards.
    double shared_b = 0.0;
    double part_b = 0.0;
    if (r == 0) {
      for (const auto& v : views) {
        const double part_params =
            static_cast<double>(v.mask.held_partitionable(cfg)) * cfg.width *
            cfg.width;
        shared_b += 8.0 * (static_cast<double>(v.param_count()) - part_params);
        part_b += 8.0 * part_params;
      }
    }
    res.ledger.record(r, shared_b, part_b);

    double max_flops = 0.0;
    for (const auto& v : views) {
      const int batch = pcfg.batch_size <= 0
                            ? shards[static_cast<std::size_t>(v.worker)].n()
                            : std::min(pcfg.batch_size,
                                       shards[static_cast<std::size_t>(v.worker)].n());
      max_flops = std::max(
          max_flops, detail::train_flops_per_sample(
                         cfg, v.mask.held_partitionable(cfg) +
                                  (cfg.depth - 1 - cfg.partitionable_count())) *
                         batch * pcfg.local_iters);
    }
    sim_seconds += max_flops / kSimFlopsPerSecond +
                   (shared_b + part_b) / kSimBytesPerSecond;

    RoundMetrics row;
    row.round = r;
    row.train_loss = detail::check_finite_loss(ensemble_loss(cfg, views, train));
    row.eval_loss =
        detail::check_finite_loss(ensemble_loss(cfg, views, eval_data));
    row.shared_bytes = shared_b;
    row.partitioned_bytes = part_b;
    row.cumulative_bytes = res.ledger.cumulative();
    row.seconds = sim_seconds;
    row.param_hash = detail::views_hash(views);
    res.metrics.push_back(row);
    if (observer && !observer(res.metrics.back())) break;
  }
  res.ensemble_views = std::move(views);
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return res;
}

}  // namespace detail

/// Runs the configured protocol. For resist: warm-up rounds of full-model
/// local SGD (partitionable branches still scaled by 1/S), then T rounds of
/// partition -> local training -> masked aggregation. local_sgd and
/// data_parallel train the full model on every worker and average all
/// parameters; ensemble never aggregates.
inline RunResult run_protocol(const ProtocolConfig& pcfg, const ModelConfig& cfg,
                              const Dataset& train, const Dataset& eval_data,
                              int max_threads = 1,
                              const RoundObserver& observer = {}) {
  pcfg.validate();
  cfg.validate();
  if (train.dim() != cfg.input_dim)
    throw std::invalid_argument("dataset dimension does not match the model");

  if (pcfg.method == Method::ensemble) {
    const PartitionPlan plan = make_plan(cfg, pcfg.workers, 0, pcfg.seed);
    return detail::run_ensemble_with_plan(pcfg, cfg, train, eval_data, plan,
                                          max_threads, observer);
  }

  const auto t0 = std::chrono::steady_clock::now();
  RunResult res;
  res.ledger = CommLedger(pcfg.codec.accounting_bits());

  GlobalParams global = init_params(cfg, pcfg.seed);
  res.initial_train_loss = detail::check_finite_loss(
      evaluate_global(cfg, global, train, pcfg.method, pcfg.workers));
  res.initial_eval_loss = detail::check_finite_loss(
      evaluate_global(cfg, global, eval_data, pcfg.method, pcfg.workers));

  const std::vector<Dataset> shards =
      shard(train, pcfg.workers, pcfg.shard_mode, pcfg.seed);

  const int total_rounds = pcfg.warmup_rounds + pcfg.rounds;
  double sim_seconds = 0.0;
  std::vector<SubResNetView> views(static_cast<std::size_t>(pcfg.workers));

  for (int r = 0; r < total_rounds; ++r) {
    const bool warmup = r < pcfg.warmup_rounds;
    const bool partitioned_round = pcfg.method == Method::resist && !warmup;
    const PartitionPlan plan = partitioned_round
                                   ? make_plan(cfg, pcfg.workers, r, pcfg.seed)
                                   : full_plan(cfg, pcfg.workers, r);
    // Warm-up trains the full model but keeps partitionable branches scaled.
    const ForwardOpts train_opts =
        (pcfg.method == Method::resist && warmup)
            ? ForwardOpts{1.0 / pcfg.workers, true}
            : ForwardOpts::train();

    detail::for_each_worker(pcfg.workers, max_threads, [&](int v) {
      SubResNetView view = extract_view(global, plan, v);
      DetRng rng(stream_seed(pcfg.seed, static_cast<std::uint64_t>(r),
                             static_cast<std::uint64_t>(v), stream_tag::local));
      view = local_train(cfg, std::move(view), shards[static_cast<std::size_t>(v)],
                         pcfg.local_iters, pcfg.eta, pcfg.batch_size, train_opts,
                         rng);
      detail::compress_update(pcfg.codec, global, view, cfg);
      views[static_cast<std::size_t>(v)] = std::move(view);
    });

    const RoundVolume vol = round_volume_split(
        plan, cfg, partitioned_round ? Method::resist : Method::local_sgd,
        pcfg.codec);
    res.ledger.record(r, vol.shared_bytes, vol.partitioned_bytes);

    global = aggregate(cfg, views, plan);

    double max_flops = 0.0;
    for (const auto& v : views) {
      const int batch =
          pcfg.batch_size <= 0
              ? shards[static_cast<std::size_t>(v.worker)].n()
              : std::min(pcfg.batch_size,
                         shards[static_cast<std::size_t>(v.worker)].n());
      const int held_residual =
          v.mask.held_partitionable(cfg) +
          (cfg.depth - 1 - cfg.partitionable_count());
      max_flops = std::max(max_flops,
                           detail::train_flops_per_sample(cfg, held_residual) *
                               batch * pcfg.local_iters);
    }
    sim_seconds +=
        max_flops / kSimFlopsPerSecond + vol.total() / kSimBytesPerSecond;

    RoundMetrics row;
    row.round = r;
    row.train_loss = detail::check_finite_loss(
        evaluate_global(cfg, global, train, pcfg.method, pcfg.workers));
    row.eval_loss = detail::check_finite_loss(
        evaluate_global(cfg, global, eval_data, pcfg.method, pcfg.workers));
    row.shared_bytes = vol.shared_bytes;
    row.partitioned_bytes = vol.partitioned_bytes;
    row.cumulative_bytes = res.ledger.cumulative();
    row.seconds = sim_seconds;
    row.param_hash = global.hash();
    res.metrics.push_back(row);
    if (observer && !observer(res.metrics.back())) break;
  }

  res.final_params = std::move(global);
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return res;
}

inline RunResult run_resist(const ProtocolConfig& pcfg, const ModelConfig& cfg,
                            const Dataset& train, const Dataset& eval_data,
                            int max_threads = 1) {
  if (pcfg.method != Method::resist)
    throw std::invalid_argument("run_resist: method must be resist");
  return run_protocol(pcfg, cfg, train, eval_data, max_threads);
}

inline RunResult run_local_sgd(const ProtocolConfig& pcfg, const ModelConfig& cfg,
                               const Dataset& train, const Dataset& eval_data,
                               int max_threads = 1) {
  if (pcfg.method != Method::local_sgd)
    throw std::invalid_argument("run_local_sgd: method must be local_sgd");
  return run_protocol(pcfg, cfg, train, eval_data, max_threads);
}

inline RunResult run_data_parallel(const ProtocolConfig& pcfg,
                                   const ModelConfig& cfg, const Dataset& train,
                                   const Dataset& eval_data,
                                   int max_threads = 1) {
  if (pcfg.method != Method::data_parallel)
    throw std::invalid_argument("run_data_parallel: method must be data_parallel");
  return run_protocol(pcfg, cfg, train, eval_data, max_threads);
}

inline RunResult run_ensemble(const ProtocolConfig& pcfg, const ModelConfig& cfg,
                              const Dataset& train, const Dataset& eval_data,
                              int max_threads = 1) {
  if (pcfg.method != Method::ensemble)
    throw std::invalid_argument("run_ensemble: method must be ensemble");
  return run_protocol(pcfg, cfg, train, eval_data, max_threads);
}

struct SweepRow {
  int ell = 0;
  double final_train_loss = 0.0;
  double final_eval_loss = 0.0;
  double cumulative_bytes = 0.0;
};

/// One run per requested local-iteration count, everything else fixed.
inline std::vector<SweepRow> sweep_local_iterations(
    const ProtocolConfig& base, const ModelConfig& cfg, const Dataset& train,
    const Dataset& eval_data, const std::vector<int>& ells,
    int max_threads = 1) {
  if (ells.empty())
    throw std::invalid_argument("sweep_local_iterations: empty ell list");
  std::vector<SweepRow> rows;
  rows.reserve(ells.size());
  for (int ell : ells) {
    ProtocolConfig pcfg = base;
    pcfg.local_iters = ell;
    const RunResult run = run_protocol(pcfg, cfg, train, eval_data, max_threads);
    SweepRow row;
    row.ell = ell;
    row.final_train_loss = run.metrics.back().train_loss;
    row.final_eval_loss = run.metrics.back().eval_loss;
    row.cumulative_bytes = run.ledger.cumulative();
    rows.push_back(row);
  }
  return rows;
}

struct EtaPick {
  double eta = 0.0;
  RunResult run;  // the winning run, reusable by the caller
};

/// Grid selection by best final training loss: one run per grid point at a
/// short horizon, divergent points skipped.
inline double pick_eta_best_final(const ProtocolConfig& base,
                                  const ModelConfig& cfg, const Dataset& train,
                                  const Dataset& eval_data,
                                  std::vector<double> grid = {1e-1, 3e-2, 1e-2,
                                                              3e-3, 1e-3},
                                  int rounds = 40, int max_threads = 1) {
  if (grid.empty())
    throw std::invalid_argument("pick_eta_best_final: empty grid");
  double best_eta = grid.back();
  double best_loss = std::numeric_limits<double>::infinity();
  for (double eta : grid) {
    ProtocolConfig pcfg = base;
    pcfg.eta = eta;
    pcfg.rounds = rounds;
    try {
      const RunResult run =
          run_protocol(pcfg, cfg, train, eval_data, max_threads);
      if (run.metrics.back().train_loss < best_loss) {
        best_loss = run.metrics.back().train_loss;
        best_eta = eta;
      }
    } catch (const divergence_error&) {
      continue;
    }
  }
  return best_eta;
}

/// Grid selection by stability: scan from the largest step down and return
/// the first one whose full run keeps the training loss non-increasing
/// after round 3 (relative slack 1e-9). Unstable candidates abort at the
/// first violation, divergent ones are skipped; if nothing is stable the
/// smallest grid step wins by fallback.
inline EtaPick pick_eta_stable(const ProtocolConfig& base, const ModelConfig& cfg,
                               const Dataset& train, const Dataset& eval_data,
                               std::vector<double> grid = {1e-1, 3e-2, 1e-2,
                                                           3e-3, 1e-3},
                               int max_threads = 1) {
  if (grid.empty()) throw std::invalid_argument("pick_eta_stable: empty grid");
  std::sort(grid.begin(), grid.end(), std::greater<>());
  for (double eta : grid) {
    ProtocolConfig pcfg = base;
    pcfg.eta = eta;
    double prev = std::numeric_limits<double>::infinity();
    bool stable = true;
    const RoundObserver stop_on_rise = [&](const RoundMetrics& row) {
      if (row.round >= 4 && row.train_loss > prev * (1.0 + 1e-9)) {
        stable = false;
        return false;
      }
      prev = row.train_loss;
      return true;
    };
    try {
      RunResult run =
          run_protocol(pcfg, cfg, train, eval_data, max_threads, stop_on_rise);
      if (stable) return {eta, std::move(run)};
    } catch (const divergence_error&) {
      continue;
    }
  }
  ProtocolConfig pcfg = base;
  pcfg.eta = grid.back();
  return {grid.back(),
          run_protocol(pcfg, cfg, train, eval_data, max_threads)};
}

}  // namespace resist
