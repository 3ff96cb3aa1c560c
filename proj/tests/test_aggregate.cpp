#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "resist/aggregate.hpp"

using namespace resist;

namespace {

ModelConfig toy_cfg() {
  ModelConfig cfg;
  cfg.depth = 5;
  cfg.width = 3;
  cfg.input_dim = 2;
  cfg.partition_lo = 2;
  cfg.partition_hi = 5;
  cfg.min_depth = 1;
  return cfg;
}

std::vector<SubResNetView> extract_all(const GlobalParams& global,
                                       const PartitionPlan& plan) {
  std::vector<SubResNetView> views;
  for (int v = 0; v < plan.workers; ++v)
    views.push_back(extract_view(global, plan, v));
  return views;
}

// Random plan where every partitionable block lands on each worker with
// probability 1/2, re-rolled until coverage holds.
PartitionPlan random_overlapping_plan(const ModelConfig& cfg, int workers,
                                      DetRng& rng) {
  PartitionPlan plan = full_plan(cfg, workers, 0);
  for (int h = cfg.partition_lo; h <= cfg.partition_hi; ++h) {
    for (;;) {
      int holders = 0;
      for (int v = 0; v < workers; ++v) {
        const bool hold = rng.uniform01() < 0.5;
        plan.masks[static_cast<std::size_t>(v)].set(h, hold);
        holders += hold;
      }
      if (holders > 0) break;
    }
  }
  return plan;
}

void randomize_view(SubResNetView& view, DetRng& rng) {
  auto fill = [&](Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  };
  fill(view.input_weights);
  for (auto& b : view.block_weights)
    if (b) fill(*b);
  for (Eigen::Index i = 0; i < view.output_weights.size(); ++i)
    view.output_weights(i) = rng.normal();
}

// Independent per-coordinate mean over (worker, block) pairs.
GlobalParams brute_force_mean(const ModelConfig& cfg,
                              const std::vector<SubResNetView>& views,
                              const PartitionPlan& plan) {
  GlobalParams out = zeros_like(cfg);
  for (int v = 0; v < plan.workers; ++v)
    out.input_weights += views[static_cast<std::size_t>(v)].input_weights;
  out.input_weights /= static_cast<double>(plan.workers);
  for (int h = 2; h <= cfg.depth; ++h) {
    int count = 0;
    for (int v = 0; v < plan.workers; ++v) {
      if (!plan.masks[static_cast<std::size_t>(v)].holds(h)) continue;
      out.block(h) += views[static_cast<std::size_t>(v)].block(h);
      ++count;
    }
    if (count == 1) {
      // single holder: the mean is the verbatim value
    } else {
      out.block(h) /= static_cast<double>(count);
    }
  }
  for (int v = 0; v < plan.workers; ++v)
    out.output_weights += views[static_cast<std::size_t>(v)].output_weights;
  out.output_weights /= static_cast<double>(plan.workers);
  return out;
}

}  // namespace

TEST_CASE("identity round trip: extract then aggregate is bitwise exact") {
  const ModelConfig cfg = toy_cfg();
  const GlobalParams global = init_params(cfg, 31);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const PartitionPlan plan = make_plan(cfg, 3, 0, seed);
    const GlobalParams back = aggregate(cfg, extract_all(global, plan), plan);
    REQUIRE(bitwise_equal(back, global));
  }
}

TEST_CASE("a block held by two workers averages their values") {
  const ModelConfig cfg = toy_cfg();
  const GlobalParams global = init_params(cfg, 1);
  PartitionPlan plan = full_plan(cfg, 4, 0);
  // Block 3 held only by workers 1 and 3.
  for (int v = 0; v < 4; ++v) plan.masks[static_cast<std::size_t>(v)].set(3, v == 1 || v == 3);
  auto views = extract_all(global, plan);
  views[1].block(3).setConstant(1.0);
  views[3].block(3).setConstant(3.0);
  const GlobalParams merged = aggregate(cfg, views, plan);
  REQUIRE(merged.block(3).minCoeff() == 2.0);
  REQUIRE(merged.block(3).maxCoeff() == 2.0);
}

TEST_CASE("random overlapping plans match the brute-force mean") {
  const ModelConfig cfg = toy_cfg();
  DetRng rng(404);
  for (int trial = 0; trial < 200; ++trial) {
    const PartitionPlan plan = random_overlapping_plan(cfg, 3, rng);
    std::vector<SubResNetView> views = extract_all(init_params(cfg, trial), plan);
    for (auto& v : views) randomize_view(v, rng);
    const GlobalParams got = aggregate(cfg, views, plan);
    const GlobalParams want = brute_force_mean(cfg, views, plan);
    REQUIRE(bitwise_equal(got, want));
  }
}

TEST_CASE("aggregating identical views is idempotent, bitwise") {
  const ModelConfig cfg = toy_cfg();
  const GlobalParams global = init_params(cfg, 3);
  for (int workers : {2, 3, 5}) {
    const PartitionPlan plan = full_plan(cfg, workers, 0);
    const auto views = extract_all(global, plan);
    const GlobalParams merged = aggregate(cfg, views, plan);
    REQUIRE(bitwise_equal(merged, global));
  }
}

TEST_CASE("aggregate is linear in the views") {
  const ModelConfig cfg = toy_cfg();
  DetRng rng(7);
  const PartitionPlan plan = random_overlapping_plan(cfg, 3, rng);
  auto a = extract_all(init_params(cfg, 10), plan);
  auto b = extract_all(init_params(cfg, 11), plan);
  for (auto& v : a) randomize_view(v, rng);
  for (auto& v : b) randomize_view(v, rng);
  const double alpha = 0.7, beta = -1.3;

  auto mixed = a;
  for (std::size_t v = 0; v < a.size(); ++v) {
    mixed[v].input_weights = alpha * a[v].input_weights + beta * b[v].input_weights;
    for (int h = 2; h <= cfg.depth; ++h)
      if (mixed[v].has_block(h))
        mixed[v].block(h) = alpha * a[v].block(h) + beta * b[v].block(h);
    mixed[v].output_weights =
        alpha * a[v].output_weights + beta * b[v].output_weights;
  }
  const GlobalParams agg_mixed = aggregate(cfg, mixed, plan);
  const GlobalParams agg_a = aggregate(cfg, a, plan);
  const GlobalParams agg_b = aggregate(cfg, b, plan);
  for (int h = 2; h <= cfg.depth; ++h) {
    const Matrix want = alpha * agg_a.block(h) + beta * agg_b.block(h);
    REQUIRE((agg_mixed.block(h) - want).cwiseAbs().maxCoeff() <= 1e-12);
  }
  const Matrix want_in =
      alpha * agg_a.input_weights + beta * agg_b.input_weights;
  REQUIRE((agg_mixed.input_weights - want_in).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("worker order does not matter") {
  const ModelConfig cfg = toy_cfg();
  DetRng rng(52);
  const PartitionPlan plan = random_overlapping_plan(cfg, 4, rng);
  auto views = extract_all(init_params(cfg, 8), plan);
  for (auto& v : views) randomize_view(v, rng);
  const GlobalParams ordered = aggregate(cfg, views, plan);
  std::reverse(views.begin(), views.end());
  const GlobalParams reversed = aggregate(cfg, views, plan);
  REQUIRE(bitwise_equal(ordered, reversed));
}

TEST_CASE("coverage violations name the missing block") {
  const ModelConfig cfg = toy_cfg();
  const GlobalParams global = init_params(cfg, 5);
  PartitionPlan plan = full_plan(cfg, 2, 0);
  auto views = extract_all(global, plan);
  for (int v = 0; v < 2; ++v) {
    plan.masks[static_cast<std::size_t>(v)].set(4, false);
    views[static_cast<std::size_t>(v)].block_weights[4 - 2].reset();
  }
  try {
    aggregate(cfg, views, plan);
    FAIL("expected a coverage error");
  } catch (const coverage_error& e) {
    REQUIRE(std::string(e.what()).find("block 4") != std::string::npos);
  }
}

TEST_CASE("views and plan must agree on the worker count") {
  const ModelConfig cfg = toy_cfg();
  const GlobalParams global = init_params(cfg, 6);
  const PartitionPlan plan = full_plan(cfg, 3, 0);
  auto views = extract_all(global, plan);
  views.pop_back();
  REQUIRE_THROWS_AS(aggregate(cfg, views, plan), std::invalid_argument);
}
