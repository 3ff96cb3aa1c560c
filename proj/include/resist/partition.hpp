#pragma once

#include <algorithm>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "resist/model.hpp"

namespace resist {

/// One synchronization round's block-to-worker assignment.
struct PartitionPlan {
  int round = 0;
  int workers = 1;
  std::vector<BlockMask> masks;    // one per worker
  std::vector<int> shared_blocks;  // blocks outside the partitionable range

  nlohmann::json to_json() const {
    nlohmann::json masks_json = nlohmann::json::array();
    for (const auto& m : masks) {
      nlohmann::json bits = nlohmann::json::array();
      for (auto b : m.bits) bits.push_back(static_cast<int>(b));
      masks_json.push_back(bits);
    }
    return {{"round", round}, {"workers", workers}, {"masks", masks_json}};
  }

  static PartitionPlan from_json(const nlohmann::json& j) {
    PartitionPlan plan;
    plan.round = j.at("round").get<int>();
    plan.workers = j.at("workers").get<int>();
    for (const auto& bits : j.at("masks")) {
      BlockMask m;
      m.depth = static_cast<int>(bits.size());
      for (const auto& b : bits)
        m.bits.push_back(static_cast<std::uint8_t>(b.get<int>()));
      plan.masks.push_back(std::move(m));
    }
    return plan;
  }
};

/// Every partitionable block gets bit 1 on every worker; used for warm-up
/// rounds and the local-SGD baselines.
inline PartitionPlan full_plan(const ModelConfig& cfg, int workers, int round) {
  PartitionPlan plan;
  plan.round = round;
  plan.workers = workers;
  plan.masks.assign(static_cast<std::size_t>(workers), BlockMask::all_ones(cfg));
  for (int h = 1; h <= cfg.depth; ++h)
    if (!cfg.partitionable(h)) plan.shared_blocks.push_back(h);
  return plan;
}

/// Round-robin deal of a shuffled permutation of the partitionable blocks,
/// then a minimum-depth top-up that shares uniformly-sampled blocks with
/// deficient workers. Pure function of (cfg, workers, round, seed); the RNG
/// stream is keyed by hash(seed, round) so plans are order-independent.
inline PartitionPlan make_plan(const ModelConfig& cfg, int workers, int round,
                               std::uint64_t seed) {
  cfg.validate();
  if (workers < 1) throw std::invalid_argument("make_plan: workers >= 1");

  PartitionPlan plan;
  plan.round = round;
  plan.workers = workers;
  plan.masks.assign(static_cast<std::size_t>(workers),
                    BlockMask::shared_only(cfg));
  for (int h = 1; h <= cfg.depth; ++h)
    if (!cfg.partitionable(h)) plan.shared_blocks.push_back(h);

  std::vector<int> blocks;
  for (int h = cfg.partition_lo; h <= cfg.partition_hi; ++h)
    blocks.push_back(h);
  if (blocks.empty()) return plan;

  DetRng rng(stream_seed(seed, static_cast<std::uint64_t>(round), 0,
                         stream_tag::partition));
  rng.shuffle(blocks);
  for (std::size_t k = 0; k < blocks.size(); ++k)
    plan.masks[k % static_cast<std::size_t>(workers)].set(blocks[k], true);

  // Top-up: sample (without replacement) blocks the worker lacks until the
  // minimum depth is met; the target is capped at the available blocks.
  const int target = std::min(cfg.min_depth, static_cast<int>(blocks.size()));
  for (int v = 0; v < workers; ++v) {
    BlockMask& mask = plan.masks[static_cast<std::size_t>(v)];
    int have = mask.held_partitionable(cfg);
    while (have < target) {
      std::vector<int> missing;
      for (int h = cfg.partition_lo; h <= cfg.partition_hi; ++h)
        if (!mask.holds(h)) missing.push_back(h);
      mask.set(missing[rng.below(missing.size())], true);
      ++have;
    }
  }
  return plan;
}

/// One worker's trainable parameter subset. Blocks the worker does not hold
/// are absent (no storage), mirroring the per-worker memory footprint.
struct SubResNetView {
  int worker = 0;
  BlockMask mask;
  Matrix input_weights;
  std::vector<std::optional<Matrix>> block_weights;  // index h-2
  Vector output_weights;

  Matrix& block(int h) {
    return block_weights[static_cast<std::size_t>(h - 2)].value();
  }
  const Matrix& block(int h) const {
    return block_weights[static_cast<std::size_t>(h - 2)].value();
  }
  bool has_block(int h) const {
    return block_weights[static_cast<std::size_t>(h - 2)].has_value();
  }

  std::int64_t param_count() const {
    std::int64_t c = input_weights.size() + output_weights.size();
    for (const auto& b : block_weights)
      if (b) c += b->size();
    return c;
  }
};

/// Copies of the input block, all blocks the worker holds, and the readout.
inline SubResNetView extract_view(const GlobalParams& global,
                                  const PartitionPlan& plan, int worker) {
  if (worker < 0 || worker >= plan.workers)
    throw std::invalid_argument("extract_view: worker out of range");
  const BlockMask& mask = plan.masks[static_cast<std::size_t>(worker)];
  SubResNetView view;
  view.worker = worker;
  view.mask = mask;
  view.input_weights = global.input_weights;
  view.output_weights = global.output_weights;
  view.block_weights.resize(global.block_weights.size());
  for (int h = 2; h <= global.depth(); ++h)
    if (mask.holds(h))
      view.block_weights[static_cast<std::size_t>(h - 2)] = global.block(h);
  return view;
}

}  // namespace resist
