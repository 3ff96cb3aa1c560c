#pragma once

#include <string>
#include <vector>

#include "resist/partition.hpp"

namespace resist {

namespace detail {

// Mean over contributions in ascending worker order. A block whose holders
// all carry bitwise-identical bytes is copied verbatim: this is what makes
// aggregation idempotent and the extract->aggregate round trip exact (IEEE
// summation of k equal values divided by k can drift by an ulp for k >= 3).
template <class Tensor>
Tensor masked_mean(const std::vector<const Tensor*>& held) {
  const Tensor& first = *held.front();
  if (held.size() == 1) return first;
  bool identical = true;
  for (std::size_t i = 1; i < held.size() && identical; ++i)
    identical = bitwise_equal(first, *held[i]);
  if (identical) return first;
  Tensor sum = first;
  for (std::size_t i = 1; i < held.size(); ++i) sum += *held[i];
  return sum / static_cast<double>(held.size());
}

}  // namespace detail

/// Masked parameter averaging: each partitionable block becomes the mean
/// over the workers that hold it; shared blocks (including the input block)
/// and the readout are averaged over all workers. A block held by exactly
/// one worker is copied verbatim.
inline GlobalParams aggregate(const ModelConfig& cfg,
                              const std::vector<SubResNetView>& views,
                              const PartitionPlan& plan) {
  if (static_cast<int>(views.size()) != plan.workers ||
      static_cast<int>(plan.masks.size()) != plan.workers)
    throw std::invalid_argument("aggregate: views and plan disagree on S");

  // Summation order is ascending worker id regardless of list order.
  std::vector<const SubResNetView*> by_worker(views.size(), nullptr);
  for (const auto& v : views) {
    if (v.worker < 0 || v.worker >= plan.workers ||
        by_worker[static_cast<std::size_t>(v.worker)] != nullptr)
      throw std::invalid_argument("aggregate: bad or duplicate worker id");
    by_worker[static_cast<std::size_t>(v.worker)] = &v;
  }

  GlobalParams out;
  {
    std::vector<const Matrix*> held;
    for (const auto* v : by_worker) held.push_back(&v->input_weights);
    out.input_weights = detail::masked_mean(held);
  }
  out.block_weights.resize(static_cast<std::size_t>(cfg.depth - 1));
  for (int h = 2; h <= cfg.depth; ++h) {
    std::vector<const Matrix*> held;
    for (int v = 0; v < plan.workers; ++v) {
      if (!plan.masks[static_cast<std::size_t>(v)].holds(h)) continue;
      const SubResNetView& view = *by_worker[static_cast<std::size_t>(v)];
      if (!view.has_block(h))
        throw std::invalid_argument("aggregate: worker " + std::to_string(v) +
                                    " is missing block " + std::to_string(h) +
                                    " its mask claims");
      held.push_back(&view.block(h));
    }
    if (held.empty())
      throw coverage_error("aggregate: block " + std::to_string(h) +
                           " is held by no worker");
    out.block(h) = detail::masked_mean(held);
  }
  {
    std::vector<const Vector*> held;
    for (const auto* v : by_worker) held.push_back(&v->output_weights);
    out.output_weights = detail::masked_mean(held);
  }
  return out;
}

}  // namespace resist
