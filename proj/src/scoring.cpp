#include "avss/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "avss/error.hpp"

namespace avss {

std::string_view to_string(PrunePolicy policy) {
  return policy == PrunePolicy::lowest_fraction ? "lowest-fraction" : "cumulative-mass";
}

PrunePolicy parse_prune_policy(std::string_view text) {
  if (text == "lowest-fraction" || text == "lowest_fraction") return PrunePolicy::lowest_fraction;
  if (text == "cumulative-mass" || text == "cumulative_mass") return PrunePolicy::cumulative_mass;
  throw UsageError("unknown policy '" + std::string(text) +
                   "' (expected lowest-fraction or cumulative-mass)");
}

double avss_score(double variance, double sparsity, double sparsity_floor) {
  return variance / std::max(sparsity, sparsity_floor);
}

std::vector<double> normalize_avss(std::span<const double> scores) {
  return normalize_across_layers(scores);
}

std::vector<double> cumulative_avss(std::span<const double> norm_scores) {
  std::vector<double> out(norm_scores.size());
  std::partial_sum(norm_scores.begin(), norm_scores.end(), out.begin());
  return out;
}

std::vector<AvssEntry> rank_layers(std::span<const LayerStats> stats, const StatsConfig& config) {
  config.validate();
  if (stats.empty()) throw EmptyInputError("no layer statistics to rank");

  std::vector<double> scores(stats.size());
  for (std::size_t i = 0; i < stats.size(); ++i) {
    scores[i] = avss_score(stats[i].variance, stats[i].sparsity, config.sparsity_floor);
  }
  const auto norm = normalize_avss(scores);
  const auto cumulative = cumulative_avss(norm);

  std::vector<AvssEntry> entries(stats.size());
  for (std::size_t i = 0; i < stats.size(); ++i) {
    entries[i] = {stats[i].layer_index, scores[i], norm[i], cumulative[i], 0};
  }
  const auto order = ascending_order(entries);
  for (std::size_t r = 0; r < order.size(); ++r) entries[order[r]].rank = r;
  return entries;
}

std::vector<std::size_t> ascending_order(std::span<const AvssEntry> entries) {
  std::vector<std::size_t> order(entries.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (entries[a].norm_avss != entries[b].norm_avss) {
      return entries[a].norm_avss < entries[b].norm_avss;
    }
    return entries[a].layer_index < entries[b].layer_index;
  });
  return order;
}

PruningPlan plan_from_pruned(std::size_t layer_count, std::vector<std::size_t> pruned,
                             PrunePolicy policy, double parameter) {
  std::sort(pruned.begin(), pruned.end());
  if (std::adjacent_find(pruned.begin(), pruned.end()) != pruned.end()) {
    throw PlanError("plan lists a layer more than once");
  }
  if (!pruned.empty() && pruned.back() >= layer_count) {
    throw PlanError("plan references layer " + std::to_string(pruned.back()) +
                    " but the model has " + std::to_string(layer_count) + " layers");
  }
  PruningPlan plan;
  plan.policy = policy;
  plan.parameter = parameter;
  plan.layer_count = layer_count;
  for (std::size_t i = 0; i < layer_count; ++i) {
    if (!std::binary_search(pruned.begin(), pruned.end(), i)) plan.kept_layers.push_back(i);
  }
  plan.pruned_layers = std::move(pruned);
  return plan;
}

PruningPlan make_pruning_plan(std::span<const AvssEntry> entries, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw DomainError("rho must lie in [0, 1]");
  const std::size_t m = entries.size();
  const auto count = static_cast<std::size_t>(std::floor(rho * static_cast<double>(m)));
  const auto order = ascending_order(entries);
  std::vector<std::size_t> pruned;
  for (std::size_t r = 0; r < count; ++r) pruned.push_back(entries[order[r]].layer_index);
  return plan_from_pruned(m, std::move(pruned), PrunePolicy::lowest_fraction, rho);
}

PruningPlan make_pruning_plan_by_mass(std::span<const AvssEntry> entries, double mass) {
  if (!(mass >= 0.0 && mass <= 1.0)) throw DomainError("mass must lie in [0, 1]");
  const auto order = ascending_order(entries);
  std::vector<std::size_t> pruned;
  double total = 0.0;
  for (const std::size_t pos : order) {
    const double next = total + entries[pos].norm_avss;
    if (next > mass + kMassTolerance) break;
    total = next;
    pruned.push_back(entries[pos].layer_index);
  }
  return plan_from_pruned(entries.size(), std::move(pruned), PrunePolicy::cumulative_mass, mass);
}

}  // namespace avss
