#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "avss/stats.hpp"

namespace avss {

struct AvssEntry {
  std::size_t layer_index = 0;
  double avss = 0.0;
  double norm_avss = 0.0;
  // Running sum of norm_avss in depth order.
  double cumulative_avss = 0.0;
  // 0 = lowest norm_avss; ties go to the lower layer index.
  std::size_t rank = 0;
};

enum class PrunePolicy { lowest_fraction, cumulative_mass };

std::string_view to_string(PrunePolicy policy);
// Accepts "lowest-fraction"/"cumulative-mass" (and the underscore spellings).
PrunePolicy parse_prune_policy(std::string_view text);

inline constexpr std::string_view kTieBreak = "lower index pruned first";

// Slack applied when comparing summed norm_avss against a mass budget, so that
// a prefix summing to the budget in exact arithmetic is not lost to rounding.
inline constexpr double kMassTolerance = 1e-12;

struct PruningPlan {
  PrunePolicy policy = PrunePolicy::lowest_fraction;
  // rho for lowest_fraction, mass budget for cumulative_mass.
  double parameter = 0.0;
  std::size_t layer_count = 0;
  std::vector<std::size_t> pruned_layers;  // sorted ascending
  std::vector<std::size_t> kept_layers;    // sorted ascending

  double prune_fraction() const {
    return layer_count == 0 ? 0.0
                            : static_cast<double>(pruned_layers.size()) /
                                  static_cast<double>(layer_count);
  }

  friend bool operator==(const PruningPlan&, const PruningPlan&) = default;
};

// variance / max(sparsity, floor).
double avss_score(double variance, double sparsity, double sparsity_floor);

// Same kernel and degenerate-sum convention as normalize_across_layers.
std::vector<double> normalize_avss(std::span<const double> scores);

// Depth-order prefix sums of normalized scores.
std::vector<double> cumulative_avss(std::span<const double> norm_scores);

std::vector<AvssEntry> rank_layers(std::span<const LayerStats> stats, const StatsConfig& config);

// Layer positions ordered from least to most important (rank order).
std::vector<std::size_t> ascending_order(std::span<const AvssEntry> entries);

// Prunes the floor(rho * M) entries with the lowest norm_avss.
PruningPlan make_pruning_plan(std::span<const AvssEntry> entries, double rho);

// Prunes the longest ascending-norm_avss prefix whose summed mass stays within
// `mass` (plus kMassTolerance).
PruningPlan make_pruning_plan_by_mass(std::span<const AvssEntry> entries, double mass);

// Builds a plan from an explicit pruned set; throws PlanError on out-of-range
// or duplicate indices.
PruningPlan plan_from_pruned(std::size_t layer_count, std::vector<std::size_t> pruned,
                             PrunePolicy policy, double parameter);

}  // namespace avss
