#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "avss/scoring.hpp"
#include "avss/stats.hpp"
#include "avss/toy_model.hpp"
#include "avss/trace.hpp"

namespace avss {

inline constexpr std::string_view kToolName = "avss";
inline constexpr std::string_view kToolVersion = AVSS_VERSION;

// Formats a double with 17 significant digits ("%.17g"), which round-trips.
std::string format_real(double value);

// Per-layer statistics, scores and the embedded pruning plan for one trace.
struct AnalysisReport {
  std::string model_id;
  ActivationPoint activation_point = ActivationPoint::block_output;
  StatsConfig config;
  std::vector<LayerStats> stats;
  std::vector<AvssEntry> entries;
  PruningPlan plan;
};

AnalysisReport analyze(const TraceSet& set, const StatsConfig& config,
                       PrunePolicy policy = PrunePolicy::lowest_fraction, double parameter = 0.25);

// Canonical serialization: fixed key order, 17 significant digits, two-space
// indent, trailing newline. Byte-identical for identical inputs.
std::string serialize_report(const AnalysisReport& report);
AnalysisReport parse_report(std::string_view text);
// One row per layer, comma-separated, header first.
std::string report_csv(const AnalysisReport& report);

std::string serialize_plan(const PruningPlan& plan, std::string_view model_id);
PruningPlan parse_plan(std::string_view text);

struct PlanEvaluation {
  std::vector<std::size_t> pruned_layers;
  double perplexity = 0.0;
  double retention = 0.0;  // baseline_ppl / pruned_ppl
};

struct RandomControl {
  std::size_t prune_count = 0;
  std::uint64_t seed = 0;
  std::vector<PlanEvaluation> runs;
  double median_perplexity = 0.0;
  double median_retention = 0.0;
};

struct RetentionReport {
  std::string model_id;
  std::size_t heldout_tokens = 0;
  double baseline_perplexity = 0.0;
  std::optional<PlanEvaluation> plan;
  std::optional<RandomControl> random;
};

// `count` plans of `prune_count` layers each, drawn uniformly without
// replacement; plan t uses a generator seeded with seed + t.
std::vector<std::vector<std::size_t>> random_plans(std::size_t layer_count,
                                                   std::size_t prune_count, std::size_t count,
                                                   std::uint64_t seed);

double median(std::vector<double> values);

// Baseline perplexity, perplexity under `plan` (if any) and under a random
// control of `random_count` plans of `random_prune_count` layers (if any).
// Throws PlanError when a plan does not fit the checkpoint.
RetentionReport evaluate_retention(const ToyCheckpoint& ckpt, std::span<const Token> heldout,
                                   const std::optional<PruningPlan>& plan,
                                   std::size_t random_prune_count, std::size_t random_count,
                                   std::uint64_t random_seed);

std::string serialize_retention(const RetentionReport& report);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace avss
