#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "avss/report.hpp"
#include "avss/toy_model.hpp"

namespace avss {

struct ExperimentOptions {
  ToyModelConfig config;  // config.seed is replaced by each run's seed
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  StatsConfig stats;
  ActivationPoint point = ActivationPoint::block_output;
  double rho = 0.25;
  std::size_t random_plans = 5;
  // Fraction of the corpus (its tail) held out for capture and evaluation.
  double heldout_fraction = 0.1;
  std::size_t capture_tokens = 2048;
  std::size_t eval_tokens = 8192;
  // Progress messages; never written into the output tree.
  std::function<void(std::string_view)> log;
};

struct SeedResult {
  std::uint64_t seed = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  AnalysisReport analysis;
  RetentionReport retention;
  std::vector<std::string> caveats;

  bool avss_wins() const {
    return retention.plan && retention.random &&
           retention.plan->perplexity <= retention.random->median_perplexity;
  }
};

struct ExperimentSummary {
  std::vector<SeedResult> runs;
  std::size_t wins = 0;
  double median_retention = 0.0;
};

// For each seed: train, capture, analyze, plan, and evaluate the plan against
// the random control. Writes under out_dir:
//   seed_<s>/{checkpoint.avckpt, trace.avtrace, report.json, report.csv,
//             plan.json, retention.json}
//   summary.json, plot_data.csv
// Outputs depend only on (corpus, options); no timestamps or timings.
// A failing stage throws with the stage name and seed in the message.
ExperimentSummary run_experiment(std::string_view corpus, const ExperimentOptions& options,
                                 const std::filesystem::path& out_dir);

std::string serialize_summary(const ExperimentSummary& summary, const ExperimentOptions& options);
std::string plot_data_csv(const ExperimentSummary& summary);

}  // namespace avss
