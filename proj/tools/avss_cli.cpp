// avss: layer-importance analysis and pruning from activation traces.
//
// Exit codes: 0 success, 1 usage, 2 data/validation, 3 internal.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "avss/error.hpp"
#include "avss/experiment.hpp"
#include "avss/report.hpp"
#include "avss/scoring.hpp"
#include "avss/stats.hpp"
#include "avss/toy_model.hpp"
#include "avss/trace.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitInternal = 3;

std::filesystem::path sibling_csv(const std::filesystem::path& out) {
  auto csv = out;
  csv.replace_extension(".csv");
  return csv;
}

void apply_overrides(avss::ToyModelConfig& config, const std::vector<std::string>& overrides) {
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw avss::UsageError("--set expects key=value, got '" + kv + "'");
    config.set(std::string_view(kv).substr(0, eq), std::string_view(kv).substr(eq + 1));
  }
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto dash = item.find('-');
    try {
      if (dash == std::string::npos) {
        seeds.push_back(std::stoull(item));
      } else {
        const auto lo = std::stoull(item.substr(0, dash));
        const auto hi = std::stoull(item.substr(dash + 1));
        if (hi < lo) throw avss::UsageError("bad seed range '" + item + "'");
        for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
      }
    } catch (const std::logic_error&) {
      throw avss::UsageError("bad seed list '" + text + "'");
    }
  }
  if (seeds.empty()) throw avss::UsageError("empty seed list");
  return seeds;
}

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

avss::ActivationPoint parse_point(const std::string& text) {
  try {
    return avss::parse_activation_point(text);
  } catch (const avss::FormatError& e) {
    throw avss::UsageError(e.what());
  }
}

std::vector<avss::Token> load_tokens(const std::string& path, std::size_t limit) {
  auto tokens = avss::bytes_to_tokens(avss::read_text_file(path));
  if (limit > 0 && tokens.size() > limit) tokens.resize(limit);
  return tokens;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Activation variance-sparsity layer scoring and pruning toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(avss::kToolVersion));

  // validate
  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "Check a trace file; list violations");
  validate->add_option("trace", validate_path, "AVTRACE file")->required();

  // analyze
  std::string analyze_path, analyze_out, analyze_policy = "lowest-fraction";
  double epsilon = 0.01, floor = 1e-6, rho = 0.25;
  std::optional<double> mass;
  auto* analyze = app.add_subcommand("analyze", "Score and rank layers of a trace");
  analyze->add_option("trace", analyze_path, "AVTRACE file")->required();
  analyze->add_option("--epsilon", epsilon, "Sparsity threshold")->capture_default_str();
  analyze->add_option("--sparsity-floor", floor, "Clamp for sparsity in the score")
      ->capture_default_str();
  analyze->add_option("--policy", analyze_policy, "lowest-fraction | cumulative-mass")
      ->capture_default_str();
  analyze->add_option("--rho", rho, "Fraction of layers to prune")->capture_default_str();
  analyze->add_option("--mass", mass, "Mass budget (cumulative-mass policy)");
  analyze->add_option("--out", analyze_out, "Report path (.json); a .csv table is written beside it")
      ->required();

  // plan
  std::string plan_report, plan_out, plan_policy = "lowest-fraction";
  double plan_rho = 0.25;
  std::optional<double> plan_mass;
  auto* plan = app.add_subcommand("plan", "Derive a pruning plan from a report");
  plan->add_option("report", plan_report, "Report from analyze")->required();
  plan->add_option("--policy", plan_policy, "lowest-fraction | cumulative-mass")
      ->capture_default_str();
  plan->add_option("--rho", plan_rho, "Fraction of layers to prune")->capture_default_str();
  plan->add_option("--mass", plan_mass, "Mass budget (cumulative-mass policy)");
  plan->add_option("--out", plan_out, "Plan path")->required();

  // prune-eval
  std::string pe_ckpt, pe_heldout, pe_plan, pe_out;
  std::size_t pe_random = 0, pe_seeds = 5, pe_tokens = 0;
  std::uint64_t pe_random_seed = 0;
  auto* prune_eval = app.add_subcommand("prune-eval", "Perplexity retention of a pruned model");
  prune_eval->add_option("--checkpoint", pe_ckpt, "Model checkpoint (.avckpt)")->required();
  prune_eval->add_option("--heldout", pe_heldout, "Held-out text file")->required();
  prune_eval->add_option("--plan", pe_plan, "Plan from the plan subcommand");
  prune_eval->add_option("--random", pe_random, "Random control: layers per random plan");
  prune_eval->add_option("--seeds", pe_seeds, "Random control: number of random plans")
      ->capture_default_str();
  prune_eval->add_option("--random-seed", pe_random_seed, "Random control: base seed")
      ->capture_default_str();
  prune_eval->add_option("--max-tokens", pe_tokens, "Evaluate at most this many tokens (0 = all)");
  prune_eval->add_option("--out", pe_out, "Retention report path")->required();

  // run-experiment
  std::string ex_corpus, ex_out, ex_seeds = "1,2,3,4,5", ex_point = "block_output";
  std::vector<std::string> ex_set;
  avss::ExperimentOptions ex;
  auto* experiment = app.add_subcommand("run-experiment", "Train, score, prune, and compare");
  experiment->add_option("--corpus", ex_corpus, "UTF-8 training text")->required();
  experiment->add_option("--seeds", ex_seeds, "Seed list, e.g. 1,2,3 or 1-5")->capture_default_str();
  experiment->add_option("--set", ex_set, "Model config override key=value (repeatable)");
  experiment->add_option("--epsilon", ex.stats.epsilon, "Sparsity threshold")->capture_default_str();
  experiment->add_option("--sparsity-floor", ex.stats.sparsity_floor, "Sparsity clamp")
      ->capture_default_str();
  experiment->add_option("--rho", ex.rho, "Fraction of layers to prune")->capture_default_str();
  experiment->add_option("--point", ex_point, "Capture point")->capture_default_str();
  experiment->add_option("--random-plans", ex.random_plans, "Random plans per seed")
      ->capture_default_str();
  experiment->add_option("--capture-tokens", ex.capture_tokens, "Tokens captured per seed")
      ->capture_default_str();
  experiment->add_option("--eval-tokens", ex.eval_tokens, "Held-out tokens evaluated per seed")
      ->capture_default_str();
  experiment->add_option("--out", ex_out, "Output directory")->required();

  // train
  std::string tr_corpus, tr_out;
  std::vector<std::string> tr_set;
  auto* train = app.add_subcommand("train", "Train a toy transformer on a text file");
  train->add_option("--corpus", tr_corpus, "UTF-8 training text")->required();
  train->add_option("--set", tr_set, "Model config override key=value (repeatable)");
  train->add_option("--out", tr_out, "Checkpoint path (.avckpt)")->required();

  // capture
  std::string cap_ckpt, cap_text, cap_out, cap_point = "block_output";
  std::size_t cap_tokens = 2048;
  bool cap_no_timestamp = false;
  auto* capture = app.add_subcommand("capture", "Capture per-layer activations to a trace");
  capture->add_option("--checkpoint", cap_ckpt, "Model checkpoint (.avckpt)")->required();
  capture->add_option("--text", cap_text, "Input text file")->required();
  capture->add_option("--point", cap_point, "block_output | mlp_output | attention_output")
      ->capture_default_str();
  capture->add_option("--max-tokens", cap_tokens, "Capture at most this many tokens")
      ->capture_default_str();
  capture->add_flag("--no-timestamp", cap_no_timestamp, "Leave the creation time empty");
  capture->add_option("--out", cap_out, "Trace path (.avtrace)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*validate) {
      const auto set = avss::read_trace_unvalidated_file(validate_path);
      const auto violations = avss::validate_trace(set);
      for (const auto& v : violations) std::cout << avss::format_violation(v) << "\n";
      return violations.empty() ? kExitOk : kExitData;
    }

    if (*analyze) {
      const auto policy = avss::parse_prune_policy(analyze_policy);
      if (policy == avss::PrunePolicy::cumulative_mass && !mass) {
        throw avss::UsageError("--policy cumulative-mass requires --mass");
      }
      avss::StatsConfig config{epsilon, floor};
      config.validate();
      const auto set = avss::read_trace_file(analyze_path);
      const auto report = avss::analyze(
          set, config, policy, policy == avss::PrunePolicy::lowest_fraction ? rho : *mass);
      avss::write_text_file(analyze_out, avss::serialize_report(report));
      avss::write_text_file(sibling_csv(analyze_out), avss::report_csv(report));
      return kExitOk;
    }

    if (*plan) {
      const auto policy = avss::parse_prune_policy(plan_policy);
      if (policy == avss::PrunePolicy::cumulative_mass && !plan_mass) {
        throw avss::UsageError("--policy cumulative-mass requires --mass");
      }
      const auto report = avss::parse_report(avss::read_text_file(plan_report));
      const auto result = policy == avss::PrunePolicy::lowest_fraction
                              ? avss::make_pruning_plan(report.entries, plan_rho)
                              : avss::make_pruning_plan_by_mass(report.entries, *plan_mass);
      avss::write_text_file(plan_out, avss::serialize_plan(result, report.model_id));
      return kExitOk;
    }

    if (*prune_eval) {
      if (pe_plan.empty() && pe_random == 0) {
        throw avss::UsageError("prune-eval needs --plan, --random, or both");
      }
      const auto ckpt = avss::read_checkpoint_file(pe_ckpt);
      const auto heldout = load_tokens(pe_heldout, pe_tokens);
      std::optional<avss::PruningPlan> p;
      if (!pe_plan.empty()) p = avss::parse_plan(avss::read_text_file(pe_plan));
      const auto report = avss::evaluate_retention(ckpt, heldout, p, pe_random,
                                                   pe_random > 0 ? pe_seeds : 0, pe_random_seed);
      avss::write_text_file(pe_out, avss::serialize_retention(report));
      return kExitOk;
    }

    if (*experiment) {
      apply_overrides(ex.config, ex_set);
      ex.seeds = parse_seed_list(ex_seeds);
      ex.point = parse_point(ex_point);
      ex.log = [](std::string_view msg) { std::cerr << msg << "\n"; };
      const auto summary = avss::run_experiment(avss::read_text_file(ex_corpus), ex, ex_out);
      std::cout << "wins " << summary.wins << "/" << summary.runs.size()
                << ", median retention " << avss::format_real(summary.median_retention) << "\n";
      return kExitOk;
    }

    if (*train) {
      avss::ToyModelConfig config;
      apply_overrides(config, tr_set);
      const auto tokens = avss::bytes_to_tokens(avss::read_text_file(tr_corpus));
      const auto ckpt = avss::train(config, tokens, {[&](std::size_t step, double loss) {
                                      if (step % 25 == 0 || step + 1 == config.train_steps) {
                                        std::cerr << "step " << step << " loss " << loss << "\n";
                                      }
                                    }});
      avss::write_checkpoint_file(ckpt, tr_out);
      return kExitOk;
    }

    if (*capture) {
      const auto ckpt = avss::read_checkpoint_file(cap_ckpt);
      const auto tokens = load_tokens(cap_text, cap_tokens);
      auto set = avss::capture_traceset(ckpt, tokens, parse_point(cap_point));
      if (!cap_no_timestamp) set.created = utc_now();
      avss::write_trace_file(set, cap_out);
      return kExitOk;
    }
  } catch (const avss::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const avss::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}
