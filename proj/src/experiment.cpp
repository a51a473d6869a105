#include "avss/experiment.hpp"

#include <cmath>
#include <string>

#include <nlohmann/json.hpp>

#include "avss/error.hpp"
#include "canonical_json.hpp"

namespace avss {

namespace {

using nlohmann::ordered_json;

// Runs one pipeline stage, re-raising failures with the stage and seed named
// while keeping the data-vs-internal error category.
template <class F>
auto stage(std::string_view name, std::uint64_t seed, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const UsageError&) {
    throw;
  } catch (const DataError& e) {
    throw DataError("stage '" + std::string(name) + "' failed for seed " + std::to_string(seed) +
                    ": " + e.what());
  } catch (const std::exception& e) {
    throw Error("stage '" + std::string(name) + "' failed for seed " + std::to_string(seed) +
                ": " + e.what());
  }
}

ordered_json config_echo(const ExperimentOptions& o) {
  ordered_json c;
  c["vocab_size"] = o.config.vocab_size;
  c["context_len"] = o.config.context_len;
  c["d_model"] = o.config.d_model;
  c["n_heads"] = o.config.n_heads;
  c["n_layers"] = o.config.n_layers;
  c["mlp_ratio"] = o.config.mlp_ratio;
  c["tie_embeddings"] = o.config.tie_embeddings;
  c["learning_rate"] = o.config.learning_rate;
  c["train_steps"] = o.config.train_steps;
  c["batch_size"] = o.config.batch_size;
  c["epsilon"] = o.stats.epsilon;
  c["sparsity_floor"] = o.stats.sparsity_floor;
  c["activation_point"] = std::string(to_string(o.point));
  c["policy"] = std::string(to_string(PrunePolicy::lowest_fraction));
  c["rho"] = o.rho;
  c["random_plans"] = o.random_plans;
  c["heldout_fraction"] = o.heldout_fraction;
  c["capture_tokens"] = o.capture_tokens;
  c["eval_tokens"] = o.eval_tokens;
  return c;
}

}  // namespace

ExperimentSummary run_experiment(std::string_view corpus, const ExperimentOptions& options,
                                 const std::filesystem::path& out_dir) {
  options.config.validate();
  options.stats.validate();
  if (options.seeds.empty()) throw UsageError("no seeds given");
  if (!(options.heldout_fraction > 0.0 && options.heldout_fraction < 1.0)) {
    throw DomainError("heldout_fraction must lie in (0, 1)");
  }
  auto log = [&](const std::string& msg) {
    if (options.log) options.log(msg);
  };

  const std::vector<Token> tokens = bytes_to_tokens(corpus);
  const auto split = static_cast<std::size_t>(
      std::floor(static_cast<double>(tokens.size()) * (1.0 - options.heldout_fraction)));
  const std::span<const Token> all(tokens);
  const auto train_part = all.subspan(0, split);
  const auto heldout = all.subspan(split);
  if (heldout.size() <= options.config.context_len) {
    throw DataError("held-out split has " + std::to_string(heldout.size()) +
                    " tokens; need more than context_len");
  }
  const auto capture_part = heldout.subspan(0, std::min(options.capture_tokens, heldout.size()));
  const auto eval_part = heldout.subspan(0, std::min(options.eval_tokens, heldout.size()));

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());

  ExperimentSummary summary;
  for (const std::uint64_t seed : options.seeds) {
    SeedResult run;
    run.seed = seed;
    ToyModelConfig config = options.config;
    config.seed = seed;
    const auto dir = out_dir / ("seed_" + std::to_string(seed));
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());

    log("seed " + std::to_string(seed) + ": training " + std::to_string(config.train_steps) +
        " steps");
    const ToyCheckpoint ckpt = stage("train", seed, [&] { return train(config, train_part); });
    if (!ckpt.train_loss_history.empty()) {
      run.initial_loss = ckpt.train_loss_history.front();
      run.final_loss = ckpt.train_loss_history.back();
    }
    if (config.train_steps == 0) {
      run.caveats.push_back(
          "untrained model (train_steps=0): layer scores reflect initialization only");
    }
    stage("train", seed, [&] { write_checkpoint_file(ckpt, dir / "checkpoint.avckpt"); });

    log("seed " + std::to_string(seed) + ": capturing activations");
    const TraceSet trace = stage("capture", seed, [&] {
      TraceSet t = capture_traceset(ckpt, capture_part, options.point);
      write_trace_file(t, dir / "trace.avtrace");
      return t;
    });

    run.analysis = stage("analyze", seed, [&] {
      AnalysisReport r = analyze(trace, options.stats, PrunePolicy::lowest_fraction, options.rho);
      write_text_file(dir / "report.json", serialize_report(r));
      write_text_file(dir / "report.csv", report_csv(r));
      return r;
    });
    stage("plan", seed, [&] {
      write_text_file(dir / "plan.json", serialize_plan(run.analysis.plan, run.analysis.model_id));
    });

    log("seed " + std::to_string(seed) + ": evaluating pruned perplexity");
    run.retention = stage("prune-eval", seed, [&] {
      RetentionReport r =
          evaluate_retention(ckpt, eval_part, run.analysis.plan,
                             run.analysis.plan.pruned_layers.size(), options.random_plans,
                             seed * 1000);
      write_text_file(dir / "retention.json", serialize_retention(r));
      return r;
    });
    if (run.avss_wins()) ++summary.wins;
    summary.runs.push_back(std::move(run));
  }

  std::vector<double> retentions;
  for (const auto& r : summary.runs) {
    if (r.retention.plan) retentions.push_back(r.retention.plan->retention);
  }
  if (!retentions.empty()) summary.median_retention = median(retentions);

  write_text_file(out_dir / "summary.json", serialize_summary(summary, options));
  write_text_file(out_dir / "plot_data.csv", plot_data_csv(summary));
  return summary;
}

std::string serialize_summary(const ExperimentSummary& summary, const ExperimentOptions& options) {
  ordered_json j;
  j["tool"] = std::string(kToolName);
  j["version"] = std::string(kToolVersion);
  j["retention_definition"] = "baseline_perplexity / pruned_perplexity";
  j["win_definition"] = "avss-pruned perplexity <= median random-pruned perplexity";
  j["config"] = config_echo(options);
  ordered_json runs = ordered_json::array();
  for (const auto& r : summary.runs) {
    ordered_json s;
    s["seed"] = r.seed;
    s["model_id"] = r.analysis.model_id;
    s["initial_train_loss"] = r.initial_loss;
    s["final_train_loss"] = r.final_loss;
    s["baseline_perplexity"] = r.retention.baseline_perplexity;
    s["pruned_layers"] = r.analysis.plan.pruned_layers;
    s["avss_perplexity"] = r.retention.plan ? r.retention.plan->perplexity : 0.0;
    s["retention"] = r.retention.plan ? r.retention.plan->retention : 0.0;
    ordered_json random_ppl = ordered_json::array();
    if (r.retention.random) {
      for (const auto& e : r.retention.random->runs) random_ppl.push_back(e.perplexity);
    }
    s["random_perplexities"] = std::move(random_ppl);
    s["median_random_perplexity"] =
        r.retention.random ? r.retention.random->median_perplexity : 0.0;
    s["avss_wins"] = r.avss_wins();
    s["caveats"] = r.caveats;
    runs.push_back(std::move(s));
  }
  j["runs"] = std::move(runs);
  ordered_json agg;
  agg["seeds"] = summary.runs.size();
  agg["wins"] = summary.wins;
  agg["median_retention"] = summary.median_retention;
  j["aggregate"] = std::move(agg);
  return detail::canonical_json(j);
}

std::string plot_data_csv(const ExperimentSummary& summary) {
  std::string out = "seed,layer_index,norm_avss,cumulative_avss,rank,pruned\n";
  for (const auto& r : summary.runs) {
    const auto& plan = r.analysis.plan;
    for (const auto& e : r.analysis.entries) {
      const bool pruned =
          std::binary_search(plan.pruned_layers.begin(), plan.pruned_layers.end(), e.layer_index);
      out += std::to_string(r.seed) + "," + std::to_string(e.layer_index) + "," +
             format_real(e.norm_avss) + "," + format_real(e.cumulative_avss) + "," +
             std::to_string(e.rank) + (pruned ? ",1\n" : ",0\n");
    }
  }
  return out;
}

}  // namespace avss
