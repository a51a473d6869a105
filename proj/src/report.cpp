#include "avss/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "avss/error.hpp"
#include "canonical_json.hpp"

namespace avss {

namespace {

using nlohmann::ordered_json;

bool is_scalar_array(const ordered_json& j) {
  return std::none_of(j.begin(), j.end(),
                      [](const ordered_json& e) { return e.is_object() || e.is_array(); });
}

void dump_canonical(const ordered_json& j, std::string& out, int depth) {
  const std::string pad(2 * static_cast<std::size_t>(depth + 1), ' ');
  const std::string close_pad(2 * static_cast<std::size_t>(depth), ' ');
  switch (j.type()) {
    case ordered_json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += "{\n";
      bool first = true;
      for (const auto& [key, value] : j.items()) {
        if (!first) out += ",\n";
        first = false;
        out += pad;
        out += ordered_json(key).dump();
        out += ": ";
        dump_canonical(value, out, depth + 1);
      }
      out += "\n" + close_pad + "}";
      return;
    }
    case ordered_json::value_t::array: {
      if (j.empty() || is_scalar_array(j)) {
        out += "[";
        for (std::size_t i = 0; i < j.size(); ++i) {
          if (i) out += ", ";
          dump_canonical(j[i], out, depth + 1);
        }
        out += "]";
        return;
      }
      out += "[\n";
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (i) out += ",\n";
        out += pad;
        dump_canonical(j[i], out, depth + 1);
      }
      out += "\n" + close_pad + "]";
      return;
    }
    case ordered_json::value_t::number_float:
      out += format_real(j.get<double>());
      return;
    default:
      out += j.dump();
  }
}

ordered_json parse_json(std::string_view text, std::string_view what) {
  try {
    return ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed " + std::string(what) + ": " + e.what());
  }
}

ordered_json plan_json(const PruningPlan& plan) {
  ordered_json j;
  j["policy"] = std::string(to_string(plan.policy));
  j["parameter"] = plan.parameter;
  j["tie_break"] = std::string(kTieBreak);
  j["layer_count"] = plan.layer_count;
  j["prune_count"] = plan.pruned_layers.size();
  j["pruned_layers"] = plan.pruned_layers;
  j["kept_layers"] = plan.kept_layers;
  return j;
}

PruningPlan plan_from_json(const ordered_json& j) {
  const auto policy = parse_prune_policy(j.at("policy").get<std::string>());
  auto plan = plan_from_pruned(j.at("layer_count").get<std::size_t>(),
                               j.at("pruned_layers").get<std::vector<std::size_t>>(), policy,
                               j.at("parameter").get<double>());
  if (j.contains("kept_layers") &&
      j.at("kept_layers").get<std::vector<std::size_t>>() != plan.kept_layers) {
    throw PlanError("plan's kept_layers is not the complement of pruned_layers");
  }
  return plan;
}

ordered_json evaluation_json(const PlanEvaluation& e) {
  ordered_json j;
  j["pruned_layers"] = e.pruned_layers;
  j["perplexity"] = e.perplexity;
  j["retention"] = e.retention;
  return j;
}

}  // namespace

namespace detail {

std::string canonical_json(const ordered_json& j) {
  std::string out;
  dump_canonical(j, out, 0);
  out += "\n";
  return out;
}

}  // namespace detail

std::string format_real(double value) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

AnalysisReport analyze(const TraceSet& set, const StatsConfig& config, PrunePolicy policy,
                       double parameter) {
  AnalysisReport report;
  report.model_id = set.model_id;
  report.activation_point = set.activation_point;
  report.config = config;
  report.stats = compute_layer_stats(set, config);
  report.entries = rank_layers(report.stats, config);
  report.plan = policy == PrunePolicy::lowest_fraction
                    ? make_pruning_plan(report.entries, parameter)
                    : make_pruning_plan_by_mass(report.entries, parameter);
  return report;
}

std::string serialize_report(const AnalysisReport& report) {
  ordered_json j;
  j["tool"] = std::string(kToolName);
  j["version"] = std::string(kToolVersion);
  j["model_id"] = report.model_id;
  j["activation_point"] = std::string(to_string(report.activation_point));
  j["layer_count"] = report.stats.size();
  ordered_json cfg;
  cfg["epsilon"] = report.config.epsilon;
  cfg["sparsity_floor"] = report.config.sparsity_floor;
  cfg["policy"] = std::string(to_string(report.plan.policy));
  cfg["parameter"] = report.plan.parameter;
  j["config"] = std::move(cfg);
  ordered_json layers = ordered_json::array();
  for (std::size_t i = 0; i < report.stats.size(); ++i) {
    const LayerStats& s = report.stats[i];
    const AvssEntry& e = report.entries[i];
    ordered_json l;
    l["layer_index"] = s.layer_index;
    l["mean"] = s.mean;
    l["variance"] = s.variance;
    l["std_dev"] = s.std_dev;
    l["norm_variance"] = s.norm_variance;
    l["sparsity"] = s.sparsity;
    l["norm_sparsity"] = s.norm_sparsity;
    l["sparsity_deviation"] = s.sparsity_deviation;
    l["avss"] = e.avss;
    l["norm_avss"] = e.norm_avss;
    l["cumulative_avss"] = e.cumulative_avss;
    l["rank"] = e.rank;
    layers.push_back(std::move(l));
  }
  j["layers"] = std::move(layers);
  j["plan"] = plan_json(report.plan);
  return detail::canonical_json(j);
}

AnalysisReport parse_report(std::string_view text) {
  const ordered_json j = parse_json(text, "report");
  AnalysisReport report;
  try {
    report.model_id = j.at("model_id").get<std::string>();
    report.activation_point = parse_activation_point(j.at("activation_point").get<std::string>());
    report.config.epsilon = j.at("config").at("epsilon").get<double>();
    report.config.sparsity_floor = j.at("config").at("sparsity_floor").get<double>();
    for (const auto& l : j.at("layers")) {
      LayerStats s;
      s.layer_index = l.at("layer_index").get<std::size_t>();
      s.mean = l.at("mean").get<double>();
      s.variance = l.at("variance").get<double>();
      s.std_dev = l.at("std_dev").get<double>();
      s.norm_variance = l.at("norm_variance").get<double>();
      s.sparsity = l.at("sparsity").get<double>();
      s.norm_sparsity = l.at("norm_sparsity").get<double>();
      s.sparsity_deviation = l.at("sparsity_deviation").get<double>();
      report.stats.push_back(s);
      AvssEntry e;
      e.layer_index = s.layer_index;
      e.avss = l.at("avss").get<double>();
      e.norm_avss = l.at("norm_avss").get<double>();
      e.cumulative_avss = l.at("cumulative_avss").get<double>();
      e.rank = l.at("rank").get<std::size_t>();
      report.entries.push_back(e);
    }
    report.plan = plan_from_json(j.at("plan"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report is missing fields: ") + e.what());
  }
  return report;
}

std::string report_csv(const AnalysisReport& report) {
  std::string out =
      "layer_index,mean,variance,std_dev,norm_variance,sparsity,norm_sparsity,"
      "sparsity_deviation,avss,norm_avss,cumulative_avss,rank,pruned\n";
  for (std::size_t i = 0; i < report.stats.size(); ++i) {
    const LayerStats& s = report.stats[i];
    const AvssEntry& e = report.entries[i];
    const bool pruned = std::binary_search(report.plan.pruned_layers.begin(),
                                           report.plan.pruned_layers.end(), s.layer_index);
    out += std::to_string(s.layer_index);
    for (const double v : {s.mean, s.variance, s.std_dev, s.norm_variance, s.sparsity,
                           s.norm_sparsity, s.sparsity_deviation, e.avss, e.norm_avss,
                           e.cumulative_avss}) {
      out += ",";
      out += format_real(v);
    }
    out += "," + std::to_string(e.rank) + (pruned ? ",1\n" : ",0\n");
  }
  return out;
}

std::string serialize_plan(const PruningPlan& plan, std::string_view model_id) {
  ordered_json j;
  j["tool"] = std::string(kToolName);
  j["version"] = std::string(kToolVersion);
  j["model_id"] = std::string(model_id);
  const ordered_json body = plan_json(plan);
  for (const auto& [key, value] : body.items()) j[key] = value;
  return detail::canonical_json(j);
}

PruningPlan parse_plan(std::string_view text) {
  const ordered_json j = parse_json(text, "plan");
  try {
    return plan_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("plan is missing fields: ") + e.what());
  }
}

std::vector<std::vector<std::size_t>> random_plans(std::size_t layer_count,
                                                   std::size_t prune_count, std::size_t count,
                                                   std::uint64_t seed) {
  if (prune_count > layer_count) {
    throw PlanError("cannot prune " + std::to_string(prune_count) + " of " +
                    std::to_string(layer_count) + " layers");
  }
  std::vector<std::vector<std::size_t>> plans;
  for (std::size_t t = 0; t < count; ++t) {
    std::mt19937_64 rng(seed + t);
    std::vector<std::size_t> pool(layer_count);
    for (std::size_t i = 0; i < layer_count; ++i) pool[i] = i;
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < prune_count; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (layer_count - i));
      std::swap(pool[i], pool[j]);
    }
    std::vector<std::size_t> chosen(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(prune_count));
    std::sort(chosen.begin(), chosen.end());
    plans.push_back(std::move(chosen));
  }
  return plans;
}

double median(std::vector<double> values) {
  if (values.empty()) throw EmptyInputError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

RetentionReport evaluate_retention(const ToyCheckpoint& ckpt, std::span<const Token> heldout,
                                   const std::optional<PruningPlan>& plan,
                                   std::size_t random_prune_count, std::size_t random_count,
                                   std::uint64_t random_seed) {
  const std::size_t m = ckpt.config.n_layers;
  RetentionReport report;
  report.model_id = model_id(ckpt.config);
  report.heldout_tokens = heldout.size();
  report.baseline_perplexity = perplexity(ckpt, heldout);

  auto evaluate = [&](const std::vector<std::size_t>& layers) {
    PlanEvaluation e;
    e.pruned_layers = layers;
    e.perplexity = perplexity(ckpt, heldout, SkipSet(layers.begin(), layers.end()));
    e.retention = report.baseline_perplexity / e.perplexity;
    return e;
  };

  if (plan) {
    if (plan->layer_count != m) {
      throw PlanError("plan was made for " + std::to_string(plan->layer_count) +
                      " layers but the checkpoint has " + std::to_string(m));
    }
    for (const std::size_t l : plan->pruned_layers) {
      if (l >= m) throw PlanError("plan references out-of-range layer " + std::to_string(l));
    }
    report.plan = evaluate(plan->pruned_layers);
  }
  if (random_count > 0) {
    RandomControl control;
    control.prune_count = random_prune_count;
    control.seed = random_seed;
    std::vector<double> ppl, retention;
    for (const auto& layers : random_plans(m, random_prune_count, random_count, random_seed)) {
      control.runs.push_back(evaluate(layers));
      ppl.push_back(control.runs.back().perplexity);
      retention.push_back(control.runs.back().retention);
    }
    control.median_perplexity = median(ppl);
    control.median_retention = median(retention);
    report.random = std::move(control);
  }
  return report;
}

std::string serialize_retention(const RetentionReport& report) {
  ordered_json j;
  j["tool"] = std::string(kToolName);
  j["version"] = std::string(kToolVersion);
  j["model_id"] = report.model_id;
  j["metric"] = "perplexity";
  j["retention_definition"] = "baseline_perplexity / pruned_perplexity";
  j["heldout_tokens"] = report.heldout_tokens;
  j["baseline_perplexity"] = report.baseline_perplexity;
  if (report.plan) j["plan"] = evaluation_json(*report.plan);
  if (report.random) {
    ordered_json r;
    r["prune_count"] = report.random->prune_count;
    r["seed"] = report.random->seed;
    ordered_json runs = ordered_json::array();
    for (const auto& e : report.random->runs) runs.push_back(evaluation_json(e));
    r["runs"] = std::move(runs);
    r["median_perplexity"] = report.random->median_perplexity;
    r["median_retention"] = report.random->median_retention;
    j["random_control"] = std::move(r);
  }
  if (report.plan && report.random) {
    j["plan_at_or_below_random_median"] =
        report.plan->perplexity <= report.random->median_perplexity;
  }
  return detail::canonical_json(j);
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace avss
