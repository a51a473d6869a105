#include "avss/stats.hpp"

#include <cmath>
#include <string>

#include "avss/error.hpp"

namespace avss {

namespace {

template <class T>
MeanVariance two_pass(std::span<const T> values) {
  if (values.empty()) throw EmptyInputError("mean/variance of an empty sample set");
  const double n = static_cast<double>(values.size());
  double sum = 0.0;
  for (const T x : values) sum += static_cast<double>(x);
  const double mean = sum / n;
  double squares = 0.0;
  for (const T x : values) {
    const double d = static_cast<double>(x) - mean;
    squares += d * d;
  }
  return {mean, squares / n};
}

template <class T>
double sparsity_of(std::span<const T> values, double epsilon) {
  if (values.empty()) throw EmptyInputError("sparsity of an empty sample set");
  if (!(epsilon > 0.0)) throw DomainError("sparsity threshold must be > 0");
  std::size_t hits = 0;
  for (const T x : values) {
    if (std::abs(static_cast<double>(x)) < epsilon) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(values.size());
}

}  // namespace

void StatsConfig::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw DomainError("epsilon must be a finite value > 0");
  }
  if (!(sparsity_floor > 0.0) || sparsity_floor > 1.0) {
    throw DomainError("sparsity_floor must lie in (0, 1]");
  }
}

void RunningMoments::merge(const RunningMoments& other) {
  if (other.count_ == 0) return;
  if (count_ == 0) {
    *this = other;
    return;
  }
  const double na = static_cast<double>(count_);
  const double nb = static_cast<double>(other.count_);
  const double n = na + nb;
  const double delta = other.mean_ - mean_;
  mean_ += delta * nb / n;
  m2_ += other.m2_ + delta * delta * na * nb / n;
  count_ += other.count_;
}

MeanVariance RunningMoments::result() const {
  if (count_ == 0) throw EmptyInputError("mean/variance of an empty sample stream");
  return {mean_, m2_ / static_cast<double>(count_)};
}

MeanVariance mean_variance(std::span<const double> values) { return two_pass(values); }
MeanVariance mean_variance(std::span<const float> values) { return two_pass(values); }

MeanVariance layer_mean_variance(const LayerTrace& trace) {
  return trace.visit([](auto values) { return two_pass(values); });
}

MeanVariance layer_mean_variance_streaming(const LayerTrace& trace) {
  return trace.visit([](auto values) { return mean_variance_streaming(values); });
}

double sparsity(std::span<const double> values, double epsilon) {
  return sparsity_of(values, epsilon);
}
double sparsity(std::span<const float> values, double epsilon) {
  return sparsity_of(values, epsilon);
}

double layer_sparsity(const LayerTrace& trace, double epsilon) {
  return trace.visit([&](auto values) { return sparsity_of(values, epsilon); });
}

std::vector<double> normalize_across_layers(std::span<const double> values) {
  if (values.empty()) throw EmptyInputError("cannot normalize an empty list");
  double total = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] >= 0.0) || !std::isfinite(values[i])) {
      throw DomainError("normalization input " + std::to_string(i) +
                        " must be finite and >= 0");
    }
    total += values[i];
  }
  std::vector<double> out(values.size());
  if (total > 0.0) {
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] / total;
  } else {
    const double uniform = 1.0 / static_cast<double>(values.size());
    for (double& v : out) v = uniform;
  }
  return out;
}

double sparsity_deviation(double sparsity, double norm_sparsity) {
  return std::abs(sparsity - norm_sparsity);
}

std::vector<LayerStats> compute_layer_stats(const TraceSet& set, const StatsConfig& config) {
  config.validate();
  if (set.layers.empty()) throw EmptyInputError("trace set has no layers");

  std::vector<LayerStats> out(set.layers.size());
  std::vector<double> variances(out.size());
  std::vector<double> sparsities(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const LayerTrace& layer = set.layers[i];
    const MeanVariance mv = layer_mean_variance(layer);
    LayerStats& s = out[i];
    s.layer_index = layer.layer_index;
    s.mean = mv.mean;
    s.variance = mv.variance;
    s.std_dev = std::sqrt(mv.variance);
    s.sparsity = layer_sparsity(layer, config.epsilon);
    variances[i] = s.variance;
    sparsities[i] = s.sparsity;
  }

  const auto norm_var = normalize_across_layers(variances);
  const auto norm_sp = normalize_across_layers(sparsities);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].norm_variance = norm_var[i];
    out[i].norm_sparsity = norm_sp[i];
    out[i].sparsity_deviation = sparsity_deviation(out[i].sparsity, norm_sp[i]);
  }
  return out;
}

}  // namespace avss
