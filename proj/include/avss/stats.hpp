#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "avss/trace.hpp"

namespace avss {

struct StatsConfig {
  // Sparsity threshold: a sample counts as inactive when |a| < epsilon.
  double epsilon = 0.01;
  // Lower clamp on sparsity in the AVSS quotient.
  double sparsity_floor = 1e-6;

  // Throws DomainError unless epsilon > 0 and 0 < sparsity_floor <= 1.
  void validate() const;
};

struct MeanVariance {
  double mean = 0.0;
  double variance = 0.0;  // population variance, divisor = sample count
};

// Statistics of one layer's activations, raw and normalized across layers.
struct LayerStats {
  std::size_t layer_index = 0;
  double mean = 0.0;
  double variance = 0.0;
  double std_dev = 0.0;
  double norm_variance = 0.0;
  double sparsity = 0.0;
  double norm_sparsity = 0.0;
  double sparsity_deviation = 0.0;
};

// Welford accumulator: single pass, numerically stable.
class RunningMoments {
 public:
  void add(double x) {
    ++count_;
    const double delta = x - mean_;
    mean_ += delta / static_cast<double>(count_);
    m2_ += delta * (x - mean_);
  }

  // Chan et al. pairwise combination.
  void merge(const RunningMoments& other);

  std::uint64_t count() const { return count_; }
  double mean() const { return mean_; }
  // Throws EmptyInputError when no samples were added.
  MeanVariance result() const;

 private:
  std::uint64_t count_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

// Two-pass mean and population variance. Throws EmptyInputError on empty input.
MeanVariance mean_variance(std::span<const double> values);
MeanVariance mean_variance(std::span<const float> values);
MeanVariance layer_mean_variance(const LayerTrace& trace);

// Single-pass form of the same quantity.
template <class Range>
MeanVariance mean_variance_streaming(const Range& samples) {
  RunningMoments acc;
  for (const auto& x : samples) acc.add(static_cast<double>(x));
  return acc.result();
}
MeanVariance layer_mean_variance_streaming(const LayerTrace& trace);

// Fraction of samples with |a| < epsilon (strict).
double sparsity(std::span<const double> values, double epsilon);
double sparsity(std::span<const float> values, double epsilon);
double layer_sparsity(const LayerTrace& trace, double epsilon);

// value_i / sum(values). An all-zero input yields the uniform vector 1/M.
// Throws DomainError on negative or non-finite input, EmptyInputError on empty.
std::vector<double> normalize_across_layers(std::span<const double> values);

// |sparsity - norm_sparsity|. Reported only; never feeds layer selection.
double sparsity_deviation(double sparsity, double norm_sparsity);

std::vector<LayerStats> compute_layer_stats(const TraceSet& set, const StatsConfig& config);

}  // namespace avss
