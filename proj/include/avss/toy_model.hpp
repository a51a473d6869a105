#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "avss/trace.hpp"

namespace avss {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Token = std::uint32_t;

// Byte-level tokenization: one token per byte.
std::vector<Token> bytes_to_tokens(std::string_view text);

struct ToyModelConfig {
  std::size_t vocab_size = 256;
  std::size_t context_len = 64;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_layers = 8;
  std::size_t mlp_ratio = 4;
  bool tie_embeddings = false;
  std::uint64_t seed = 1;
  double learning_rate = 3e-3;
  std::size_t train_steps = 300;
  std::size_t batch_size = 8;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t mlp_hidden() const { return mlp_ratio * d_model; }

  // Throws DomainError on zero dimensions or n_heads not dividing d_model.
  void validate() const;

  // Applies "key=value" to the named field; throws UsageError on unknown keys
  // or unparsable values.
  void set(std::string_view key, std::string_view value);

  friend bool operator==(const ToyModelConfig&, const ToyModelConfig&) = default;
};

struct ParamInfo {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }

  friend bool operator==(const ParamInfo&, const ParamInfo&) = default;
};

// Names and shapes of every parameter tensor, in storage order.
std::vector<ParamInfo> parameter_layout(const ToyModelConfig& config);

struct ToyCheckpoint {
  ToyModelConfig config;
  std::vector<ParamInfo> layout;
  std::vector<double> parameters;  // all tensors, flat, in layout order
  std::vector<double> train_loss_history;

  std::span<double> tensor(std::string_view name);
  std::span<const double> tensor(std::string_view name) const;
  const ParamInfo& info(std::string_view name) const;

  friend bool operator==(const ToyCheckpoint&, const ToyCheckpoint&) = default;
};

// Deterministic initialization from config.seed.
ToyCheckpoint initialize(const ToyModelConfig& config);

// Layers replaced by the identity on the residual stream.
using SkipSet = std::set<std::size_t>;

struct LayerCapture {
  std::size_t layer_index = 0;
  Matrix activations;  // tokens x d_model
};

struct ForwardResult {
  Matrix logits;  // tokens x vocab
  std::vector<LayerCapture> captures;  // non-skipped layers only, depth order
};

// One sequence of at most context_len tokens. Throws InputError on an
// out-of-range token, over-long or empty sequence, or out-of-range skip index.
ForwardResult forward(const ToyCheckpoint& ckpt, std::span<const Token> tokens,
                      const SkipSet& skip = {},
                      std::optional<ActivationPoint> capture = std::nullopt);

// Mean next-token cross-entropy of a batch of equal-length windows, each of
// window_len + 1 tokens (inputs followed by the final target). When `gradient`
// is non-null it receives d(loss)/d(parameters), same layout as parameters.
double batch_loss(const ToyCheckpoint& ckpt, std::span<const Token> windows,
                  std::size_t window_len, std::vector<double>* gradient = nullptr);

struct TrainOptions {
  // Called after every optimizer step with (step, loss).
  std::function<void(std::size_t, double)> on_step;
};

// Next-token cross-entropy training with Adam. Deterministic for a given
// (config, corpus). Throws DataError if the corpus is shorter than
// context_len + 1, DivergenceError on a non-finite loss.
ToyCheckpoint train(const ToyModelConfig& config, std::span<const Token> corpus,
                    const TrainOptions& options = {});

// exp(mean next-token cross-entropy) over consecutive windows of context_len
// inputs; every token after the first is predicted exactly once.
// Throws DataError unless heldout.size() > context_len.
double perplexity(const ToyCheckpoint& ckpt, std::span<const Token> heldout,
                  const SkipSet& skip = {});

// Runs capture-enabled forward passes over consecutive windows and stacks each
// layer's activations into one LayerTrace (samples = tokens, width = d_model).
TraceSet capture_traceset(const ToyCheckpoint& ckpt, std::span<const Token> tokens,
                          ActivationPoint point = ActivationPoint::block_output);

std::string model_id(const ToyModelConfig& config);

struct GradientCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t checked = 0;
};

// Relative error is |a - n| / max(|a|, |n|, kGradientCheckFloor). Central
// differences at step 1e-5 carry ~1e-10 of roundoff, so gradients smaller
// than the floor are effectively compared in absolute terms.
inline constexpr double kGradientCheckFloor = 1e-6;

// Compares analytic gradients with central finite differences at the given
// flat parameter indices.
GradientCheckResult gradient_check(const ToyCheckpoint& ckpt, std::span<const Token> windows,
                                   std::size_t window_len, std::span<const std::size_t> indices,
                                   double step = 1e-5);

// Freshly initialized model from `config`, random batch, every parameter
// checked when there are at most `max_params`, else an evenly strided subset.
GradientCheckResult gradient_check(const ToyModelConfig& config, std::size_t max_params = 5000,
                                   double step = 1e-5);

inline constexpr char kCheckpointMagic[4] = {'A', 'V', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const ToyCheckpoint& ckpt, std::ostream& out);
void write_checkpoint_file(const ToyCheckpoint& ckpt, const std::filesystem::path& path);
ToyCheckpoint read_checkpoint(std::istream& in);
ToyCheckpoint read_checkpoint_file(const std::filesystem::path& path);

}  // namespace avss
