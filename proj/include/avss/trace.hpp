#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace avss {

// Which tensor of a transformer block a trace was captured from.
enum class ActivationPoint { block_output, mlp_output, attention_output };

enum class DType { f32, f64 };

std::string_view to_string(ActivationPoint point);
std::string_view to_string(DType dtype);
ActivationPoint parse_activation_point(std::string_view text);
DType parse_dtype(std::string_view text);
std::size_t dtype_width(DType dtype);

using TraceValues = std::variant<std::vector<float>, std::vector<double>>;

// Activations of one layer: `samples` inputs times `width` scalar elements,
// flattened row-major. Every scalar element is one activation sample.
struct LayerTrace {
  std::size_t layer_index = 0;
  std::size_t samples = 0;
  std::size_t width = 0;
  TraceValues values;

  DType dtype() const;
  std::size_t value_count() const;

  // Calls f with a std::span<const float> or std::span<const double>.
  template <class F>
  decltype(auto) visit(F&& f) const {
    return std::visit([&](const auto& v) -> decltype(auto) { return f(std::span(v)); },
                      values);
  }
};

// Per-layer activation traces of one model, in depth order. Immutable once
// built; share freely between readers.
struct TraceSet {
  std::string model_id;
  ActivationPoint activation_point = ActivationPoint::block_output;
  DType dtype = DType::f32;
  std::string creator;
  // ISO-8601 UTC timestamp; empty when the producer did not stamp one.
  std::string created;
  std::vector<LayerTrace> layers;

  std::size_t layer_count() const { return layers.size(); }
};

// Compares metadata and payload bytes; -0.0 and 0.0 differ, NaN equals itself.
bool bit_equal(const TraceSet& a, const TraceSet& b);

struct Violation {
  // Empty for set-level problems, which sort before every per-layer one.
  std::optional<std::size_t> layer;
  std::string check;
  std::string message;

  friend bool operator==(const Violation&, const Violation&) = default;
};

std::string format_violation(const Violation& v);

// Checks every TraceSet and LayerTrace invariant. Violations are ordered by
// layer index, then check name. An empty result means the set is valid.
std::vector<Violation> validate_trace(const TraceSet& set);

inline constexpr char kTraceMagic[4] = {'A', 'V', 'T', 'R'};
inline constexpr std::uint32_t kTraceVersion = 1;
inline constexpr std::size_t kTracePreambleBytes = 16;  // magic + version + json length

// Serializes the AVTRACE v1 container:
//   "AVTR" | u32 version | u64 json length | json | layer buffers in order
// All integers and values little-endian. Returns the number of bytes written.
// Throws ValidationError if the set is invalid, IoError on a sink failure.
std::uint64_t write_trace(const TraceSet& set, std::ostream& out);
std::uint64_t write_trace_file(const TraceSet& set, const std::filesystem::path& path);

// Parses an AVTRACE v1 container and validates the result before returning.
// Throws FormatError (magic, version, header), CorruptionError (sizes) or
// ValidationError (non-finite values and other invariant violations).
TraceSet read_trace(std::istream& in);
TraceSet read_trace_file(const std::filesystem::path& path);

// Container parsing only (format and size checks); the caller runs
// validate_trace. Used where every violation must be listed.
TraceSet read_trace_unvalidated(std::istream& in);
TraceSet read_trace_unvalidated_file(const std::filesystem::path& path);

// Total payload bytes implied by the per-layer dims.
std::uint64_t payload_bytes(const TraceSet& set);

}  // namespace avss
