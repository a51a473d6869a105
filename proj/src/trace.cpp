#include "avss/trace.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "avss/error.hpp"
#include "binary_io.hpp"

namespace avss {

namespace {

using nlohmann::json;

constexpr std::uint64_t kMaxHeaderBytes = 64ull << 20;

struct PointName {
  ActivationPoint point;
  std::string_view name;
};

constexpr PointName kPointNames[] = {
    {ActivationPoint::block_output, "block_output"},
    {ActivationPoint::mlp_output, "mlp_output"},
    {ActivationPoint::attention_output, "attention_output"},
};

std::uint64_t checked_product(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  constexpr std::uint64_t kLimit = std::uint64_t{1} << 62;
  if (a != 0 && b > kLimit / a) throw CorruptionError("declared layer size overflows");
  const std::uint64_t ab = a * b;
  if (ab != 0 && c > kLimit / ab) throw CorruptionError("declared layer size overflows");
  return ab * c;
}

}  // namespace

std::string_view to_string(ActivationPoint point) {
  for (const auto& entry : kPointNames) {
    if (entry.point == point) return entry.name;
  }
  return "unknown";
}

std::string_view to_string(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

ActivationPoint parse_activation_point(std::string_view text) {
  for (const auto& entry : kPointNames) {
    if (entry.name == text) return entry.point;
  }
  throw FormatError("unknown activation point '" + std::string(text) + "'");
}

DType parse_dtype(std::string_view text) {
  if (text == "f32") return DType::f32;
  if (text == "f64") return DType::f64;
  throw FormatError("unknown dtype '" + std::string(text) + "'");
}

std::size_t dtype_width(DType dtype) { return dtype == DType::f32 ? 4 : 8; }

DType LayerTrace::dtype() const {
  return std::holds_alternative<std::vector<float>>(values) ? DType::f32 : DType::f64;
}

std::size_t LayerTrace::value_count() const {
  return visit([](auto span) { return span.size(); });
}

bool bit_equal(const TraceSet& a, const TraceSet& b) {
  if (a.model_id != b.model_id || a.activation_point != b.activation_point ||
      a.dtype != b.dtype || a.creator != b.creator || a.created != b.created ||
      a.layers.size() != b.layers.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const LayerTrace& x = a.layers[i];
    const LayerTrace& y = b.layers[i];
    if (x.layer_index != y.layer_index || x.samples != y.samples || x.width != y.width ||
        x.values.index() != y.values.index() || x.value_count() != y.value_count()) {
      return false;
    }
    const bool same = std::visit(
        [&](const auto& xv) {
          using V = std::decay_t<decltype(xv)>;
          const auto& yv = std::get<V>(y.values);
          return xv.empty() ||
                 std::memcmp(xv.data(), yv.data(), xv.size() * sizeof(xv[0])) == 0;
        },
        x.values);
    if (!same) return false;
  }
  return true;
}

std::string format_violation(const Violation& v) {
  std::string out = v.layer ? "layer " + std::to_string(*v.layer) : std::string("set");
  out += ": ";
  out += v.check;
  out += ": ";
  out += v.message;
  return out;
}

std::vector<Violation> validate_trace(const TraceSet& set) {
  std::vector<Violation> out;
  const std::size_t m = set.layers.size();
  if (m == 0) {
    out.push_back({std::nullopt, "layer_count", "trace set has no layers"});
    return out;
  }

  // Modal sample count; ties go to the value seen first in depth order.
  std::map<std::size_t, std::size_t> counts;
  for (const auto& layer : set.layers) ++counts[layer.samples];
  std::size_t reference_samples = set.layers.front().samples;
  std::size_t best = 0;
  for (const auto& layer : set.layers) {
    const std::size_t c = counts[layer.samples];
    if (c > best) {
      best = c;
      reference_samples = layer.samples;
    }
  }

  for (std::size_t i = 0; i < m; ++i) {
    const LayerTrace& layer = set.layers[i];
    std::vector<Violation> here;
    if (layer.samples == 0 || layer.width == 0) {
      here.push_back({i, "dims",
                      "samples and width must be >= 1 (got " + std::to_string(layer.samples) +
                          " x " + std::to_string(layer.width) + ")"});
    } else if (layer.value_count() != layer.samples * layer.width) {
      here.push_back({i, "dims",
                      "expected " + std::to_string(layer.samples * layer.width) +
                          " values, found " + std::to_string(layer.value_count())});
    }
    if (layer.dtype() != set.dtype) {
      here.push_back({i, "dtype",
                      "layer dtype " + std::string(to_string(layer.dtype())) +
                          " differs from set dtype " + std::string(to_string(set.dtype))});
    }
    if (layer.layer_index != i) {
      here.push_back({i, "layer_index",
                      "position " + std::to_string(i) + " carries index " +
                          std::to_string(layer.layer_index)});
    }
    if (layer.samples != reference_samples) {
      here.push_back({i, "sample_count",
                      "sample count " + std::to_string(layer.samples) + " differs from " +
                          std::to_string(reference_samples)});
    }
    layer.visit([&](auto values) {
      std::size_t bad = 0;
      std::size_t first = 0;
      for (std::size_t j = 0; j < values.size(); ++j) {
        if (!std::isfinite(values[j])) {
          if (bad == 0) first = j;
          ++bad;
        }
      }
      if (bad > 0) {
        here.push_back({i, "finite",
                        "non-finite value at element offset " + std::to_string(first) + " (" +
                            std::to_string(bad) + " total)"});
      }
    });
    std::sort(here.begin(), here.end(),
              [](const Violation& a, const Violation& b) { return a.check < b.check; });
    out.insert(out.end(), here.begin(), here.end());
  }
  return out;
}

std::uint64_t payload_bytes(const TraceSet& set) {
  std::uint64_t total = 0;
  for (const auto& layer : set.layers) {
    total += checked_product(layer.samples, layer.width, dtype_width(set.dtype));
  }
  return total;
}

std::uint64_t write_trace(const TraceSet& set, std::ostream& out) {
  const auto violations = validate_trace(set);
  if (!violations.empty()) {
    throw ValidationError("refusing to write invalid trace set: " +
                          format_violation(violations.front()));
  }

  json header;
  header["model_id"] = set.model_id;
  header["layer_count"] = set.layers.size();
  header["dtype"] = std::string(to_string(set.dtype));
  header["activation_point"] = std::string(to_string(set.activation_point));
  header["creator"] = set.creator;
  header["created"] = set.created;
  json layers = json::array();
  for (const auto& layer : set.layers) {
    layers.push_back({{"index", layer.layer_index},
                      {"samples", layer.samples},
                      {"width", layer.width}});
  }
  header["layers"] = std::move(layers);
  const std::string header_text = header.dump();

  std::uint64_t offset = 0;
  std::vector<char> buffer;
  buffer.insert(buffer.end(), std::begin(kTraceMagic), std::end(kTraceMagic));
  detail::append_le(buffer, kTraceVersion);
  detail::append_le(buffer, static_cast<std::uint64_t>(header_text.size()));
  buffer.insert(buffer.end(), header_text.begin(), header_text.end());
  detail::write_bytes(out, buffer, offset);

  for (const auto& layer : set.layers) {
    buffer.clear();
    layer.visit([&](auto values) { detail::append_le(buffer, values); });
    detail::write_bytes(out, buffer, offset);
  }
  out.flush();
  if (!out) throw IoError("flush failed at byte offset " + std::to_string(offset));
  return offset;
}

std::uint64_t write_trace_file(const TraceSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return write_trace(set, out);
}

TraceSet read_trace_unvalidated(std::istream& in) {
  char preamble[kTracePreambleBytes];
  const std::size_t got = detail::read_up_to(in, preamble, sizeof(preamble));
  if (got < sizeof(kTraceMagic) || std::memcmp(preamble, kTraceMagic, sizeof(kTraceMagic)) != 0) {
    throw FormatError("bad magic: not an AVTRACE file");
  }
  if (got < kTracePreambleBytes) {
    throw CorruptionError("truncated preamble: expected " + std::to_string(kTracePreambleBytes) +
                          " bytes, found " + std::to_string(got));
  }
  const auto version = detail::decode_le_one<std::uint32_t>(preamble + 4);
  if (version != kTraceVersion) {
    throw FormatError("unsupported AVTRACE version " + std::to_string(version));
  }
  const auto header_len = detail::decode_le_one<std::uint64_t>(preamble + 8);
  if (header_len > kMaxHeaderBytes) {
    throw CorruptionError("declared header length " + std::to_string(header_len) +
                          " is implausible");
  }
  std::string header_text(header_len, '\0');
  const std::size_t header_got = detail::read_up_to(in, header_text.data(), header_len);
  if (header_got != header_len) {
    throw CorruptionError("truncated header: expected " + std::to_string(header_len) +
                          " bytes, found " + std::to_string(header_got));
  }

  TraceSet set;
  std::vector<std::pair<std::size_t, std::size_t>> dims;
  std::vector<std::size_t> indices;
  try {
    const json header = json::parse(header_text);
    set.model_id = header.at("model_id").get<std::string>();
    set.dtype = parse_dtype(header.at("dtype").get<std::string>());
    set.activation_point = parse_activation_point(header.at("activation_point").get<std::string>());
    set.creator = header.value("creator", std::string());
    set.created = header.value("created", std::string());
    const auto layer_count = header.at("layer_count").get<std::size_t>();
    const json& layers = header.at("layers");
    if (!layers.is_array() || layers.size() != layer_count) {
      throw FormatError("header declares " + std::to_string(layer_count) +
                        " layers but lists " + std::to_string(layers.size()));
    }
    for (const json& entry : layers) {
      indices.push_back(entry.at("index").get<std::size_t>());
      dims.emplace_back(entry.at("samples").get<std::size_t>(),
                        entry.at("width").get<std::size_t>());
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed trace header: ") + e.what());
  }

  const std::size_t width = dtype_width(set.dtype);
  std::uint64_t expected = 0;
  for (const auto& [samples, cols] : dims) expected += checked_product(samples, cols, width);

  const std::vector<char> payload = detail::read_rest(in);
  if (payload.size() != expected) {
    throw CorruptionError("payload size mismatch: expected " + std::to_string(expected) +
                          " bytes, found " + std::to_string(payload.size()));
  }

  std::size_t cursor = 0;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    LayerTrace layer;
    layer.layer_index = indices[i];
    layer.samples = dims[i].first;
    layer.width = dims[i].second;
    const std::size_t count = layer.samples * layer.width;
    if (set.dtype == DType::f32) {
      layer.values = detail::decode_le<float>(payload.data() + cursor, count);
    } else {
      layer.values = detail::decode_le<double>(payload.data() + cursor, count);
    }
    cursor += count * width;
    set.layers.push_back(std::move(layer));
  }
  return set;
}

TraceSet read_trace(std::istream& in) {
  TraceSet set = read_trace_unvalidated(in);
  const auto violations = validate_trace(set);
  if (!violations.empty()) {
    std::string message = "invalid trace: " + format_violation(violations.front());
    if (violations.size() > 1) {
      message += " (+" + std::to_string(violations.size() - 1) + " more)";
    }
    throw ValidationError(message);
  }
  return set;
}

TraceSet read_trace_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return read_trace(in);
}

TraceSet read_trace_unvalidated_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return read_trace_unvalidated(in);
}

}  // namespace avss
