// .avckpt container: "AVCK" | u32 version | u64 json length | json | buffers.
// The json header carries the model config and the name and shape of every
// buffer; buffers are f64, little-endian, in header order, with the training
// loss history last.

#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "avss/error.hpp"
#include "avss/toy_model.hpp"
#include "binary_io.hpp"

namespace avss {

namespace {

using nlohmann::ordered_json;

constexpr std::uint64_t kMaxHeaderBytes = 64ull << 20;
constexpr std::string_view kLossHistory = "train_loss_history";

ordered_json config_to_json(const ToyModelConfig& c) {
  ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["context_len"] = c.context_len;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["n_layers"] = c.n_layers;
  j["mlp_ratio"] = c.mlp_ratio;
  j["tie_embeddings"] = c.tie_embeddings;
  j["seed"] = c.seed;
  j["learning_rate"] = c.learning_rate;
  j["train_steps"] = c.train_steps;
  j["batch_size"] = c.batch_size;
  return j;
}

ToyModelConfig config_from_json(const ordered_json& j) {
  ToyModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.context_len = j.at("context_len").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.tie_embeddings = j.at("tie_embeddings").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.train_steps = j.at("train_steps").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  return c;
}

}  // namespace

void write_checkpoint(const ToyCheckpoint& ckpt, std::ostream& out) {
  ordered_json header;
  header["format"] = "avckpt";
  header["dtype"] = "f64";
  header["config"] = config_to_json(ckpt.config);
  ordered_json buffers = ordered_json::array();
  for (const auto& p : ckpt.layout) {
    buffers.push_back({{"name", p.name}, {"rows", p.rows}, {"cols", p.cols}});
  }
  buffers.push_back(
      {{"name", kLossHistory}, {"rows", 1}, {"cols", ckpt.train_loss_history.size()}});
  header["buffers"] = std::move(buffers);
  const std::string text = header.dump(2);

  std::vector<char> bytes;
  bytes.insert(bytes.end(), std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::append_le(bytes, kCheckpointVersion);
  detail::append_le(bytes, static_cast<std::uint64_t>(text.size()));
  bytes.insert(bytes.end(), text.begin(), text.end());
  detail::append_le(bytes, std::span<const double>(ckpt.parameters));
  detail::append_le(bytes, std::span<const double>(ckpt.train_loss_history));
  std::uint64_t offset = 0;
  detail::write_bytes(out, bytes, offset);
  out.flush();
  if (!out) throw IoError("flush failed at byte offset " + std::to_string(offset));
}

void write_checkpoint_file(const ToyCheckpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  write_checkpoint(ckpt, out);
}

ToyCheckpoint read_checkpoint(std::istream& in) {
  char preamble[16];
  const std::size_t got = detail::read_up_to(in, preamble, sizeof(preamble));
  if (got < 4 || std::memcmp(preamble, kCheckpointMagic, 4) != 0) {
    throw FormatError("bad magic: not an AVCKPT file");
  }
  if (got < sizeof(preamble)) throw CorruptionError("truncated checkpoint preamble");
  const auto version = detail::decode_le_one<std::uint32_t>(preamble + 4);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = detail::decode_le_one<std::uint64_t>(preamble + 8);
  if (header_len > kMaxHeaderBytes) throw CorruptionError("implausible checkpoint header length");
  std::string text(header_len, '\0');
  if (detail::read_up_to(in, text.data(), header_len) != header_len) {
    throw CorruptionError("truncated checkpoint header");
  }

  ToyCheckpoint ckpt;
  std::size_t history_len = 0;
  try {
    const ordered_json header = ordered_json::parse(text);
    ckpt.config = config_from_json(header.at("config"));
    ckpt.config.validate();
    ckpt.layout = parameter_layout(ckpt.config);
    const auto& buffers = header.at("buffers");
    if (buffers.size() != ckpt.layout.size() + 1) {
      throw FormatError("checkpoint buffer list does not match its config");
    }
    for (std::size_t i = 0; i < ckpt.layout.size(); ++i) {
      const auto& b = buffers[i];
      const auto& p = ckpt.layout[i];
      if (b.at("name").get<std::string>() != p.name || b.at("rows").get<std::size_t>() != p.rows ||
          b.at("cols").get<std::size_t>() != p.cols) {
        throw FormatError("checkpoint buffer " + std::to_string(i) + " does not match layout (" +
                          p.name + ")");
      }
    }
    const auto& last = buffers.back();
    if (last.at("name").get<std::string>() != kLossHistory) {
      throw FormatError("checkpoint is missing the loss history buffer");
    }
    history_len = last.at("cols").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what());
  }

  const auto& tail = ckpt.layout.back();
  const std::size_t param_count = tail.offset + tail.size();
  const std::vector<char> payload = detail::read_rest(in);
  const std::uint64_t expected = (param_count + history_len) * sizeof(double);
  if (payload.size() != expected) {
    throw CorruptionError("checkpoint payload size mismatch: expected " + std::to_string(expected) +
                          " bytes, found " + std::to_string(payload.size()));
  }
  ckpt.parameters = detail::decode_le<double>(payload.data(), param_count);
  ckpt.train_loss_history =
      detail::decode_le<double>(payload.data() + param_count * sizeof(double), history_len);
  for (std::size_t i = 0; i < ckpt.parameters.size(); ++i) {
    if (!std::isfinite(ckpt.parameters[i])) {
      throw ValidationError("checkpoint parameter " + std::to_string(i) + " is not finite");
    }
  }
  return ckpt;
}

ToyCheckpoint read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return read_checkpoint(in);
}

}  // namespace avss
